//! Texture, structure and spectral similarity between two image regions.

use crate::error::{Error, Result};

pub const GLCM_LEVELS: usize = 32;
/// Uniform LBP with 8 neighbours: codes 0..=8 for uniform patterns plus one
/// bin for everything else.
pub const LBP_BINS: usize = 10;

/// Row-major scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Patch {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape {
                op: "patch",
                lhs: vec![height, width],
                rhs: vec![values.len()],
            });
        }
        Ok(Self { height, width, values })
    }

    fn check(&self) -> Result<()> {
        if self.height * self.width < 2 {
            return Err(Error::invalid("patch needs at least 2 pixels"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("patch has non-finite values"));
        }
        Ok(())
    }
}

/// Quantize two patches to `levels` grey levels over their joint range.
pub fn quantize_pair(a: &Patch, b: &Patch, levels: usize) -> (Vec<usize>, Vec<usize>) {
    let (lo, hi) = a
        .values
        .iter()
        .chain(&b.values)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let q = |v: f64| {
        if hi > lo {
            (((v - lo) / (hi - lo) * levels as f64) as usize).min(levels - 1)
        } else {
            0
        }
    };
    (a.values.iter().map(|&v| q(v)).collect(), b.values.iter().map(|&v| q(v)).collect())
}

/// Symmetric, normalized co-occurrence matrix over offsets (0,1) and (1,0).
pub fn glcm(levels_img: &[usize], height: usize, width: usize, levels: usize) -> Vec<f64> {
    let mut m = vec![0.0; levels * levels];
    let mut total = 0.0;
    for r in 0..height {
        for c in 0..width {
            let p = levels_img[r * width + c];
            for (dr, dc) in [(0, 1), (1, 0)] {
                let (rr, cc) = (r + dr, c + dc);
                if rr < height && cc < width {
                    let q = levels_img[rr * width + cc];
                    m[p * levels + q] += 1.0;
                    m[q * levels + p] += 1.0;
                    total += 2.0;
                }
            }
        }
    }
    if total > 0.0 {
        m.iter_mut().for_each(|v| *v /= total);
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlcmStats {
    /// Divided by `(levels − 1)²` so it lies in `[0, 1]`.
    pub contrast: f64,
    pub homogeneity: f64,
    /// Square root of the angular second moment.
    pub energy: f64,
}

pub fn glcm_stats(m: &[f64], levels: usize) -> GlcmStats {
    let (mut contrast, mut homogeneity, mut asm) = (0.0, 0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let p = m[i * levels + j];
            let d2 = (i as f64 - j as f64).powi(2);
            contrast += p * d2;
            homogeneity += p / (1.0 + d2);
            asm += p * p;
        }
    }
    GlcmStats {
        contrast: contrast / ((levels - 1) as f64).powi(2),
        homogeneity,
        energy: asm.sqrt(),
    }
}

/// Sum of absolute differences of contrast, homogeneity and energy; 0 for
/// identical textures, at most 3.
pub fn glcm_dissimilarity(a: &Patch, b: &Patch) -> Result<f64> {
    a.check()?;
    b.check()?;
    let (qa, qb) = quantize_pair(a, b, GLCM_LEVELS);
    let sa = glcm_stats(&glcm(&qa, a.height, a.width, GLCM_LEVELS), GLCM_LEVELS);
    let sb = glcm_stats(&glcm(&qb, b.height, b.width, GLCM_LEVELS), GLCM_LEVELS);
    Ok((sa.contrast - sb.contrast).abs() + (sa.homogeneity - sb.homogeneity).abs() + (sa.energy - sb.energy).abs())
}

/// Neighbours in circular order, starting east and turning counter-clockwise.
const RING: [(isize, isize); 8] = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];

/// Uniform LBP code per pixel on the 8-neighbourhood at radius 1. Borders
/// replicate the edge pixel.
pub fn lbp_codes(p: &Patch) -> Vec<usize> {
    let (h, w) = (p.height as isize, p.width as isize);
    let at = |r: isize, c: isize| p.values[(r.clamp(0, h - 1) * w + c.clamp(0, w - 1)) as usize];
    let mut out = Vec::with_capacity(p.values.len());
    for r in 0..h {
        for c in 0..w {
            let centre = at(r, c);
            let bits: Vec<bool> = RING.iter().map(|&(dr, dc)| at(r + dr, c + dc) >= centre).collect();
            let transitions = (0..8).filter(|&i| bits[i] != bits[(i + 1) % 8]).count();
            out.push(if transitions <= 2 {
                bits.iter().filter(|&&b| b).count()
            } else {
                LBP_BINS - 1
            });
        }
    }
    out
}

pub fn lbp_histogram(p: &Patch) -> [f64; LBP_BINS] {
    let mut h = [0.0; LBP_BINS];
    let codes = lbp_codes(p);
    for &c in &codes {
        h[c] += 1.0;
    }
    h.iter_mut().for_each(|v| *v /= codes.len() as f64);
    h
}

/// Histogram intersection of normalized uniform-LBP histograms, in `[0, 1]`.
pub fn lbp_similarity(a: &Patch, b: &Patch) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(histogram_intersection(&lbp_histogram(a), &lbp_histogram(b)))
}

pub fn histogram_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum::<f64>().min(1.0)
}

/// Global SSIM over paired samples with dynamic range `range`.
pub fn ssim(a: &[f64], b: &[f64], range: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("ssim needs equal non-empty inputs, got {} and {}", a.len(), b.len())));
    }
    if !(range > 0.0) {
        return Err(Error::invalid("ssim range must be positive"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    Ok((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
}

/// Spectral angle in radians, in `[0, π]`.
pub fn sam(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("spectra differ in length"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("spectral angle of a zero-norm spectrum"));
    }
    if a == b {
        return Ok(0.0);
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0).acos())
}
