//! Fuzzy C-means over pixel spectra.
//!
//! The fitted memberships are the soft per-pixel targets that train both
//! the U-Net and the graph networks.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STRIDE: usize = 56;
pub const DEFAULT_FUZZIFIER: f64 = 2.0;

/// Pixel spectra, one row of `bands` values per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectra {
    pub bands: usize,
    pub data: Vec<f32>,
}

impl Spectra {
    pub fn len(&self) -> usize {
        if self.bands == 0 {
            0
        } else {
            self.data.len() / self.bands
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.bands..(i + 1) * self.bands]
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let bands = rows.first().map_or(0, Vec::len);
        Self {
            bands,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn extend(&mut self, other: &Spectra) {
        assert_eq!(self.bands, other.bands);
        self.data.extend_from_slice(&other.data);
    }
}

/// Take every `stride`-th pixel (flattened row-major index 0, stride, 2·stride, …)
/// of a band-major raster.
pub fn subsample_raster(raster: &[f32], bands: usize, stride: usize) -> Result<Spectra> {
    if stride == 0 {
        return Err(Error::invalid("stride must be ≥ 1"));
    }
    let pixels = raster.len() / bands.max(1);
    let mut data = Vec::with_capacity(pixels.div_ceil(stride) * bands);
    for p in (0..pixels).step_by(stride) {
        for b in 0..bands {
            data.push(raster[b * pixels + p]);
        }
    }
    Ok(Spectra { bands, data })
}

pub fn subsample_pixels(tile: &crate::ingest::Tile, stride: usize) -> Result<Spectra> {
    subsample_raster(&tile.data, tile.bands, stride)
}

/// Per-pixel membership over `clusters`, stored `[pixel][cluster]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipField {
    pub clusters: usize,
    pub data: Vec<f32>,
}

impl MembershipField {
    pub fn pixels(&self) -> usize {
        self.data.len() / self.clusters
    }

    pub fn row(&self, pixel: usize) -> &[f32] {
        &self.data[pixel * self.clusters..(pixel + 1) * self.clusters]
    }

    /// Class-major copy `[cluster][pixel]`, the layout the U-Net predicts.
    pub fn class_major(&self) -> Vec<f32> {
        let n = self.pixels();
        let mut out = vec![0.0; self.data.len()];
        for p in 0..n {
            for c in 0..self.clusters {
                out[c * n + p] = self.data[p * self.clusters + c];
            }
        }
        out
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.data
            .chunks(self.clusters)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect()
    }
}

/// Fitted fuzzy C-means model. Centroids live in z-scored spectral space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcmModel {
    #[serde(rename = "C")]
    pub clusters: usize,
    pub m: f64,
    pub centroids: Vec<Vec<f64>>,
    pub band_mean: Vec<f64>,
    pub band_std: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct FcmParams {
    pub clusters: usize,
    pub m: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl FcmParams {
    pub fn new(clusters: usize) -> Self {
        Self {
            clusters,
            m: DEFAULT_FUZZIFIER,
            tolerance: 1e-5,
            max_iter: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FcmFit {
    pub model: FcmModel,
    /// `Σ_i Σ_c u_ic^m ‖x_i − c_c‖²` after each membership update.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// Membership of one point given squared distances to every centroid:
/// `u_c = 1 / Σ_k (d_c / d_k)^(2/(m−1))`. Points on a centroid get all of
/// their membership there (split evenly if several centroids coincide).
fn memberships_from_sq_dist(d2: &[f64], m: f64, out: &mut [f64]) {
    let zeros = d2.iter().filter(|&&d| d == 0.0).count();
    if zeros > 0 {
        for (u, &d) in out.iter_mut().zip(d2) {
            *u = if d == 0.0 { 1.0 / zeros as f64 } else { 0.0 };
        }
        return;
    }
    let exponent = 1.0 / (m - 1.0);
    let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
    // scale by the nearest distance so the ratios stay in (0, 1]
    let mut total = 0.0;
    for (u, &d) in out.iter_mut().zip(d2) {
        *u = (dmin / d).powf(exponent);
        total += *u;
    }
    for u in out.iter_mut() {
        *u /= total;
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn standardize(samples: &Spectra) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let b = samples.bands;
    let mut mean = vec![0.0; b];
    let mut sq = vec![0.0; b];
    for i in 0..samples.len() {
        for (j, &v) in samples.row(i).iter().enumerate() {
            mean[j] += v as f64;
            sq[j] += (v as f64).powi(2);
        }
    }
    for j in 0..b {
        mean[j] /= n;
        sq[j] = (sq[j] / n - mean[j] * mean[j]).max(0.0).sqrt().max(1e-6);
    }
    let z = samples
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 - mean[i % b]) / sq[i % b])
        .collect();
    (z, mean, sq)
}

/// k-means++ seeding: first centroid uniform, then D²-weighted draws.
fn seed_centroids(z: &[f64], bands: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = z.len() / bands;
    let row = |i: usize| &z[i * bands..(i + 1) * bands];
    let mut centroids = vec![row(rng.random_range(0..n)).to_vec()];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

pub fn fcm_fit(samples: &Spectra, params: &FcmParams) -> Result<FcmFit> {
    let c = params.clusters;
    let bands = samples.bands;
    if c == 0 {
        return Err(Error::invalid("cluster count must be ≥ 1"));
    }
    if samples.len() < c {
        return Err(Error::invalid(format!("{} samples for {c} clusters", samples.len())));
    }
    if params.m <= 1.0 {
        return Err(Error::invalid("fuzzifier m must exceed 1"));
    }
    if samples.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite sample value"));
    }
    let n = samples.len();
    let (z, band_mean, band_std) = standardize(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = seed_centroids(&z, bands, c, &mut rng);
    let mut u = vec![0.0; n * c];
    let mut objective = Vec::new();
    let mut iterations = 0;

    for _ in 0..params.max_iter {
        iterations += 1;
        let j: f64 = u
            .par_chunks_mut(c)
            .enumerate()
            .map(|(i, ui)| {
                let x = &z[i * bands..(i + 1) * bands];
                let d2: Vec<f64> = centroids.iter().map(|ck| sq_dist(x, ck)).collect();
                memberships_from_sq_dist(&d2, params.m, ui);
                ui.iter().zip(&d2).map(|(&uv, &d)| uv.powf(params.m) * d).sum::<f64>()
            })
            .sum();
        objective.push(j);

        let (num, den) = (0..n)
            .into_par_iter()
            .fold(
                || (vec![0.0; c * bands], vec![0.0; c]),
                |(mut num, mut den), i| {
                    let x = &z[i * bands..(i + 1) * bands];
                    for k in 0..c {
                        let w = u[i * c + k].powf(params.m);
                        den[k] += w;
                        for b in 0..bands {
                            num[k * bands + b] += w * x[b];
                        }
                    }
                    (num, den)
                },
            )
            .reduce(
                || (vec![0.0; c * bands], vec![0.0; c]),
                |(mut a, mut b), (x, y)| {
                    a.iter_mut().zip(x).for_each(|(p, q)| *p += q);
                    b.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                    (a, b)
                },
            );
        let mut shift: f64 = 0.0;
        for k in 0..c {
            if den[k] <= 0.0 {
                continue;
            }
            let next: Vec<f64> = (0..bands).map(|b| num[k * bands + b] / den[k]).collect();
            shift = shift.max(sq_dist(&next, &centroids[k]).sqrt());
            centroids[k] = next;
        }
        if !centroids.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Divergence("non-finite centroid".into()));
        }
        if shift < params.tolerance {
            break;
        }
    }
    Ok(FcmFit {
        model: FcmModel {
            clusters: c,
            m: params.m,
            centroids,
            band_mean,
            band_std,
            seed: params.seed,
        },
        objective,
        iterations,
    })
}

impl FcmModel {
    pub fn bands(&self) -> usize {
        self.band_mean.len()
    }

    /// Membership vector for one raw spectrum.
    pub fn membership(&self, spectrum: &[f32]) -> Vec<f64> {
        let z: Vec<f64> = spectrum
            .iter()
            .enumerate()
            .map(|(b, &v)| (v as f64 - self.band_mean[b]) / self.band_std[b])
            .collect();
        let d2: Vec<f64> = self.centroids.iter().map(|c| sq_dist(&z, c)).collect();
        let mut u = vec![0.0; self.clusters];
        memberships_from_sq_dist(&d2, self.m, &mut u);
        u
    }

    /// Memberships for every pixel of a band-major raster.
    pub fn predict_raster(&self, raster: &[f32], bands: usize) -> Result<MembershipField> {
        if bands != self.bands() {
            return Err(Error::invalid(format!(
                "raster has {bands} bands, model expects {}",
                self.bands()
            )));
        }
        let pixels = raster.len() / bands;
        let mut data = vec![0.0f32; pixels * self.clusters];
        data.par_chunks_mut(self.clusters).enumerate().for_each(|(p, out)| {
            let spectrum: Vec<f32> = (0..bands).map(|b| raster[b * pixels + p]).collect();
            for (o, u) in out.iter_mut().zip(self.membership(&spectrum)) {
                *o = u as f32;
            }
        });
        Ok(MembershipField {
            clusters: self.clusters,
            data,
        })
    }

    pub fn predict_tile(&self, tile: &crate::ingest::Tile) -> Result<MembershipField> {
        self.predict_raster(&tile.data, tile.bands)
    }

    pub fn predict_chip(&self, chip: &crate::ingest::Chip) -> Result<MembershipField> {
        self.predict_raster(&chip.data, chip.bands)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let choose2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let sum_cells: f64 = table.iter().map(|&n| choose2(n)).sum();
    let rows: f64 = (0..ka).map(|i| choose2((0..kb).map(|j| table[i * kb + j]).sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = choose2(a.len() as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (sum_cells - expected) / (max - expected)
}
