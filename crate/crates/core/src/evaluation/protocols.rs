//! Feature-based and context-aware evaluation of segment embeddings.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::measures::{glcm_dissimilarity, lbp_similarity, sam, ssim, Patch};
use crate::error::{Error, Result};
use crate::graphs::knn_edges;
use crate::ingest::{grey_plane, Chip};
use crate::matching::{euclidean_cost, hungarian};
use crate::superpixels::SegmentMap;

/// Spatial neighbours gathered around each side of a context pair.
pub const CONTEXT_NEIGHBOURS: usize = 8;

/// One chip's segmentation and per-segment embeddings.
#[derive(Clone, Copy, Debug)]
pub struct EvalChip<'a> {
    pub chip: &'a Chip,
    pub segments: &'a SegmentMap,
    pub embeddings: &'a [Vec<f32>],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Feature,
    Context,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "feature" => Ok(Protocol::Feature),
            "context" => Ok(Protocol::Context),
            other => Err(Error::invalid(format!("unknown protocol {other:?}"))),
        }
    }
}

/// Means of the four measures. GLCM and SAM: lower is better; LBP and
/// SSIM: higher is better.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Measures {
    pub glcm: f64,
    pub lbp: f64,
    pub ssim: f64,
    pub sam: f64,
}

impl Measures {
    fn add(self, o: Measures) -> Measures {
        Measures {
            glcm: self.glcm + o.glcm,
            lbp: self.lbp + o.lbp,
            ssim: self.ssim + o.ssim,
            sam: self.sam + o.sam,
        }
    }

    fn scale(self, s: f64) -> Measures {
        Measures {
            glcm: self.glcm * s,
            lbp: self.lbp * s,
            ssim: self.ssim * s,
            sam: self.sam * s,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Model tag such as `GCN 8`.
    pub model: String,
    pub protocol: Protocol,
    pub params: EvalParams,
    pub measures: Measures,
    /// Segments that contributed.
    pub segments: usize,
    /// Pairs dropped because a measure was undefined for them.
    pub skipped_pairs: usize,
    pub seconds: f64,
}

/// Everything the measures need from one segment, extracted once.
#[derive(Clone, Debug)]
pub struct SegmentView {
    /// Display-grey bounding box.
    pub grey: Patch,
    /// Bounding-box membership mask.
    pub mask: Vec<bool>,
    /// Spectra of the bounding-box pixels, pixel-major.
    pub spectra: Vec<f64>,
    pub bands: usize,
    pub mean_spectrum: Vec<f64>,
}

impl SegmentView {
    pub fn new(chip: &Chip, seg: &SegmentMap, id: usize) -> Result<Self> {
        Self::with_grey(chip, &grey_plane(chip), seg, id)
    }

    fn with_grey(chip: &Chip, grey_full: &[f64], seg: &SegmentMap, id: usize) -> Result<Self> {
        if seg.height != chip.size || seg.width != chip.size {
            return Err(Error::invalid(format!("segmentation of {} does not match the chip", chip.id)));
        }
        let s = seg.segments.get(id).ok_or_else(|| Error::invalid(format!("no segment {id} in {}", chip.id)))?;
        let [r0, c0, r1, c1] = s.bbox;
        let (h, w) = (r1 - r0, c1 - c0);
        let mut grey = Vec::with_capacity(h * w);
        let mut mask = Vec::with_capacity(h * w);
        let mut spectra = Vec::with_capacity(h * w * chip.bands);
        let mut mean = vec![0.0; chip.bands];
        for r in r0..r1 {
            for c in c0..c1 {
                let p = r * chip.size + c;
                grey.push(grey_full[p]);
                let inside = seg.labels[p] as usize == id;
                mask.push(inside);
                for b in 0..chip.bands {
                    let v = chip.plane(b)[p] as f64;
                    spectra.push(v);
                    if inside {
                        mean[b] += v;
                    }
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= s.pixel_count as f64);
        Ok(Self {
            grey: Patch::new(h, w, grey)?,
            mask,
            spectra,
            bands: chip.bands,
            mean_spectrum: mean,
        })
    }

    fn member_spectra(&self) -> impl Iterator<Item = &[f64]> {
        self.spectra.chunks(self.bands).zip(&self.mask).filter(|(_, &m)| m).map(|(s, _)| s)
    }
}

/// First principal axis of the pooled segment pixels, and their mean.
fn joint_pc1(a: &SegmentView, b: &SegmentView) -> (Vec<f64>, Vec<f64>) {
    let bands = a.bands;
    let rows: Vec<&[f64]> = a.member_spectra().chain(b.member_spectra()).collect();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; bands];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(bands, bands);
    for r in &rows {
        for i in 0..bands {
            for j in i..bands {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    for i in 0..bands {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let top = (0..bands).max_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y])).unwrap();
    (eig.eigenvectors.column(top).iter().copied().collect(), mean)
}

/// SSIM between two segments on their pooled first principal component.
/// Both bounding boxes are resampled (nearest) to the larger extent and
/// pixels are paired where both masks hold.
fn segment_ssim(a: &SegmentView, b: &SegmentView) -> Result<f64> {
    let (axis, mean) = joint_pc1(a, b);
    let project = |s: &[f64]| s.iter().zip(&axis).zip(&mean).map(|((v, w), m)| (v - m) * w).sum::<f64>();
    let (h, w) = (a.grey.height.max(b.grey.height), a.grey.width.max(b.grey.width));
    let sample = |v: &SegmentView, r: usize, c: usize| -> (bool, f64) {
        let (rr, cc) = (r * v.grey.height / h, c * v.grey.width / w);
        let p = rr * v.grey.width + cc;
        (v.mask[p], project(&v.spectra[p * v.bands..(p + 1) * v.bands]))
    };
    let (mut xs, mut ys, mut all_x, mut all_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in 0..h {
        for c in 0..w {
            let (ma, va) = sample(a, r, c);
            let (mb, vb) = sample(b, r, c);
            all_x.push(va);
            all_y.push(vb);
            if ma && mb {
                xs.push(va);
                ys.push(vb);
            }
        }
    }
    if xs.len() < 2 {
        xs = all_x;
        ys = all_y;
    }
    // Shift so the pooled members span [0, L] like image intensities.
    let (lo, hi) = a
        .member_spectra()
        .chain(b.member_spectra())
        .map(project)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    xs.iter_mut().chain(ys.iter_mut()).for_each(|v| *v -= lo);
    ssim(&xs, &ys, range)
}

/// All four measures for one segment pair.
pub fn pair_measures(a: &SegmentView, b: &SegmentView) -> Result<Measures> {
    Ok(Measures {
        glcm: glcm_dissimilarity(&a.grey, &b.grey)?,
        lbp: lbp_similarity(&a.grey, &b.grey)?,
        ssim: segment_ssim(a, b)?,
        sam: sam(&a.mean_spectrum, &b.mean_spectrum)?,
    })
}

/// `(chip index, segment id)`.
pub type SegRef = (usize, usize);

struct Prepared {
    offsets: Vec<usize>,
    views: Vec<SegmentView>,
    spatial: Vec<Vec<Vec<usize>>>,
}

impl Prepared {
    fn new(chips: &[EvalChip]) -> Result<Self> {
        let mut refs = Vec::new();
        let mut offsets = Vec::with_capacity(chips.len());
        for (ci, c) in chips.iter().enumerate() {
            if c.embeddings.len() != c.segments.len() {
                return Err(Error::invalid(format!(
                    "{} embeddings for {} segments of {}",
                    c.embeddings.len(),
                    c.segments.len(),
                    c.chip.id
                )));
            }
            offsets.push(refs.len());
            refs.extend((0..c.segments.len()).map(|s| (ci, s)));
        }
        if refs.len() < 2 {
            return Err(Error::invalid("evaluation needs at least 2 segments"));
        }
        let greys: Vec<Vec<f64>> = chips.par_iter().map(|c| grey_plane(c.chip)).collect();
        let views = refs
            .par_iter()
            .map(|&(ci, s)| SegmentView::with_grey(chips[ci].chip, &greys[ci], chips[ci].segments, s))
            .collect::<Result<Vec<_>>>()?;
        let spatial = chips
            .iter()
            .map(|c| -> Result<Vec<Vec<usize>>> {
                let mut out = vec![Vec::new(); c.segments.len()];
                if c.segments.len() >= 2 {
                    for (i, j) in knn_edges(&c.segments.centroids(), CONTEXT_NEIGHBOURS)? {
                        out[i].push(j);
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            offsets,
            views,
            spatial,
        })
    }

    fn flat(&self, r: SegRef) -> usize {
        self.offsets[r.0] + r.1
    }
}

fn squared(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// For every segment, its nearest other segment in embedding space across
/// all chips (Euclidean, ties to the earlier segment).
pub fn feature_matches(chips: &[EvalChip]) -> Vec<(SegRef, SegRef)> {
    let refs: Vec<SegRef> = chips
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.embeddings.len()).map(move |s| (ci, s)))
        .collect();
    let emb = |r: SegRef| chips[r.0].embeddings[r.1].as_slice();
    refs.par_iter()
        .enumerate()
        .filter_map(|(i, &x)| {
            let mut best: Option<(f64, usize)> = None;
            for (j, &y) in refs.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = squared(emb(x), emb(y));
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            best.map(|(_, j)| (x, refs[j]))
        })
        .collect()
}

/// Match `x`'s spatial neighbours to `y`'s by minimum total embedding
/// distance. Returns index pairs into the two neighbour lists.
pub fn context_pairs(x_neighbours: &[Vec<f32>], y_neighbours: &[Vec<f32>]) -> Result<Vec<(usize, usize)>> {
    if x_neighbours.is_empty() || y_neighbours.is_empty() {
        return Ok(Vec::new());
    }
    let cost = euclidean_cost(x_neighbours, y_neighbours);
    Ok(hungarian(x_neighbours.len(), y_neighbours.len(), &cost)?.pairs)
}

/// Protocol output before tagging: measure means plus bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub measures: Measures,
    pub segments: usize,
    pub skipped_pairs: usize,
}

fn reduce(per_segment: Vec<(Option<Measures>, usize)>) -> Result<Evaluation> {
    let skipped_pairs = per_segment.iter().map(|p| p.1).sum();
    let kept: Vec<Measures> = per_segment.into_iter().filter_map(|p| p.0).collect();
    if kept.is_empty() {
        return Err(Error::invalid("no segment pair had defined measures"));
    }
    let total = kept.iter().fold(Measures::default(), |acc, m| acc.add(*m));
    Ok(Evaluation {
        measures: total.scale(1.0 / kept.len() as f64),
        segments: kept.len(),
        skipped_pairs,
    })
}

fn measured(p: &Prepared, x: SegRef, y: SegRef) -> Option<Measures> {
    match pair_measures(&p.views[p.flat(x)], &p.views[p.flat(y)]) {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("pair {x:?}/{y:?} skipped: {e}");
            None
        }
    }
}

/// Each segment against its nearest segment in embedding space.
pub fn eval_feature_based(chips: &[EvalChip]) -> Result<Evaluation> {
    let p = Prepared::new(chips)?;
    let matches = feature_matches(chips);
    let per: Vec<(Option<Measures>, usize)> = matches
        .par_iter()
        .map(|&(x, y)| {
            let m = measured(&p, x, y);
            let skipped = usize::from(m.is_none());
            (m, skipped)
        })
        .collect();
    reduce(per)
}

/// Each segment and its embedding-space match, together with their
/// Hungarian-paired spatial neighbourhoods: up to 9 pairs averaged per
/// segment. Segments with fewer than 8 spatial neighbours use all they have.
pub fn eval_context_aware(chips: &[EvalChip]) -> Result<Evaluation> {
    let p = Prepared::new(chips)?;
    let matches = feature_matches(chips);
    let per: Vec<(Option<Measures>, usize)> = matches
        .par_iter()
        .map(|&(x, y)| -> Result<(Option<Measures>, usize)> {
            let nx = &p.spatial[x.0][x.1];
            let ny = &p.spatial[y.0][y.1];
            let ex: Vec<Vec<f32>> = nx.iter().map(|&s| chips[x.0].embeddings[s].clone()).collect();
            let ey: Vec<Vec<f32>> = ny.iter().map(|&s| chips[y.0].embeddings[s].clone()).collect();
            let mut pairs = vec![(x, y)];
            pairs.extend(context_pairs(&ex, &ey)?.into_iter().map(|(i, j)| ((x.0, nx[i]), (y.0, ny[j]))));
            let mut sum = Measures::default();
            let (mut kept, mut skipped) = (0usize, 0usize);
            for (a, b) in pairs {
                match measured(&p, a, b) {
                    Some(m) => {
                        sum = sum.add(m);
                        kept += 1;
                    }
                    None => skipped += 1,
                }
            }
            Ok(((kept > 0).then(|| sum.scale(1.0 / kept as f64)), skipped))
        })
        .collect::<Result<Vec<_>>>()?;
    reduce(per)
}

pub fn evaluate(protocol: Protocol, chips: &[EvalChip]) -> Result<Evaluation> {
    match protocol {
        Protocol::Feature => eval_feature_based(chips),
        Protocol::Context => eval_context_aware(chips),
    }
}

/// Plain-text table: one row per report, columns GLCM↓ LBP↑ SSIM↑ SAM↓.
pub fn render_table(reports: &[MetricReport]) -> String {
    let label = |r: &MetricReport| {
        let mut s = r.model.clone();
        if let Some(k) = r.params.k {
            let _ = write!(s, " K={k}");
        }
        if let Some(n) = r.params.n {
            let _ = write!(s, " N={n}");
        }
        if let Some(l) = &r.params.layer {
            let _ = write!(s, " {l}");
        }
        s
    };
    let width = reports.iter().map(|r| label(r).chars().count()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}\n", "Model", "GLCM↓", "LBP↑", "SSIM↑", "SAM↓");
    for r in reports {
        let m = r.measures;
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}",
            label(r),
            m.glcm,
            m.lbp,
            m.ssim,
            m.sam
        );
    }
    out
}
