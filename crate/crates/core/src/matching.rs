//! Hungarian assignment, chip-to-chip similarity and the similarity matrix.
//!
//! SIMM layout: magic `SIMM`, u32 chip count `n`, then `n` ids (u16 byte
//! length + UTF-8), then the upper triangle including the diagonal,
//! row-major (`i ≤ j`), as little-endian f32.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const SIMM_MAGIC: &[u8; 4] = b"SIMM";

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost one-to-one assignment of `min(rows, cols)` pairs for a
/// row-major `rows × cols` cost matrix.
///
/// Shortest-augmenting-path form with row/column potentials, O(n²m) for
/// n ≤ m. Wide matrices are solved directly, which is equivalent to padding
/// the short side with zero-cost dummy rows; tall ones are transposed.
pub fn hungarian(rows: usize, cols: usize, cost: &[f64]) -> Result<Assignment> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("empty cost matrix"));
    }
    if cost.len() != rows * cols {
        return Err(Error::invalid(format!("{} costs for a {rows}×{cols} matrix", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    if rows > cols {
        let transposed: Vec<f64> = (0..cols * rows).map(|k| cost[(k % rows) * cols + k / rows]).collect();
        let t = hungarian(cols, rows, &transposed)?;
        let mut pairs: Vec<(usize, usize)> = t.pairs.into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return Ok(finish(pairs, cost, cols));
    }
    let (n, m) = (rows, cols);
    let at = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j]: row matched to column j (1-based, 0 = free).
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0f64; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    Ok(finish(pairs, cost, cols))
}

fn finish(pairs: Vec<(usize, usize)>, cost: &[f64], cols: usize) -> Assignment {
    // Summed in row order so equal assignments give bit-identical totals.
    let total_cost = pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum();
    Assignment { pairs, total_cost }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // sqrt(na·nb) rather than sqrt(na)·sqrt(nb): for a == b this is exactly
    // dot / na = 1.
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Row-major `|a| × |b|` matrix of `1 − cosine`.
pub fn cosine_cost(a: &[Vec<f32>], b: &[Vec<f32>]) -> Vec<f64> {
    a.iter().flat_map(|x| b.iter().map(move |y| 1.0 - cosine(x, y))).collect()
}

/// Row-major `|a| × |b|` matrix of Euclidean distances.
pub fn euclidean_cost(a: &[Vec<f32>], b: &[Vec<f32>]) -> Vec<f64> {
    a.iter()
        .flat_map(|x| {
            b.iter().map(move |y| {
                x.iter()
                    .zip(y)
                    .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect()
}

/// Mean cosine over the Hungarian matching of `a`'s rows to `b`'s rows
/// under cost `1 − cosine`. Unmatched rows of the larger side are ignored.
pub fn chip_similarity(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chip_similarity needs non-empty embeddings"));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != dim) {
        return Err(Error::invalid("embedding widths differ"));
    }
    let zero_rows = a.iter().chain(b).filter(|r| norm(r) == 0.0).count();
    if zero_rows > 0 {
        log::warn!("{zero_rows} zero-norm embedding rows scored as similarity 0");
    }
    let cost = cosine_cost(a, b);
    let assignment = hungarian(a.len(), b.len(), &cost)?;
    let sum: f64 = assignment.pairs.iter().map(|&(i, j)| 1.0 - cost[i * b.len() + j]).sum();
    // Recompute from cosines so identical rows contribute exactly 1.
    let exact: f64 = assignment.pairs.iter().map(|&(i, j)| cosine(&a[i], &b[j])).sum();
    debug_assert!((sum - exact).abs() < 1e-9);
    Ok(exact / assignment.pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub ids: Vec<String>,
    /// Row-major `n × n`.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.len()..(i + 1) * self.len()]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// `1 − similarity`, clamped at 0.
    pub fn distances(&self) -> Vec<f64> {
        self.values.iter().map(|s| (1.0 - s).max(0.0)).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let n = self.len();
        let mut out = Vec::new();
        out.extend_from_slice(SIMM_MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for id in &self.ids {
            let len = u16::try_from(id.len()).map_err(|_| Error::format("SIMM", format!("chip id too long: {id}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for i in 0..n {
            for j in i..n {
                out.extend_from_slice(&(self.get(i, j) as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::format("SIMM", reason.to_string());
        if bytes.len() < 8 || &bytes[..4] != SIMM_MAGIC {
            return Err(bad("bad magic"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut at = 8;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len_bytes = bytes.get(at..at + 2).ok_or_else(|| bad("truncated id table"))?;
            let len = u16::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            let raw = bytes.get(at + 2..at + 2 + len).ok_or_else(|| bad("truncated id table"))?;
            ids.push(String::from_utf8(raw.to_vec()).map_err(|_| bad("id is not UTF-8"))?);
            at += 2 + len;
        }
        let body = &bytes[at..];
        if body.len() != 4 * n * (n + 1) / 2 {
            return Err(bad("upper triangle has the wrong length"));
        }
        let mut values = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                let v = f32::from_le_bytes(body[4 * k..4 * k + 4].try_into().unwrap()) as f64;
                values[i * n + j] = v;
                values[j * n + i] = v;
                k += 1;
            }
        }
        Ok(Self { ids, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::decode(&fs::read(path)?)
    }
}

/// Similarity of every unordered chip pair, each computed once with the
/// lower id first, then mirrored. Returns the matrix and the number of
/// pair computations performed.
pub fn similarity_matrix(ids: &[String], embeddings: &[Vec<Vec<f32>>]) -> Result<(SimilarityMatrix, usize)> {
    let n = ids.len();
    if n < 2 || embeddings.len() != n {
        return Err(Error::invalid(format!(
            "similarity matrix needs ≥ 2 chips with embeddings, got {n} ids and {} embeddings",
            embeddings.len()
        )));
    }
    let work = AtomicUsize::new(0);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let results: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            work.fetch_add(1, Ordering::Relaxed);
            let (a, b) = if ids[i] <= ids[j] { (i, j) } else { (j, i) };
            chip_similarity(&embeddings[a], &embeddings[b])
        })
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
    }
    for (&(i, j), r) in pairs.iter().zip(results) {
        let s = r?;
        values[i * n + j] = s;
        values[j * n + i] = s;
    }
    Ok((
        SimilarityMatrix {
            ids: ids.to_vec(),
            values,
        },
        work.into_inner(),
    ))
}
