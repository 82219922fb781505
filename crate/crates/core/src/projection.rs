//! UMAP projection to two dimensions, from vectors or a distance matrix.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::SimilarityMatrix;

const BISECTION_STEPS: usize = 64;
const BISECTION_TOLERANCE: f64 = 1e-5;
const MIN_SIGMA_SCALE: f64 = 1e-3;
const NEGATIVE_SAMPLES: f64 = 5.0;
const INIT_SIGMA: f64 = 1e-2;
const GRAD_CLIP: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for UmapParams {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Chip,
    Segment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection2D {
    pub level: Level,
    pub params: UmapParams,
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct Point {
    id: String,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct ProjectionFile {
    level: Level,
    params: UmapParams,
    points: Vec<Point>,
}

impl Projection2D {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ProjectionFile {
            level: self.level,
            params: self.params,
            points: self
                .ids
                .iter()
                .zip(&self.coords)
                .map(|(id, c)| Point {
                    id: id.clone(),
                    x: c[0],
                    y: c[1],
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProjectionFile = serde_json::from_str(text)?;
        let mut seen = std::collections::HashSet::new();
        for p in &file.points {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::format("projection", format!("duplicate point id {}", p.id)));
            }
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::format("projection", format!("non-finite coordinate for {}", p.id)));
            }
        }
        Ok(Self {
            level: file.level,
            params: file.params,
            ids: file.points.iter().map(|p| p.id.clone()).collect(),
            coords: file.points.iter().map(|p| [p.x, p.y]).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// `k` nearest other points per point, ascending by distance.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbours {
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

impl Neighbours {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn nearest(n: usize, i: usize, k: usize, dist: impl Fn(usize) -> f64) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(j), j)).collect();
    let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order.into_iter().map(|(d, j)| (j, d)).unzip()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("need 0 < k < n, got k={k} for {n} points")));
    }
    Ok(())
}

/// Neighbours from a row-major `n × n` distance matrix; ties go to the lower index.
pub fn knn_from_distances(n: usize, dist: &[f64], k: usize) -> Result<Neighbours> {
    check_k(n, k)?;
    if dist.len() != n * n {
        return Err(Error::invalid(format!("{} distances for {n} points", dist.len())));
    }
    if dist.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::invalid("distances must be finite and non-negative"));
    }
    let (indices, distances) = (0..n)
        .into_par_iter()
        .map(|i| nearest(n, i, k, |j| dist[i * n + j]))
        .unzip();
    Ok(Neighbours { indices, distances })
}

/// Euclidean neighbours of row vectors.
pub fn knn_from_vectors(vectors: &[Vec<f32>], k: usize) -> Result<Neighbours> {
    let n = vectors.len();
    check_k(n, k)?;
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
        return Err(Error::invalid("vectors must be finite rows of equal width"));
    }
    let (indices, distances) = (0..n)
        .into_par_iter()
        .map(|i| {
            nearest(n, i, k, |j| {
                vectors[i]
                    .iter()
                    .zip(&vectors[j])
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .unzip();
    Ok(Neighbours { indices, distances })
}

/// Solve `Σ_j exp(−max(0, d_j − ρ)/σ) = log₂ k` for σ by bisection.
/// Returns `(ρ, σ, converged)`.
pub fn smooth_knn(distances: &[f64], mean_distance: f64) -> (f64, f64, bool) {
    let rho = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let target = (distances.len() as f64).log2();
    let total = |sigma: f64| -> f64 { distances.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).sum() };
    let (mut lo, mut hi, mut mid) = (0.0, f64::INFINITY, 1.0);
    let mut converged = false;
    for _ in 0..BISECTION_STEPS {
        let psum = total(mid);
        if (psum - target).abs() < BISECTION_TOLERANCE {
            converged = true;
            break;
        }
        if psum > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
        }
    }
    // Floor keeps σ away from 0 when every neighbour sits at ρ.
    let floor = MIN_SIGMA_SCALE * mean_distance;
    if mid < floor {
        mid = floor;
    }
    (rho, mid, converged)
}

/// Symmetric fuzzy neighbourhood graph. Every undirected edge is stored in
/// both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct FuzzyGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Probabilistic union `a + b − ab`; a weight of 1 stays exactly 1.
pub fn fuzzy_union(a: f64, b: f64) -> f64 {
    // Ordered so the result is symmetric in its arguments bit for bit.
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + lo * (1.0 - hi)
}

pub fn fuzzy_graph(nb: &Neighbours) -> FuzzyGraph {
    let n = nb.len();
    let all: Vec<f64> = nb.distances.iter().flatten().copied().collect();
    let mean = if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 };
    let mut rho = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut unconverged = 0;
    let mut directed = std::collections::BTreeMap::<(usize, usize), f64>::new();
    for i in 0..n {
        let (r, s, ok) = smooth_knn(&nb.distances[i], mean);
        if !ok {
            unconverged += 1;
        }
        rho.push(r);
        sigma.push(s);
        for (&j, &d) in nb.indices[i].iter().zip(&nb.distances[i]) {
            let w = if s > 0.0 { (-(d - r).max(0.0) / s).exp() } else { 1.0 };
            directed.insert((i, j), w);
        }
    }
    if unconverged > 0 {
        log::warn!("sigma bisection did not converge for {unconverged} of {n} points; sigma clamped");
    }
    let mut edges = Vec::with_capacity(directed.len() * 2);
    for (&(i, j), &w) in &directed {
        let back = directed.get(&(j, i)).copied().unwrap_or(0.0);
        let u = fuzzy_union(w, back);
        edges.push((i, j, u));
        if !directed.contains_key(&(j, i)) {
            edges.push((j, i, u));
        }
    }
    edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    FuzzyGraph { n, edges, rho, sigma }
}

/// Least-squares fit of `1 / (1 + a·x^{2b})` to the target membership
/// curve for `min_dist` (spread 1).
pub fn fit_ab(min_dist: f64) -> (f64, f64) {
    let spread = 1.0;
    let xs: Vec<f64> = (1..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let residuals = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| (1.0 / (1.0 + a * x.powf(2.0 * b)) - y).powi(2))
            .sum()
    };
    // Levenberg-Marquardt on (a, b).
    let (mut a, mut b, mut lambda) = (1.0f64, 1.0f64, 1e-3f64);
    let mut cost = residuals(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            let p = x.powf(2.0 * b);
            let denom = 1.0 + a * p;
            let f = 1.0 / denom;
            let r = f - y;
            let da = -p / (denom * denom);
            let db = -a * p * 2.0 * x.ln() / (denom * denom);
            let g = [da, db];
            for u in 0..2 {
                jtr[u] += g[u] * r;
                for v in 0..2 {
                    jtj[u][v] += g[u] * g[v];
                }
            }
        }
        let m = [[jtj[0][0] * (1.0 + lambda), jtj[0][1]], [jtj[1][0], jtj[1][1] * (1.0 + lambda)]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let step_a = (m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
        let step_b = (m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
        let (na, nb) = (a - step_a, b - step_b);
        let next = if na > 0.0 && nb > 0.0 { residuals(na, nb) } else { f64::INFINITY };
        if next < cost {
            let done = (cost - next) < 1e-15 * cost.max(1e-300);
            a = na;
            b = nb;
            cost = next;
            lambda *= 0.3;
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

fn clip(v: f64) -> f64 {
    v.clamp(-GRAD_CLIP, GRAD_CLIP)
}

/// Stochastic layout of a fuzzy graph. Single-threaded so a seed fixes the
/// output bit for bit.
pub fn optimize_layout(graph: &FuzzyGraph, epochs: usize, min_dist: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_SIGMA).unwrap();
    let init: Vec<[f64; 2]> = (0..graph.n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    layout_from(graph, init, epochs, min_dist, &mut rng)
}

/// SGD from a given starting layout.
pub fn layout_from(
    graph: &FuzzyGraph,
    mut emb: Vec<[f64; 2]>,
    epochs: usize,
    min_dist: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 2]> {
    let n = graph.n;
    if graph.edges.is_empty() || epochs == 0 || n < 2 {
        return emb;
    }
    let (a, b) = fit_ab(min_dist);
    let max_w = graph.edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let edges: Vec<(usize, usize, f64)> = graph
        .edges
        .iter()
        .copied()
        .filter(|e| e.2 >= max_w / epochs as f64)
        .collect();
    let per_sample: Vec<f64> = edges.iter().map(|e| max_w / e.2).collect();
    let per_negative: Vec<f64> = per_sample.iter().map(|p| p / NEGATIVE_SAMPLES).collect();
    let mut next_sample = per_sample.clone();
    let mut next_negative = per_negative.clone();
    for epoch in 0..epochs {
        let alpha = 1.0 - epoch as f64 / epochs as f64;
        let now = epoch as f64;
        for (e, &(i, j, _)) in edges.iter().enumerate() {
            if next_sample[e] > now {
                continue;
            }
            let (dx, dy) = (emb[i][0] - emb[j][0], emb[i][1] - emb[j][1]);
            let d2 = dx * dx + dy * dy;
            if d2 > 0.0 {
                let coeff = -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0);
                let (gx, gy) = (clip(coeff * dx), clip(coeff * dy));
                emb[i][0] += gx * alpha;
                emb[i][1] += gy * alpha;
                emb[j][0] -= gx * alpha;
                emb[j][1] -= gy * alpha;
            }
            next_sample[e] += per_sample[e];
            let negatives = ((now - next_negative[e]) / per_negative[e]).floor().max(0.0) as usize;
            for _ in 0..negatives {
                let k = rng.random_range(0..n);
                if k == i {
                    continue;
                }
                let (dx, dy) = (emb[i][0] - emb[k][0], emb[i][1] - emb[k][1]);
                let d2 = dx * dx + dy * dy;
                let (gx, gy) = if d2 > 0.0 {
                    let coeff = 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0));
                    (clip(coeff * dx), clip(coeff * dy))
                } else {
                    (GRAD_CLIP, GRAD_CLIP)
                };
                emb[i][0] += gx * alpha;
                emb[i][1] += gy * alpha;
            }
            next_negative[e] += negatives as f64 * per_negative[e];
        }
    }
    emb
}

fn effective_k(n: usize, k: usize) -> Result<usize> {
    if n < 2 {
        return Err(Error::invalid(format!("projection needs at least 2 points, got {n}")));
    }
    if k >= n {
        log::warn!("n_neighbors {k} reduced to {} for {n} points", n - 1);
    }
    Ok(k.min(n - 1))
}

fn finish(level: Level, params: UmapParams, ids: Vec<String>, nb: &Neighbours) -> Result<Projection2D> {
    let graph = fuzzy_graph(nb);
    let coords = optimize_layout(&graph, params.epochs, params.min_dist, params.seed);
    if coords.iter().any(|c| !(c[0].is_finite() && c[1].is_finite())) {
        return Err(Error::Divergence("layout produced non-finite coordinates".into()));
    }
    Ok(Projection2D {
        level,
        params,
        ids,
        coords,
    })
}

fn check_ids(ids: &[String], n: usize) -> Result<()> {
    if ids.len() != n {
        return Err(Error::invalid(format!("{} ids for {n} points", ids.len())));
    }
    let unique: std::collections::HashSet<&String> = ids.iter().collect();
    if unique.len() != n {
        return Err(Error::invalid("projection ids must be unique"));
    }
    Ok(())
}

pub fn project_distances(
    ids: Vec<String>,
    dist: &[f64],
    level: Level,
    params: UmapParams,
) -> Result<Projection2D> {
    let n = ids.len();
    check_ids(&ids, n)?;
    let k = effective_k(n, params.n_neighbors)?;
    let nb = knn_from_distances(n, dist, k)?;
    finish(level, params, ids, &nb)
}

pub fn project_vectors(
    ids: Vec<String>,
    vectors: &[Vec<f32>],
    level: Level,
    params: UmapParams,
) -> Result<Projection2D> {
    check_ids(&ids, vectors.len())?;
    let k = effective_k(vectors.len(), params.n_neighbors)?;
    let nb = knn_from_vectors(vectors, k)?;
    finish(level, params, ids, &nb)
}

/// Chip-level projection; distance is `1 − s` clamped to `[0, 2]`.
pub fn project_similarity(sim: &SimilarityMatrix, params: UmapParams) -> Result<Projection2D> {
    let dist: Vec<f64> = sim.values.iter().map(|s| (1.0 - s).clamp(0.0, 2.0)).collect();
    project_distances(sim.ids.clone(), &dist, Level::Chip, params)
}

fn planar(coords: &[[f64; 2]], i: usize, j: usize) -> f64 {
    (coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)
}

/// Mean fraction of each point's `k` nearest 2D neighbours sharing its label.
pub fn neighbour_purity<L: PartialEq>(coords: &[[f64; 2]], labels: &[L], k: usize) -> f64 {
    let n = coords.len();
    let k = k.min(n.saturating_sub(1));
    if k == 0 {
        return 1.0;
    }
    let total: f64 = (0..n)
        .map(|i| {
            let (nb, _) = nearest(n, i, k, |j| planar(coords, i, j));
            nb.iter().filter(|&&j| labels[j] == labels[i]).count() as f64 / k as f64
        })
        .sum();
    total / n as f64
}

/// Trustworthiness of a 2D layout against the original `n × n` distances.
pub fn trustworthiness(dist: &[f64], coords: &[[f64; 2]], k: usize) -> f64 {
    let n = coords.len();
    assert!(2 * k < n, "trustworthiness needs k < n/2");
    let mut penalty = 0.0;
    for i in 0..n {
        let (orig_order, _) = nearest(n, i, n - 1, |j| dist[i * n + j]);
        let mut rank = vec![0usize; n];
        for (r, &j) in orig_order.iter().enumerate() {
            rank[j] = r + 1;
        }
        let (low, _) = nearest(n, i, k, |j| planar(coords, i, j));
        for j in low {
            if rank[j] > k {
                penalty += (rank[j] - k) as f64;
            }
        }
    }
    let (n, k) = (n as f64, k as f64);
    1.0 - 2.0 / (n * k * (2.0 * n - 3.0 * k - 1.0)) * penalty
}
