//! SLIC superpixels over a per-chip principal-component colour space.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Chip;

pub const SEGM_MAGIC: &[u8; 4] = b"SEGM";
pub const SEGM_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub pixel_count: usize,
    pub centroid_rc: [f64; 2],
    /// `[row0, col0, row1, col1]`, end-exclusive.
    pub bbox: [usize; 4],
}

/// Per-pixel segment ids plus per-segment metadata. Ids are dense and
/// numbered in raster order of each segment's first pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl SegmentMap {
    /// Relabel arbitrary ids densely and compute metadata.
    pub fn from_labels(height: usize, width: usize, raw: &[u32]) -> Result<Self> {
        if raw.len() != height * width || raw.is_empty() {
            return Err(Error::invalid(format!(
                "{} labels for a {height}×{width} map",
                raw.len()
            )));
        }
        let mut remap = std::collections::HashMap::new();
        let labels: Vec<u32> = raw
            .iter()
            .map(|&l| {
                let next = remap.len() as u32;
                *remap.entry(l).or_insert(next)
            })
            .collect();
        let count = remap.len();
        let mut acc = vec![(0usize, 0f64, 0f64, [usize::MAX, usize::MAX, 0, 0]); count];
        for (i, &l) in labels.iter().enumerate() {
            let (r, c) = (i / width, i % width);
            let a = &mut acc[l as usize];
            a.0 += 1;
            a.1 += r as f64;
            a.2 += c as f64;
            a.3 = [a.3[0].min(r), a.3[1].min(c), a.3[2].max(r + 1), a.3[3].max(c + 1)];
        }
        let segments = acc
            .into_iter()
            .enumerate()
            .map(|(id, (n, sr, sc, bbox))| Segment {
                id: id as u32,
                pixel_count: n,
                centroid_rc: [sr / n as f64, sc / n as f64],
                bbox,
            })
            .collect();
        Ok(Self {
            height,
            width,
            labels,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Pixel indices of every segment.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    pub fn centroids(&self) -> Vec<[f64; 2]> {
        self.segments.iter().map(|s| s.centroid_rc).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::format("SEGM", "dimensions exceed u16"));
        }
        let mut out = Vec::with_capacity(14 + 4 * self.labels.len());
        out.extend_from_slice(SEGM_MAGIC);
        out.extend_from_slice(&SEGM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..4] != SEGM_MAGIC {
            return Err(Error::format("SEGM", "bad magic"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let version = u16_at(4);
        if version != SEGM_VERSION {
            return Err(Error::format("SEGM", format!("unsupported version {version}")));
        }
        let (h, w) = (u16_at(6) as usize, u16_at(8) as usize);
        let count = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let body = &bytes[14..];
        if body.len() != 4 * h * w {
            return Err(Error::format("SEGM", format!("expected {} label bytes, found {}", 4 * h * w, body.len())));
        }
        let raw: Vec<u32> = body.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        let map = Self::from_labels(h, w, &raw)?;
        if map.len() != count || map.labels != raw {
            return Err(Error::format("SEGM", "labels are not dense raster-ordered ids"));
        }
        Ok(map)
    }

    /// Writes `<path>` and a `<path>.json` sidecar with segment metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        fs::write(path.with_extension("json"), serde_json::to_vec(&self.segments)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::decode(&fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub n_segments: usize,
    pub compactness: f64,
    pub iterations: usize,
    /// Components smaller than this fraction of a grid cell are merged
    /// into their largest neighbour.
    pub min_size_fraction: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            n_segments: 500,
            compactness: 10.0,
            iterations: 10,
            min_size_fraction: 0.25,
        }
    }
}

impl SlicParams {
    pub fn with_segments(n_segments: usize) -> Self {
        Self {
            n_segments,
            ..Self::default()
        }
    }
}

/// Project `[band][pixel]` data onto its first `k` principal components,
/// each scaled to unit variance. Components with no variance are zero.
pub fn principal_components(data: &[f32], bands: usize, k: usize) -> Vec<Vec<f64>> {
    let n = data.len() / bands;
    let mean: Vec<f64> = (0..bands)
        .map(|b| data[b * n..(b + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64)
        .collect();
    let mut cov = DMatrix::<f64>::zeros(bands, bands);
    for i in 0..bands {
        for j in i..bands {
            let (a, b) = (&data[i * n..(i + 1) * n], &data[j * n..(j + 1) * n]);
            let s: f64 = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 - mean[i]) * (y as f64 - mean[j]))
                .sum();
            cov[(i, j)] = s / n as f64;
            cov[(j, i)] = s / n as f64;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..bands).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    (0..k)
        .map(|c| {
            let Some(&e) = order.get(c) else {
                return vec![0.0; n];
            };
            let lambda = eig.eigenvalues[e];
            if lambda <= 1e-12 * eig.eigenvalues[order[0]].abs().max(1e-300) {
                return vec![0.0; n];
            }
            let v = eig.eigenvectors.column(e);
            let scale = 1.0 / lambda.sqrt();
            (0..n)
                .map(|p| (0..bands).map(|b| (data[b * n + p] as f64 - mean[b]) * v[b]).sum::<f64>() * scale)
                .collect()
        })
        .collect()
}

/// SLIC on a chip, using its first three principal components as colour.
pub fn slic(chip: &Chip, params: &SlicParams) -> Result<SegmentMap> {
    let colour = principal_components(&chip.data, chip.bands, 3);
    slic_channels(&colour, chip.size, chip.size, params)
}

struct Cluster {
    y: f64,
    x: f64,
    colour: Vec<f64>,
}

/// SLIC over arbitrary per-pixel channels `[channel][pixel]`.
pub fn slic_channels(channels: &[Vec<f64>], height: usize, width: usize, params: &SlicParams) -> Result<SegmentMap> {
    let n = height * width;
    if params.n_segments < 2 || params.n_segments > n {
        return Err(Error::invalid(format!(
            "cannot cut {n} pixels into {} segments",
            params.n_segments
        )));
    }
    if channels.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("channel length does not match image size"));
    }
    let step = ((n as f64) / params.n_segments as f64).sqrt();
    let ny = ((height as f64 / step).round() as usize).clamp(1, height);
    let nx = ((width as f64 / step).round() as usize).clamp(1, width);
    let (cell_h, cell_w) = (height as f64 / ny as f64, width as f64 / nx as f64);

    // Coordinates are pixel centres (r + 0.5, c + 0.5), so the seed grid and
    // search windows are symmetric under quarter turns of a square image.
    let mut clusters: Vec<Cluster> = Vec::with_capacity(ny * nx);
    for i in 0..ny {
        for j in 0..nx {
            let (y, x) = ((i as f64 + 0.5) * cell_h, (j as f64 + 0.5) * cell_w);
            let near = |centre: f64, size: usize| {
                let lo = (centre - 1.0).ceil().max(0.0) as usize;
                let hi = ((centre + 0.5).ceil() as usize).min(size);
                (lo..hi).filter(move |&p| (p as f64 + 0.5 - centre).abs() < 1.0)
            };
            let mut colour = vec![0.0; channels.len()];
            let mut count = 0.0;
            for r in near(y, height) {
                for c in near(x, width) {
                    for (acc, ch) in colour.iter_mut().zip(channels) {
                        *acc += ch[r * width + c];
                    }
                    count += 1.0;
                }
            }
            colour.iter_mut().for_each(|v| *v /= count);
            clusters.push(Cluster { y, x, colour });
        }
    }

    let spatial = (params.compactness / step).powi(2);
    let window = 2.0 * step;
    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..params.iterations.max(1) {
        dist.fill(f64::INFINITY);
        for (k, cl) in clusters.iter().enumerate() {
            let r0 = (cl.y - window - 0.5).ceil().max(0.0) as usize;
            let r1 = ((cl.y + window - 0.5).floor() as isize + 1).clamp(0, height as isize) as usize;
            let c0 = (cl.x - window - 0.5).ceil().max(0.0) as usize;
            let c1 = ((cl.x + window - 0.5).floor() as isize + 1).clamp(0, width as isize) as usize;
            for r in r0..r1 {
                let dy = r as f64 + 0.5 - cl.y;
                for c in c0..c1 {
                    let dx = c as f64 + 0.5 - cl.x;
                    let p = r * width + c;
                    let mut d = spatial * (dy * dy + dx * dx);
                    for (ch, &mu) in channels.iter().zip(&cl.colour) {
                        let e = ch[p] - mu;
                        d += e * e;
                    }
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k as u32;
                    }
                }
            }
        }
        // Integer coordinate sums keep centres exact.
        let mut sums = vec![(0u64, 0u64, 0u64); clusters.len()];
        let mut colour_sums = vec![vec![0.0; channels.len()]; clusters.len()];
        for (p, &l) in labels.iter().enumerate() {
            if l == u32::MAX {
                continue;
            }
            let s = &mut sums[l as usize];
            s.0 += 1;
            s.1 += 2 * (p / width) as u64 + 1;
            s.2 += 2 * (p % width) as u64 + 1;
            for (acc, ch) in colour_sums[l as usize].iter_mut().zip(channels) {
                *acc += ch[p];
            }
        }
        for ((cl, s), cs) in clusters.iter_mut().zip(&sums).zip(&colour_sums) {
            if s.0 == 0 {
                continue;
            }
            let cnt = s.0 as f64;
            cl.y = s.1 as f64 / (2.0 * cnt);
            cl.x = s.2 as f64 / (2.0 * cnt);
            for (mu, &sum) in cl.colour.iter_mut().zip(cs) {
                *mu = sum / cnt;
            }
        }
    }
    // Pixels outside every window (only possible in degenerate geometry)
    // go to the nearest centre.
    for p in 0..n {
        if labels[p] == u32::MAX {
            let (r, c) = ((p / width) as f64 + 0.5, (p % width) as f64 + 0.5);
            labels[p] = (0..clusters.len())
                .min_by(|&a, &b| {
                    let da = (clusters[a].y - r).powi(2) + (clusters[a].x - c).powi(2);
                    let db = (clusters[b].y - r).powi(2) + (clusters[b].x - c).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap() as u32;
        }
    }
    let min_size = ((params.min_size_fraction * cell_h * cell_w) as usize).max(1);
    let merged = enforce_connectivity(&labels, height, width, min_size);
    SegmentMap::from_labels(height, width, &merged)
}

fn components(labels: &[u32], height: usize, width: usize) -> (Vec<u32>, Vec<usize>) {
    let mut comp = vec![u32::MAX; labels.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        comp[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if comp[q] == u32::MAX && labels[q] == labels[p] {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Split labels into 4-connected components and fold components smaller
/// than `min_size` into their largest adjacent component.
fn enforce_connectivity(labels: &[u32], height: usize, width: usize, min_size: usize) -> Vec<u32> {
    let (comp, sizes) = components(labels, height, width);
    let m = sizes.len();
    let mut adjacency = vec![Vec::new(); m];
    for p in 0..labels.len() {
        let (r, c) = (p / width, p % width);
        let a = comp[p] as usize;
        for q in [(r + 1 < height).then(|| p + width), (c + 1 < width).then(|| p + 1)]
            .into_iter()
            .flatten()
        {
            let b = comp[q] as usize;
            if a != b {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
        adj.dedup();
    }
    let mut parent: Vec<usize> = (0..m).collect();
    let mut size = sizes.clone();
    let mut small: Vec<usize> = (0..m).filter(|&i| sizes[i] < min_size).collect();
    small.sort_by_key(|&i| (sizes[i], i));
    for i in small {
        let root = find(&mut parent, i);
        if size[root] >= min_size {
            continue;
        }
        let mut best: Option<usize> = None;
        for &j in &adjacency[i] {
            let rj = find(&mut parent, j);
            if rj == root {
                continue;
            }
            best = match best {
                Some(b) if (size[b], std::cmp::Reverse(b)) >= (size[rj], std::cmp::Reverse(rj)) => Some(b),
                _ => Some(rj),
            };
        }
        if let Some(b) = best {
            parent[root] = b;
            size[b] += size[root];
        }
    }
    comp.iter().map(|&c| find(&mut parent, c as usize) as u32).collect()
}

/// Mean of each `[channel][pixel]` map over every segment, as `S × channels`
/// rows.
pub fn segment_means(seg: &SegmentMap, maps: &[f32], channels: usize) -> Result<Vec<Vec<f32>>> {
    let n = seg.height * seg.width;
    if maps.len() != channels * n {
        return Err(Error::Shape {
            op: "segment_means",
            lhs: vec![seg.height, seg.width],
            rhs: vec![channels, maps.len()],
        });
    }
    let mut sums = vec![vec![0.0f64; channels]; seg.len()];
    for ch in 0..channels {
        let plane = &maps[ch * n..(ch + 1) * n];
        for (&l, &v) in seg.labels.iter().zip(plane) {
            sums[l as usize][ch] += v as f64;
        }
    }
    Ok(sums
        .into_iter()
        .zip(&seg.segments)
        .map(|(row, s)| {
            assert!(s.pixel_count > 0, "segment {} is empty", s.id);
            row.into_iter().map(|v| (v / s.pixel_count as f64) as f32).collect()
        })
        .collect())
}
