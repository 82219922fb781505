use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment adjacency for one chip. Edge `(i, j)` means node `i` aggregates
/// from its spatial neighbour `j`; self-loops are implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentGraph {
    pub chip_id: String,
    pub k: usize,
    pub edges: Vec<(usize, usize)>,
    /// `S × dim` node features.
    pub features: Vec<Vec<f32>>,
    /// Per-node soft class targets, when known.
    pub targets: Option<Vec<Vec<f32>>>,
}

/// Directed edges from each centroid to its `k` nearest others (Euclidean,
/// ties to the lower id). Out-degree is `min(k, S − 1)`.
pub fn knn_edges(centroids: &[[f64; 2]], k: usize) -> Result<Vec<(usize, usize)>> {
    let s = centroids.len();
    if s < 2 {
        return Err(Error::invalid(format!("a segment graph needs at least 2 nodes, got {s}")));
    }
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut edges = Vec::with_capacity(s * k.min(s - 1));
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(s);
    for (i, a) in centroids.iter().enumerate() {
        order.clear();
        order.extend(
            centroids
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2), j)),
        );
        let take = k.min(s - 1);
        if take < order.len() {
            order.select_nth_unstable_by(take - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        }
        let mut nearest: Vec<(f64, usize)> = order[..take].to_vec();
        nearest.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        edges.extend(nearest.into_iter().map(|(_, j)| (i, j)));
    }
    Ok(edges)
}

pub fn build_graph(
    chip_id: impl Into<String>,
    centroids: &[[f64; 2]],
    features: Vec<Vec<f32>>,
    k: usize,
) -> Result<SegmentGraph> {
    if features.len() != centroids.len() {
        return Err(Error::invalid(format!(
            "{} feature rows for {} segments",
            features.len(),
            centroids.len()
        )));
    }
    let dim = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("node features must be finite rows of equal width"));
    }
    Ok(SegmentGraph {
        chip_id: chip_id.into(),
        k,
        edges: knn_edges(centroids, k)?,
        features,
        targets: None,
    })
}

impl SegmentGraph {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Out-neighbours of every node, excluding the self-loop.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for &(i, j) in &self.edges {
            out[i].push(j);
        }
        out
    }

    /// Reorder nodes so that new node `p` is old node `perm[p]`.
    pub fn permuted(&self, perm: &[usize]) -> SegmentGraph {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        SegmentGraph {
            chip_id: self.chip_id.clone(),
            k: self.k,
            edges: self.edges.iter().map(|&(i, j)| (inverse[i], inverse[j])).collect(),
            features: perm.iter().map(|&o| self.features[o].clone()).collect(),
            targets: self.targets.as_ref().map(|t| perm.iter().map(|&o| t[o].clone()).collect()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GraphFile {
            chip_id: self.chip_id.clone(),
            s: self.len(),
            k: self.k,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
            feature_dim: self.feature_dim(),
            features: encode_rows(&self.features),
            target_dim: self.targets.as_ref().and_then(|t| t.first()).map(Vec::len),
            targets: self.targets.as_ref().map(|t| encode_rows(t)),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        let features = decode_rows(&file.features, file.s, file.feature_dim)?;
        let targets = match (&file.targets, file.target_dim) {
            (Some(t), Some(d)) => Some(decode_rows(t, file.s, d)?),
            _ => None,
        };
        if file.edges.iter().any(|e| e[0] >= file.s || e[1] >= file.s) {
            return Err(Error::format("graph", "edge endpoint out of range"));
        }
        Ok(Self {
            chip_id: file.chip_id,
            k: file.k,
            edges: file.edges.into_iter().map(|e| (e[0], e[1])).collect(),
            features,
            targets,
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

#[derive(Serialize, Deserialize)]
struct GraphFile {
    chip_id: String,
    #[serde(rename = "S")]
    s: usize,
    #[serde(rename = "K")]
    k: usize,
    edges: Vec<[usize; 2]>,
    feature_dim: usize,
    /// Base64 of little-endian f32, row-major `S × feature_dim`.
    features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    targets: Option<String>,
}

pub(crate) fn encode_rows(rows: &[Vec<f32>]) -> String {
    let bytes: Vec<u8> = rows.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub(crate) fn decode_rows(text: &str, rows: usize, dim: usize) -> Result<Vec<Vec<f32>>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::format("graph", format!("bad base64: {e}")))?;
    if bytes.len() != rows * dim * 4 {
        return Err(Error::format(
            "graph",
            format!("expected {} feature bytes, found {}", rows * dim * 4, bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(if dim == 0 {
        vec![Vec::new(); rows]
    } else {
        values.chunks(dim).map(<[f32]>::to_vec).collect()
    })
}
