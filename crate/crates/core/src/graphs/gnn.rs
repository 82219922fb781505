use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::SegmentGraph;
use crate::error::{Error, Result};
use crate::numerics::params::glorot_uniform;
use crate::numerics::{Bound, Csr, Element, ParamId, ParamStore, Tape, Tensor, Var};

/// LeakyReLU slope inside the attention score.
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Message-passing structure of a graph with self-loops.
#[derive(Clone, Debug)]
pub struct Topology<T: Element> {
    pub nodes: usize,
    /// Edge `e` carries a message from `src[e]` into `dst[e]`.
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    /// `D̂^{-1/2} Â D̂^{-1/2}` with `Â = A + I` and `D̂` its row sums.
    pub gcn: Arc<Csr<T>>,
}

impl<T: Element> Topology<T> {
    /// `edges` are `(i, j)` pairs meaning `i` aggregates from `j`; every node
    /// must carry its own `(i, i)` loop.
    pub fn new(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut has_loop = vec![false; nodes];
        for &(i, j) in edges {
            if i >= nodes || j >= nodes {
                return Err(Error::invalid(format!("edge ({i}, {j}) outside {nodes} nodes")));
            }
            if i == j {
                has_loop[i] = true;
            }
        }
        if let Some(i) = has_loop.iter().position(|&l| !l) {
            return Err(Error::invalid(format!("node {i} has no self-loop")));
        }
        let mut degree = vec![0usize; nodes];
        for &(i, _) in edges {
            degree[i] += 1;
        }
        let triplets = edges
            .iter()
            .map(|&(i, j)| {
                let v = 1.0 / ((degree[i] * degree[j]) as f64).sqrt();
                (i, j, T::from_f64_lossy(v))
            })
            .collect();
        Ok(Self {
            nodes,
            src: Arc::new(edges.iter().map(|e| e.1).collect()),
            dst: Arc::new(edges.iter().map(|e| e.0).collect()),
            gcn: Arc::new(Csr::from_triplets(nodes, nodes, triplets)),
        })
    }

    /// Graph edges plus one self-loop per node, deduplicated.
    pub fn from_graph(graph: &SegmentGraph) -> Result<Self> {
        let mut edges: Vec<(usize, usize)> = graph.edges.iter().copied().filter(|e| e.0 != e.1).collect();
        edges.extend((0..graph.len()).map(|i| (i, i)));
        edges.sort_unstable();
        edges.dedup();
        Self::new(graph.len(), &edges)
    }

    /// Disjoint union, so one pass covers a batch of graphs.
    pub fn union(graphs: &[&SegmentGraph]) -> Result<Self> {
        let mut edges = Vec::new();
        let mut offset = 0;
        for g in graphs {
            edges.extend(g.edges.iter().filter(|e| e.0 != e.1).map(|&(i, j)| (i + offset, j + offset)));
            edges.extend((0..g.len()).map(|i| (i + offset, i + offset)));
            offset += g.len();
        }
        edges.sort_unstable();
        edges.dedup();
        Self::new(offset, &edges)
    }
}

/// Multi-head graph attention.
///
/// `α_ij = softmax_j aᵀ LeakyReLU([W x_i ‖ W x_j])` over `j ∈ N(i) ∪ {i}`,
/// then `x'_i = ‖_h Σ_j α_ij^h W^h x_j`. Because the LeakyReLU is applied
/// elementwise to the concatenation, the score splits into
/// `a_dstᵀ LReLU(W x_i) + a_srcᵀ LReLU(W x_j)`.
#[derive(Clone, Debug)]
pub struct GatLayer {
    pub weight: ParamId,
    pub a_dst: ParamId,
    pub a_src: ParamId,
    pub heads: usize,
    pub hidden: usize,
}

impl GatLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let width = heads * hidden;
        Self {
            weight: store.add(format!("{name}.weight"), glorot_uniform(&[fan_in, width], fan_in, width, rng), true),
            a_dst: store.add(format!("{name}.a_dst"), glorot_uniform(&[1, width], 2 * hidden, 1, rng), true),
            a_src: store.add(format!("{name}.a_src"), glorot_uniform(&[1, width], 2 * hidden, 1, rng), true),
            heads,
            hidden,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.heads * self.hidden
    }

    /// Returns the layer output `[S, heads·hidden]` (no activation) and the
    /// attention coefficients `[E, heads]` aligned with the topology edges.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, topo: &Topology<T>) -> Result<(Var, Var)> {
        let (h, f) = (self.heads, self.hidden);
        let z = tape.matmul(x, p[self.weight])?;
        let s = topo.nodes;
        let e = topo.src.len();
        let lz = tape.leaky_relu(z, T::from_f64_lossy(ATTENTION_SLOPE));
        let score = |tape: &mut Tape<T>, a: ParamId| -> Result<Var> {
            let weighted = tape.mul(lz, p[a])?;
            let per_head = tape.reshape(weighted, &[s, h, f])?;
            let summed = tape.sum_axes(per_head, &[2])?;
            tape.reshape(summed, &[s, h])
        };
        let s_dst = score(tape, self.a_dst)?;
        let s_src = score(tape, self.a_src)?;
        let e_dst = tape.gather_rows(s_dst, topo.dst.clone())?;
        let e_src = tape.gather_rows(s_src, topo.src.clone())?;
        let logits = tape.add(e_dst, e_src)?;
        let alpha = tape.segment_softmax(logits, topo.dst.clone(), s)?;
        let zj = tape.gather_rows(z, topo.src.clone())?;
        let zj = tape.reshape(zj, &[e, h, f])?;
        let a3 = tape.reshape(alpha, &[e, h, 1])?;
        let msg = tape.mul(zj, a3)?;
        let msg = tape.reshape(msg, &[e, h * f])?;
        let out = tape.scatter_add_rows(msg, topo.dst.clone(), s)?;
        Ok((out, alpha))
    }
}

/// `X' = D̂^{-1/2} Â D̂^{-1/2} X W` (activation applied by the caller).
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub out: usize,
}

impl GcnLayer {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, fan_in: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), glorot_uniform(&[fan_in, out], fan_in, out, rng), true),
            out,
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, topo: &Topology<T>) -> Result<Var> {
        let xw = tape.matmul(x, p[self.weight])?;
        tape.spmm(topo.gcn.clone(), xw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gat,
    Gcn,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gat" => Ok(Self::Gat),
            "gcn" => Ok(Self::Gcn),
            other => Err(Error::invalid(format!("unknown GNN variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gat => "GAT",
            Self::Gcn => "GCN",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub variant: Variant,
    pub in_dim: usize,
    pub classes: usize,
    pub heads: usize,
    pub hidden: usize,
    pub gcn_hidden: usize,
}

impl GnnConfig {
    /// 8 heads × 8 hidden for GAT, 60 hidden for GCN.
    pub fn new(variant: Variant, in_dim: usize, classes: usize) -> Self {
        Self {
            variant,
            in_dim,
            classes,
            heads: 8,
            hidden: 8,
            gcn_hidden: 60,
        }
    }

    /// Width of the layer-2 embedding.
    pub fn embedding_dim(&self) -> usize {
        match self.variant {
            Variant::Gat => self.heads * self.hidden,
            Variant::Gcn => self.gcn_hidden,
        }
    }
}

/// Which representation of a node to read out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerChoice {
    /// The node features the graph was built with.
    Generation,
    L1,
    L2,
}

impl std::str::FromStr for LayerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "generation" | "gen" => Ok(Self::Generation),
            "l1" | "1" => Ok(Self::L1),
            "l2" | "2" => Ok(Self::L2),
            other => Err(Error::invalid(format!("unknown layer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Gat(GatLayer),
    Gcn(GcnLayer),
}

impl Layer {
    fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, topo: &Topology<T>) -> Result<(Var, Option<Var>)> {
        match self {
            Layer::Gat(l) => l.forward(tape, p, x, topo).map(|(o, a)| (o, Some(a))),
            Layer::Gcn(l) => l.forward(tape, p, x, topo).map(|o| (o, None)),
        }
    }
}

/// Three message-passing layers. Layers 1 and 2 are followed by ELU; the
/// layer-2 pre-activation output is the node embedding; layer 3 maps to
/// class logits.
#[derive(Clone, Debug)]
pub struct GnnNet {
    pub config: GnnConfig,
    layers: [Layer; 3],
}

#[derive(Clone, Debug)]
pub struct GnnOutput {
    pub l1: Var,
    pub l2: Var,
    /// `[S, classes]` log-probabilities.
    pub log_probs: Var,
    /// Attention per GAT layer, `[E, heads]`.
    pub attention: Vec<Var>,
}

impl GnnNet {
    pub fn new<T: Element>(config: GnnConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore<T>)> {
        if config.in_dim == 0 || config.classes == 0 || config.heads == 0 || config.hidden == 0 {
            return Err(Error::invalid(format!("invalid GNN config {config:?}")));
        }
        let mut store = ParamStore::new();
        let layers = match config.variant {
            Variant::Gat => {
                let width = config.heads * config.hidden;
                [
                    Layer::Gat(GatLayer::new(&mut store, "gat1", config.in_dim, config.heads, config.hidden, rng)),
                    Layer::Gat(GatLayer::new(&mut store, "gat2", width, config.heads, config.hidden, rng)),
                    Layer::Gat(GatLayer::new(&mut store, "gat3", width, 1, config.classes, rng)),
                ]
            }
            Variant::Gcn => [
                Layer::Gcn(GcnLayer::new(&mut store, "gcn1", config.in_dim, config.gcn_hidden, rng)),
                Layer::Gcn(GcnLayer::new(&mut store, "gcn2", config.gcn_hidden, config.gcn_hidden, rng)),
                Layer::Gcn(GcnLayer::new(&mut store, "gcn3", config.gcn_hidden, config.classes, rng)),
            ],
        };
        Ok((Self { config, layers }, store))
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, topo: &Topology<T>) -> Result<GnnOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.config.in_dim || s[0] != topo.nodes {
            return Err(Error::Shape {
                op: "gnn",
                lhs: s,
                rhs: vec![topo.nodes, self.config.in_dim],
            });
        }
        let one = T::one();
        let mut attention = Vec::new();
        let (l1, a1) = self.layers[0].forward(tape, p, x, topo)?;
        let h1 = tape.elu(l1, one);
        let (l2, a2) = self.layers[1].forward(tape, p, h1, topo)?;
        let h2 = tape.elu(l2, one);
        let (l3, a3) = self.layers[2].forward(tape, p, h2, topo)?;
        attention.extend([a1, a2, a3].into_iter().flatten());
        let log_probs = tape.log_softmax(l3, 1)?;
        Ok(GnnOutput {
            l1,
            l2,
            log_probs,
            attention,
        })
    }
}

/// `−(1/S) Σ_i Σ_c t_ic log p_ic` for soft targets `[S, C]`.
pub fn soft_cross_entropy<T: Element>(tape: &mut Tape<T>, log_probs: Var, targets: Var) -> Result<Var> {
    let prod = tape.mul(targets, log_probs)?;
    let rows = tape.shape(log_probs)[0].max(1);
    let total = tape.sum_all(prod);
    Ok(tape.scale(total, -T::one() / T::from_usize(rows).unwrap()))
}

/// Stack graph features (and targets) row-wise in graph order.
pub(crate) fn stacked<T: Element>(graphs: &[&SegmentGraph], targets: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let dim = graphs.first().map_or(0, |g| g.feature_dim());
    let rows: usize = graphs.iter().map(|g| g.len()).sum();
    let mut x = Vec::with_capacity(rows * dim);
    for g in graphs {
        if g.feature_dim() != dim {
            return Err(Error::invalid("graphs in a batch must share feature width"));
        }
        x.extend(g.features.iter().flatten().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let x = Tensor::new([rows, dim], x)?;
    if !targets {
        return Ok((x, None));
    }
    let mut t = Vec::new();
    let mut width = None;
    for g in graphs {
        let rows = g
            .targets
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("graph {} has no targets", g.chip_id)))?;
        for r in rows {
            if *width.get_or_insert(r.len()) != r.len() {
                return Err(Error::invalid("ragged targets"));
            }
            t.extend(r.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
    }
    let t = Tensor::new([rows, width.unwrap_or(0)], t)?;
    Ok((x, Some(t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn topo(n: usize, edges: &[(usize, usize)]) -> Topology<f64> {
        let mut e = edges.to_vec();
        e.extend((0..n).map(|i| (i, i)));
        e.sort_unstable();
        e.dedup();
        Topology::new(n, &e).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let mut store = ParamStore::<f64>::new();
        let layer = GatLayer::new(&mut store, "g", 3, 2, 4, &mut rng());
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(random(&[1, 3], 1));
        let t = topo(1, &[]);
        let (out, alpha) = layer.forward(&mut tape, &p, x, &t).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0, 1.0]);
        let wx = tape.matmul(x, p[layer.weight]).unwrap();
        assert_eq!(tape.value(out), tape.value(wx));
    }

    #[test]
    fn identical_neighbour_splits_attention() {
        let mut store = ParamStore::<f64>::new();
        let layer = GatLayer::new(&mut store, "g", 3, 2, 4, &mut rng());
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let row = random(&[1, 3], 2);
        let both = Tensor::new([2, 3], [row.data(), row.data()].concat()).unwrap();
        let x = tape.constant(both);
        let (_, alpha) = layer.forward(&mut tape, &p, x, &topo(2, &[(0, 1)])).unwrap();
        // Edges sorted: (0,0), (0,1), (1,1).
        let a = tape.value(alpha).data();
        for h in 0..2 {
            assert!((a[h] - 0.5).abs() < 1e-15 && (a[2 + h] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn gat_matches_dense_oracle() {
        let (n, fin, heads, hidden) = (4, 3, 2, 3);
        let edges = [(0, 1), (0, 2), (1, 3), (2, 0), (3, 2), (3, 1)];
        let mut store = ParamStore::<f64>::new();
        let layer = GatLayer::new(&mut store, "g", fin, heads, hidden, &mut rng());
        let xt = random(&[n, fin], 3);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(xt.clone());
        let t = topo(n, &edges);
        let (out, _) = layer.forward(&mut tape, &p, x, &t).unwrap();
        let got = tape.value(out).data().to_vec();

        let w = store.get(layer.weight).data();
        let (ad, asrc) = (store.get(layer.a_dst).data(), store.get(layer.a_src).data());
        let width = heads * hidden;
        let wx: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..width).map(|o| (0..fin).map(|k| xt.data()[i * fin + k] * w[k * width + o]).sum()).collect())
            .collect();
        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        let mut adj = vec![vec![false; n]; n];
        for &(i, j) in &edges {
            adj[i][j] = true;
        }
        for i in 0..n {
            adj[i][i] = true;
            for h in 0..heads {
                let cols = h * hidden..(h + 1) * hidden;
                let score = |j: usize| -> f64 {
                    // aᵀ LeakyReLU([Wx_i ‖ Wx_j]) with a = [a_dst ‖ a_src].
                    let concat: Vec<f64> = wx[i][cols.clone()].iter().chain(&wx[j][cols.clone()]).map(|&v| lrelu(v)).collect();
                    let a: Vec<f64> = ad[cols.clone()].iter().chain(&asrc[cols.clone()]).copied().collect();
                    concat.iter().zip(&a).map(|(x, y)| x * y).sum()
                };
                let nbrs: Vec<usize> = (0..n).filter(|&j| adj[i][j]).collect();
                let exps: Vec<f64> = nbrs.iter().map(|&j| score(j).exp()).collect();
                let z: f64 = exps.iter().sum();
                for col in cols.clone() {
                    let expect: f64 = nbrs.iter().zip(&exps).map(|(&j, e)| e / z * wx[j][col]).sum();
                    assert!((got[i * width + col] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gcn_matches_dense_oracle() {
        let n = 5;
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 3)];
        let mut store = ParamStore::<f64>::new();
        let layer = GcnLayer::new(&mut store, "g", 3, 4, &mut rng());
        let xt = random(&[n, 3], 4);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(xt.clone());
        let out = layer.forward(&mut tape, &p, x, &topo(n, &edges)).unwrap();
        let mut a = vec![vec![0.0; n]; n];
        for &(i, j) in &edges {
            a[i][j] = 1.0;
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let w = store.get(layer.weight).data();
        for i in 0..n {
            for o in 0..4 {
                let mut expect = 0.0;
                for j in 0..n {
                    let xw: f64 = (0..3).map(|k| xt.data()[j * 3 + k] * w[k * 4 + o]).sum();
                    expect += a[i][j] / (d[i] * d[j]).sqrt() * xw;
                }
                assert!((tape.value(out).data()[i * 4 + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_node_gcn_is_plain_projection() {
        let mut store = ParamStore::<f64>::new();
        let layer = GcnLayer::new(&mut store, "g", 3, 2, &mut rng());
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(random(&[1, 3], 5));
        let out = layer.forward(&mut tape, &p, x, &topo(1, &[])).unwrap();
        let xw = tape.matmul(x, p[layer.weight]).unwrap();
        assert_eq!(tape.value(out), tape.value(xw));
    }

    #[test]
    fn missing_self_loop_is_rejected() {
        assert!(Topology::<f32>::new(2, &[(0, 0), (0, 1)]).is_err());
    }

    #[test]
    fn layer_widths() {
        let (gat, _) = GnnNet::new::<f32>(GnnConfig::new(Variant::Gat, 64, 8), &mut rng()).unwrap();
        let (gcn, _) = GnnNet::new::<f32>(GnnConfig::new(Variant::Gcn, 64, 8), &mut rng()).unwrap();
        assert_eq!(gat.config.embedding_dim(), 64);
        assert_eq!(gcn.config.embedding_dim(), 60);
    }

    #[test]
    fn cross_entropy_at_target_is_entropy() {
        let t = [0.2, 0.5, 0.3, 0.9, 0.05, 0.05];
        let mut tape = Tape::<f64>::new();
        let target = tape.constant(Tensor::new([2, 3], t.to_vec()).unwrap());
        let logp = tape.constant(Tensor::new([2, 3], t.iter().map(|v: &f64| v.ln()).collect()).unwrap());
        let ce = soft_cross_entropy(&mut tape, logp, target).unwrap();
        let entropy = -t.iter().map(|v| v * v.ln()).sum::<f64>() / 2.0;
        assert!((tape.value(ce).item() - entropy).abs() < 1e-12);
    }
}
