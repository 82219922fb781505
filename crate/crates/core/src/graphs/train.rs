use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gnn::{soft_cross_entropy, stacked, GnnConfig, GnnNet, LayerChoice, Topology};
use super::graph::SegmentGraph;
use crate::error::{Error, Result};
use crate::features::{EpochStats, StopReason};
use crate::numerics::{adam_step, checkpoint, AdamState, ParamStore, Tape, DEFAULT_LR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnTrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    /// Whole graphs per optimizer step.
    pub batch_graphs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GnnTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 300,
            patience: 15,
            batch_graphs: 4,
            lr: DEFAULT_LR,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GnnTrainReport {
    pub params: ParamStore<f32>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochStats>,
    pub stop: StopReason,
}

#[derive(Clone, Debug)]
pub struct GnnModel {
    pub net: GnnNet,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    gnn: GnnConfig,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl GnnModel {
    pub fn init(config: GnnConfig, seed: u64) -> Result<Self> {
        let (net, params) = GnnNet::new(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &GnnConfig {
        &self.net.config
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        let side = Sidecar {
            gnn: self.net.config.clone(),
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        if !side.exists() {
            return Err(Error::Missing(side));
        }
        let side: Sidecar = serde_json::from_slice(&fs::read(&side)?)?;
        let mut model = Self::init(side.gnn, 0)?;
        model.params.load_named(checkpoint::load(path)?)?;
        Ok(model)
    }

    /// Node representation at `layer` as `S × d` rows. `L2` is the
    /// embedding used for matching.
    pub fn embed_layer(&self, graph: &SegmentGraph, layer: LayerChoice) -> Result<Vec<Vec<f32>>> {
        if graph.feature_dim() != self.config().in_dim {
            return Err(Error::Shape {
                op: "embed",
                lhs: vec![graph.len(), graph.feature_dim()],
                rhs: vec![self.config().in_dim],
            });
        }
        if layer == LayerChoice::Generation {
            return Ok(graph.features.clone());
        }
        let topo = Topology::from_graph(graph)?;
        let (x, _) = stacked::<f32>(&[graph], false)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(x);
        let out = self.net.forward(&mut tape, &p, x, &topo)?;
        let v = tape.value(if layer == LayerChoice::L1 { out.l1 } else { out.l2 });
        let d = v.shape()[1];
        Ok(v.data().chunks(d).map(<[f32]>::to_vec).collect())
    }

    pub fn embed(&self, graph: &SegmentGraph) -> Result<Vec<Vec<f32>>> {
        self.embed_layer(graph, LayerChoice::L2)
    }

    pub fn embed_all(&self, graphs: &[SegmentGraph], layer: LayerChoice) -> Result<Vec<Vec<Vec<f32>>>> {
        graphs.par_iter().map(|g| self.embed_layer(g, layer)).collect()
    }

    /// Attention coefficients of each GAT layer as `(edges, [E][heads])`,
    /// where edges include self-loops. Empty for GCN.
    pub fn attention(&self, graph: &SegmentGraph) -> Result<Vec<(Vec<(usize, usize)>, Vec<Vec<f32>>)>> {
        let topo = Topology::from_graph(graph)?;
        let (x, _) = stacked::<f32>(&[graph], false)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(x);
        let out = self.net.forward(&mut tape, &p, x, &topo)?;
        let edges: Vec<(usize, usize)> = topo.dst.iter().zip(topo.src.iter()).map(|(&i, &j)| (i, j)).collect();
        Ok(out
            .attention
            .iter()
            .map(|&a| {
                let v = tape.value(a);
                let h = v.shape()[1];
                (edges.clone(), v.data().chunks(h).map(<[f32]>::to_vec).collect())
            })
            .collect())
    }

    /// Mean soft cross-entropy per node over `graphs`.
    pub fn loss(&self, graphs: &[SegmentGraph]) -> Result<f64> {
        evaluate(&self.net, &self.params, graphs, 8)
    }
}

fn evaluate(net: &GnnNet, params: &ParamStore<f32>, graphs: &[SegmentGraph], batch: usize) -> Result<f64> {
    if graphs.is_empty() {
        return Ok(f64::NAN);
    }
    let refs: Vec<&SegmentGraph> = graphs.iter().collect();
    let (mut total, mut nodes) = (0.0, 0usize);
    for chunk in refs.chunks(batch.max(1)) {
        let topo = Topology::union(chunk)?;
        let (x, t) = stacked::<f32>(chunk, true)?;
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let x = tape.constant(x);
        let t = tape.constant(t.expect("targets requested"));
        let out = net.forward(&mut tape, &p, x, &topo)?;
        let loss = soft_cross_entropy(&mut tape, out.log_probs, t)?;
        total += tape.value(loss).item() as f64 * topo.nodes as f64;
        nodes += topo.nodes;
    }
    Ok(total / nodes as f64)
}

fn check_graphs(net: &GnnNet, graphs: &[SegmentGraph]) -> Result<()> {
    for g in graphs {
        if g.feature_dim() != net.config.in_dim {
            return Err(Error::invalid(format!(
                "graph {} has {}-wide features, model expects {}",
                g.chip_id,
                g.feature_dim(),
                net.config.in_dim
            )));
        }
        match &g.targets {
            Some(t) if t.len() == g.len() && t.iter().all(|r| r.len() == net.config.classes) => {}
            _ => {
                return Err(Error::invalid(format!(
                    "graph {} lacks {}-class targets for every node",
                    g.chip_id, net.config.classes
                )))
            }
        }
    }
    Ok(())
}

/// Fit the GNN to per-segment soft targets with Adam and early stopping on
/// `val` (or on `train` when `val` is empty).
pub fn train_gnn(
    model: &GnnModel,
    train: &[SegmentGraph],
    val: &[SegmentGraph],
    cfg: &GnnTrainConfig,
) -> Result<GnnTrainReport> {
    let net = &model.net;
    check_graphs(net, train)?;
    check_graphs(net, val)?;
    if train.is_empty() && cfg.max_epochs > 0 {
        return Err(Error::invalid("no training graphs"));
    }
    let monitor = if val.is_empty() { train } else { val };
    let initial = evaluate(net, &model.params, monitor, cfg.batch_graphs)?;
    let mut report = GnnTrainReport {
        params: model.params.clone(),
        initial_val_loss: initial,
        best_val_loss: initial,
        best_epoch: None,
        history: Vec::new(),
        stop: StopReason::MaxEpochs,
    };
    let mut params = model.params.clone();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0;

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut train_total, mut train_nodes) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_graphs.max(1)) {
            let batch: Vec<&SegmentGraph> = idx.iter().map(|&i| &train[i]).collect();
            let topo = Topology::union(&batch)?;
            let (x, t) = stacked::<f32>(&batch, true)?;
            let mut tape = Tape::new();
            let p = params.bind(&mut tape);
            let x = tape.constant(x);
            let t = tape.constant(t.expect("targets requested"));
            let out = net.forward(&mut tape, &p, x, &topo)?;
            let loss = soft_cross_entropy(&mut tape, out.log_probs, t)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                report.stop = StopReason::Diverged;
                break 'epochs;
            }
            let grads = tape.backward(loss)?;
            match adam_step(&mut params, &p, &grads, &mut adam, cfg.lr) {
                Ok(()) => {}
                Err(Error::Divergence(_)) => {
                    report.stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            train_total += value as f64 * topo.nodes as f64;
            train_nodes += topo.nodes;
        }
        let val_loss = evaluate(net, &params, monitor, cfg.batch_graphs)?;
        report.history.push(EpochStats {
            epoch,
            train_loss: train_total / train_nodes.max(1) as f64,
            val_loss,
        });
        if !val_loss.is_finite() {
            report.stop = StopReason::Diverged;
            break;
        }
        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = Some(epoch);
            report.params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stop = StopReason::Patience;
                break;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_graph, Variant};
    use rand::Rng;

    fn synthetic(seed: u64, s: usize, dim: usize, classes: usize) -> SegmentGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centroids: Vec<[f64; 2]> = (0..s).map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)]).collect();
        let mut feats = Vec::new();
        let mut targets = Vec::new();
        for c in &centroids {
            let class = if c[1] < 32.0 { 0 } else { 1 % classes };
            let mut f: Vec<f32> = (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect();
            f[class] += 1.0;
            feats.push(f);
            let mut t = vec![0.1 / (classes - 1) as f32; classes];
            t[class] = 0.9;
            targets.push(t);
        }
        let mut g = build_graph(format!("t_r000_c{seed:03}"), &centroids, feats, 4).unwrap();
        g.targets = Some(targets);
        g
    }

    #[test]
    fn training_beats_untrained() {
        for variant in [Variant::Gat, Variant::Gcn] {
            let model = GnnModel::init(GnnConfig::new(variant, 6, 3), 2).unwrap();
            let graphs: Vec<SegmentGraph> = (0..4).map(|i| synthetic(i, 30, 6, 3)).collect();
            let cfg = GnnTrainConfig {
                max_epochs: 30,
                lr: 1e-2,
                ..GnnTrainConfig::default()
            };
            let r = train_gnn(&model, &graphs[..3], &graphs[3..], &cfg).unwrap();
            assert!(r.best_val_loss < r.initial_val_loss, "{variant}");
        }
    }

    #[test]
    fn node_permutation_equivariance() {
        let g = synthetic(7, 20, 5, 2);
        let mut perm: Vec<usize> = (0..20).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let pg = g.permuted(&perm);
        for variant in [Variant::Gat, Variant::Gcn] {
            let model = GnnModel::init(GnnConfig::new(variant, 5, 2), 3).unwrap();
            let a = model.embed(&g).unwrap();
            let b = model.embed(&pg).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                for (x, y) in a[old].iter().zip(&b[new]) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
            let la = model.loss(std::slice::from_ref(&g)).unwrap();
            let lb = model.loss(std::slice::from_ref(&pg)).unwrap();
            assert!((la - lb).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let g = synthetic(3, 25, 4, 2);
        let model = GnnModel::init(GnnConfig::new(Variant::Gat, 4, 2), 1).unwrap();
        for (edges, alpha) in model.attention(&g).unwrap() {
            let heads = alpha[0].len();
            let mut sums = vec![vec![0.0f64; heads]; g.len()];
            for (&(i, _), a) in edges.iter().zip(&alpha) {
                for h in 0..heads {
                    sums[i][h] += a[h] as f64;
                }
            }
            assert!(sums.iter().flatten().all(|s| (s - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gnn.tlwt");
        let model = GnnModel::init(GnnConfig::new(Variant::Gcn, 4, 2), 5).unwrap();
        model.save(&path).unwrap();
        let back = GnnModel::load(&path).unwrap();
        let g = synthetic(1, 10, 4, 2);
        assert_eq!(back.embed(&g).unwrap(), model.embed(&g).unwrap());
    }
}
