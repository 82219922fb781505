//! Where each pipeline stage keeps its output inside a chip store.
//!
//! ```text
//! <root>/manifest.json, chips/          ingest, split
//! <root>/fcm.json                       fcm
//! <root>/unet.tlwt (+ unet.json)        train-unet
//! <root>/activations/<chip>.act         extract
//! <root>/segments/<chip>.segm (+ .json) segment
//! <root>/graphs/<chip>.json             build-graphs
//! <root>/gnn_<variant><C>.tlwt          train-gnn
//! <root>/embeddings/<chip>.emb          train-gnn (layer-2 rows)
//! <root>/sim.simm, chips.proj           match, project
//! <root>/labels.jsonl                   serve
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use terralabel::clustering::FcmModel;
use terralabel::features::UNetModel;
use terralabel::graphs::{GnnModel, SegmentGraph, Variant};
use terralabel::ingest::{decode_raster, encode_raster, ChipStore, Split};
use terralabel::pipeline::{FeatureStage, GraphStage, PipelineConfig, Timings, TrainSummary};
use terralabel::superpixels::{SegmentMap, SlicParams};

/// Which GNN produced the stored embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingInfo {
    pub variant: Variant,
    pub clusters: usize,
    pub k: usize,
    pub n_segments: usize,
    pub dim: usize,
}

pub struct Artifacts {
    pub store: ChipStore,
}

pub fn model_file(variant: Variant, clusters: usize) -> String {
    format!("gnn_{}{clusters}.tlwt", format!("{variant}").to_lowercase())
}

/// Parse a model tag such as `gcn8`.
pub fn parse_model(tag: &str) -> Result<(Variant, usize)> {
    let tag = tag.trim().to_ascii_lowercase();
    let split = tag.find(|c: char| c.is_ascii_digit()).context("model tag needs a cluster count, e.g. gcn8")?;
    let variant = tag[..split].trim().parse()?;
    let clusters = tag[split..].parse().context("bad cluster count in model tag")?;
    Ok((variant, clusters))
}

impl Artifacts {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self {
            store: ChipStore::open(root).with_context(|| format!("opening store {}", root.display()))?,
        })
    }

    pub fn root(&self) -> &Path {
        self.store.root()
    }

    pub fn fcm(&self) -> PathBuf {
        self.store.path("fcm.json")
    }

    pub fn unet(&self) -> PathBuf {
        self.store.path("unet.tlwt")
    }

    pub fn unet_report(&self) -> PathBuf {
        self.store.path("unet_report.json")
    }

    pub fn activation(&self, id: &str) -> PathBuf {
        self.store.path("activations").join(format!("{id}.act"))
    }

    pub fn segments(&self, id: &str) -> PathBuf {
        self.store.path("segments").join(format!("{id}.segm"))
    }

    pub fn segment_params(&self) -> PathBuf {
        self.store.path("segments").join("params.json")
    }

    pub fn read_segment_params(&self) -> Result<SlicParams> {
        let bytes = fs::read(self.segment_params())?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn graph(&self, id: &str) -> PathBuf {
        self.store.path("graphs").join(format!("{id}.json"))
    }

    pub fn gnn(&self, variant: Variant, clusters: usize) -> PathBuf {
        self.store.path(model_file(variant, clusters))
    }

    pub fn gnn_report(&self, variant: Variant, clusters: usize) -> PathBuf {
        self.gnn(variant, clusters).with_extension("report.json")
    }

    pub fn embedding(&self, id: &str) -> PathBuf {
        self.store.path("embeddings").join(format!("{id}.emb"))
    }

    pub fn embedding_info(&self) -> PathBuf {
        self.store.path("embeddings").join("model.json")
    }

    pub fn sim(&self) -> PathBuf {
        self.store.path("sim.simm")
    }

    pub fn chips_proj(&self) -> PathBuf {
        self.store.path("chips.proj")
    }

    pub fn labels(&self) -> PathBuf {
        self.store.path("labels.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.store.path("reports")
    }

    pub fn ensure_dirs(&self) -> Result<()> {
        for d in ["activations", "segments", "graphs", "embeddings", "reports"] {
            fs::create_dir_all(self.store.path(d))?;
        }
        Ok(())
    }

    pub fn load_fcm(&self) -> Result<FcmModel> {
        Ok(FcmModel::load(&self.fcm())?)
    }

    pub fn read_activation(&self, id: &str) -> Result<(usize, Vec<f32>)> {
        let path = self.activation(id);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let (maps, _, _, data) = decode_raster(&bytes)?;
        Ok((maps, data))
    }

    pub fn write_activation(&self, id: &str, maps: usize, size: usize, data: &[f32]) -> Result<()> {
        fs::write(self.activation(id), encode_raster(maps, size, size, data)?)?;
        Ok(())
    }

    pub fn read_segments(&self, id: &str) -> Result<SegmentMap> {
        Ok(SegmentMap::load(&self.segments(id))?)
    }

    pub fn read_graph(&self, id: &str) -> Result<SegmentGraph> {
        Ok(SegmentGraph::load(&self.graph(id))?)
    }

    /// `S × d` rows stored as a single-band `S × d` raster.
    pub fn read_embedding(&self, id: &str) -> Result<Vec<Vec<f32>>> {
        let path = self.embedding(id);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let (_, rows, dim, data) = decode_raster(&bytes)?;
        Ok((0..rows).map(|r| data[r * dim..(r + 1) * dim].to_vec()).collect())
    }

    pub fn write_embedding(&self, id: &str, rows: &[Vec<f32>]) -> Result<()> {
        let dim = rows.first().map_or(0, Vec::len);
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        fs::write(self.embedding(id), encode_raster(1, rows.len(), dim, &flat)?)?;
        Ok(())
    }

    pub fn read_embedding_info(&self) -> Result<EmbeddingInfo> {
        let path = self.embedding_info();
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Embeddings for every chip, in store order.
    pub fn all_embeddings(&self) -> Result<(Vec<String>, Vec<Vec<Vec<f32>>>)> {
        let ids = self.store.chip_ids();
        let rows = ids.par_iter().map(|id| self.read_embedding(id)).collect::<Result<Vec<_>>>()?;
        Ok((ids, rows))
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(value)?)?;
        Ok(())
    }

    fn read_summary(path: &Path) -> Result<TrainSummary> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Reassemble the feature stage from stored artifacts (no retraining).
    pub fn feature_stage(&self, cfg: &PipelineConfig) -> Result<FeatureStage> {
        let ids = self.store.chip_ids();
        let chips = ids.par_iter().map(|id| Ok(self.store.read_chip(id)?)).collect::<Result<Vec<_>>>()?;
        let unet = UNetModel::load(&self.unet())?;
        let activations = ids
            .par_iter()
            .map(|id| Ok(self.read_activation(id)?.1))
            .collect::<Result<Vec<_>>>()?;
        let fcm = self.load_fcm()?;
        if fcm.clusters != unet.config().out_classes {
            bail!("fcm.json has C={} but the U-Net predicts {} classes", fcm.clusters, unet.config().out_classes);
        }
        let cfg = PipelineConfig {
            clusters: fcm.clusters,
            chip_size: self.store.manifest().chip_size,
            ..cfg.clone()
        };
        Ok(FeatureStage {
            cfg,
            chips,
            norm: self.store.manifest().norm.clone(),
            fcm,
            unet,
            unet_summary: Self::read_summary(&self.unet_report())?,
            activations,
            timings: Timings::default(),
        })
    }

    /// Reassemble a trained graph stage for `variant` at the stored C.
    pub fn graph_stage(&self, fs: &FeatureStage, variant: Variant) -> Result<GraphStage> {
        let ids = fs.chip_ids();
        let gnn = GnnModel::load(&self.gnn(variant, fs.cfg.clusters))?;
        let segments = ids.par_iter().map(|id| self.read_segments(id)).collect::<Result<Vec<_>>>()?;
        let graphs = ids.par_iter().map(|id| self.read_graph(id)).collect::<Result<Vec<_>>>()?;
        let embeddings = gnn.embed_all(&graphs, terralabel::graphs::LayerChoice::L2)?;
        let k = graphs.first().map_or(fs.cfg.k, |g| g.k);
        let n_segments = self.read_embedding_info().map_or(fs.cfg.n_segments, |i| i.n_segments);
        Ok(GraphStage {
            n_segments,
            k,
            segments,
            graphs,
            gnn_summary: Self::read_summary(&self.gnn_report(variant, fs.cfg.clusters))?,
            gnn,
            embeddings,
            timings: Timings::default(),
        })
    }

    pub fn test_ids(&self) -> Vec<String> {
        self.store.ids_in(Split::Test)
    }
}
