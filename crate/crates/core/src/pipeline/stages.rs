//! The pipeline as in-memory stages: pixels → clusters → U-Net features →
//! segments → graphs → node embeddings → chip similarity → projection.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{fcm_fit, subsample_raster, FcmModel, FcmParams, Spectra};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalChip, EvalParams, MetricReport, Protocol};
use crate::features::{train_unet, Sample, StopReason, TrainConfig, UNetConfig, UNetModel};
use crate::graphs::{build_graph, train_gnn, GnnConfig, GnnModel, GnnTrainConfig, LayerChoice, SegmentGraph, Variant};
use crate::ingest::{chip_tile, normalize, Chip, NormStats, Split, Tile, CHIP_SIZE};
use crate::matching::{similarity_matrix, SimilarityMatrix};
use crate::projection::{project_similarity, project_vectors, Level, Projection2D, UmapParams};
use crate::superpixels::{segment_means, slic, SegmentMap, SlicParams};

/// Every tunable of a full run. Missing fields in a config file take these
/// defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub chip_size: usize,
    pub clusters: usize,
    pub fcm_stride: usize,
    /// Depth 3 / 8 kernels instead of depth 5 / 64.
    pub desk_scale: bool,
    pub unet: TrainConfig,
    pub n_segments: usize,
    pub compactness: f64,
    pub k: usize,
    pub variant: Variant,
    pub gnn: GnnTrainConfig,
    pub umap: UmapParams,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chip_size: CHIP_SIZE,
            clusters: 8,
            fcm_stride: 56,
            desk_scale: false,
            unet: TrainConfig::default(),
            n_segments: 500,
            compactness: 10.0,
            k: 8,
            variant: Variant::Gcn,
            gnn: GnnTrainConfig::default(),
            umap: UmapParams::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn unet_config(&self, bands: usize) -> UNetConfig {
        if self.desk_scale {
            UNetConfig::desk(bands, self.clusters)
        } else {
            UNetConfig::full(bands, self.clusters)
        }
    }

    pub fn slic_params(&self, n_segments: usize) -> SlicParams {
        SlicParams {
            compactness: self.compactness,
            ..SlicParams::with_segments(n_segments)
        }
    }
}

/// Model tag such as `GCN 8`.
pub fn model_tag(variant: Variant, clusters: usize) -> String {
    format!("{variant} {clusters}")
}

/// Wall-clock seconds per named stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings(pub Vec<(String, f64)>);

impl Timings {
    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        let secs = start.elapsed().as_secs_f64();
        log::info!("{name}: {secs:.1}s");
        self.0.push((name.to_string(), secs));
        Ok(out)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|t| t.1).sum()
    }
}

/// Fuzzy C-means on every `stride`-th pixel of the training chips.
pub fn fit_fcm(chips: &[Chip], clusters: usize, stride: usize, seed: u64) -> Result<FcmModel> {
    let mut samples: Option<Spectra> = None;
    for c in chips.iter().filter(|c| c.split == Split::Train) {
        let s = subsample_raster(&c.data, c.bands, stride)?;
        match samples.as_mut() {
            Some(all) => all.extend(&s),
            None => samples = Some(s),
        }
    }
    let samples = samples.ok_or_else(|| Error::invalid("no training chips for FCM"))?;
    let params = FcmParams {
        seed,
        ..FcmParams::new(clusters)
    };
    Ok(fcm_fit(&samples, &params)?.model)
}

/// Normalized input with its class-major membership target.
pub fn unet_sample(raw: &Chip, norm: &NormStats, fcm: &FcmModel) -> Result<Sample> {
    Sample::new(&normalize(raw, norm), fcm.predict_chip(raw)?.class_major())
}

/// Segment node features (mean activations) and targets (mean memberships).
pub fn chip_graph(
    raw: &Chip,
    seg: &SegmentMap,
    activations: &[f32],
    feature_maps: usize,
    fcm: &FcmModel,
    k: usize,
) -> Result<SegmentGraph> {
    let features = segment_means(seg, activations, feature_maps)?;
    let targets = segment_means(seg, &fcm.predict_chip(raw)?.class_major(), fcm.clusters)?;
    let mut g = build_graph(raw.id.clone(), &seg.centroids(), features, k)?;
    g.targets = Some(targets);
    Ok(g)
}

/// Training summary without the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

/// Everything up to and including U-Net feature extraction.
pub struct FeatureStage {
    pub cfg: PipelineConfig,
    /// Raw chips with their split.
    pub chips: Vec<Chip>,
    pub norm: NormStats,
    pub fcm: FcmModel,
    pub unet: UNetModel,
    pub unet_summary: TrainSummary,
    /// `[feature map][H][W]` per chip.
    pub activations: Vec<Vec<f32>>,
    pub timings: Timings,
}

impl FeatureStage {
    pub fn from_tile(tile: &Tile, cfg: &PipelineConfig) -> Result<Self> {
        Self::build(chip_tile(tile, cfg.chip_size)?, cfg)
    }

    pub fn build(chips: Vec<Chip>, cfg: &PipelineConfig) -> Result<Self> {
        let mut timings = Timings::default();
        let bands = chips.first().ok_or_else(|| Error::invalid("no chips"))?.bands;
        let norm = NormStats::from_training(chips.iter().filter(|c| c.split == Split::Train))?;
        let fcm = timings.time("fcm", || fit_fcm(&chips, cfg.clusters, cfg.fcm_stride, cfg.seed))?;
        let (unet, unet_summary) = timings.time("train_unet", || {
            let samples: Vec<(Split, Sample)> = chips
                .par_iter()
                .map(|c| Ok((c.split, unet_sample(c, &norm, &fcm)?)))
                .collect::<Result<_>>()?;
            let (train, val): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.0 == Split::Train);
            let train: Vec<Sample> = train.into_iter().map(|s| s.1).collect();
            let val: Vec<Sample> = val.into_iter().map(|s| s.1).collect();
            let init = UNetModel::init(cfg.unet_config(bands), cfg.seed)?;
            let report = train_unet(&init.net, init.params.clone(), &train, &val, &cfg.unet)?;
            let summary = TrainSummary {
                epochs: report.history.len(),
                initial_val_loss: report.initial_val_loss,
                best_val_loss: report.best_val_loss,
                stop: report.stop,
            };
            Ok((
                UNetModel {
                    net: init.net,
                    params: report.params,
                },
                summary,
            ))
        })?;
        let activations = timings.time("extract", || {
            let normalized: Vec<Chip> = chips.iter().map(|c| normalize(c, &norm)).collect();
            unet.activations_batch(&normalized)
        })?;
        Ok(Self {
            cfg: cfg.clone(),
            chips,
            norm,
            fcm,
            unet,
            unet_summary,
            activations,
            timings,
        })
    }

    pub fn feature_maps(&self) -> usize {
        self.unet.config().final_feature_maps
    }

    /// SLIC on every normalized chip.
    pub fn segment(&self, n_segments: usize) -> Result<Vec<SegmentMap>> {
        let params = self.cfg.slic_params(n_segments);
        self.chips.par_iter().map(|c| slic(&normalize(c, &self.norm), &params)).collect()
    }

    pub fn graphs(&self, segments: &[SegmentMap], k: usize) -> Result<Vec<SegmentGraph>> {
        self.chips
            .par_iter()
            .zip(segments)
            .zip(&self.activations)
            .map(|((c, s), a)| chip_graph(c, s, a, self.feature_maps(), &self.fcm, k))
            .collect()
    }

    fn split_graphs<'a>(&self, graphs: &'a [SegmentGraph]) -> (Vec<SegmentGraph>, Vec<SegmentGraph>) {
        let (train, val): (Vec<_>, Vec<_>) = self
            .chips
            .iter()
            .zip(graphs)
            .partition(|(c, _)| c.split == Split::Train);
        (
            train.into_iter().map(|p| p.1.clone()).collect(),
            val.into_iter().map(|p| p.1.clone()).collect(),
        )
    }

    /// Segment, build graphs, train a GNN and embed every chip.
    pub fn graph_stage(&self, n_segments: usize, k: usize, variant: Variant) -> Result<GraphStage> {
        let mut timings = Timings::default();
        let segments = timings.time("segment", || self.segment(n_segments))?;
        let mut stage = self.graph_stage_on(segments, n_segments, k, variant)?;
        timings.0.append(&mut stage.timings.0);
        stage.timings = timings;
        Ok(stage)
    }

    /// As [`FeatureStage::graph_stage`] with a given segmentation.
    pub fn graph_stage_on(
        &self,
        segments: Vec<SegmentMap>,
        n_segments: usize,
        k: usize,
        variant: Variant,
    ) -> Result<GraphStage> {
        let mut timings = Timings::default();
        let graphs = timings.time("build_graphs", || self.graphs(&segments, k))?;
        let (gnn, gnn_summary) = timings.time("train_gnn", || {
            let (train, val) = self.split_graphs(&graphs);
            let config = GnnConfig::new(variant, self.feature_maps(), self.cfg.clusters);
            let mut model = GnnModel::init(config, self.cfg.seed)?;
            let report = train_gnn(&model, &train, &val, &self.cfg.gnn)?;
            model.params = report.params;
            Ok((
                model,
                TrainSummary {
                    epochs: report.history.len(),
                    initial_val_loss: report.initial_val_loss,
                    best_val_loss: report.best_val_loss,
                    stop: report.stop,
                },
            ))
        })?;
        let embeddings = timings.time("embed", || gnn.embed_all(&graphs, LayerChoice::L2))?;
        Ok(GraphStage {
            n_segments,
            k,
            segments,
            graphs,
            gnn,
            gnn_summary,
            embeddings,
            timings,
        })
    }

    pub fn chip_ids(&self) -> Vec<String> {
        self.chips.iter().map(|c| c.id.clone()).collect()
    }

    /// Chip-level similarity over every chip.
    pub fn similarity(&self, stage: &GraphStage) -> Result<(SimilarityMatrix, usize)> {
        similarity_matrix(&self.chip_ids(), &stage.embeddings)
    }

    /// One evaluation over the held-out chips using node representations
    /// from `layer`.
    pub fn evaluate(&self, stage: &GraphStage, protocol: Protocol, layer: LayerChoice) -> Result<MetricReport> {
        let start = Instant::now();
        let held_out: Vec<usize> = (0..self.chips.len()).filter(|&i| self.chips[i].split == Split::Test).collect();
        let embeddings: Vec<Vec<Vec<f32>>> = if layer == LayerChoice::L2 {
            held_out.iter().map(|&i| stage.embeddings[i].clone()).collect()
        } else {
            held_out
                .par_iter()
                .map(|&i| stage.gnn.embed_layer(&stage.graphs[i], layer))
                .collect::<Result<_>>()?
        };
        let chips: Vec<EvalChip> = held_out
            .iter()
            .zip(&embeddings)
            .map(|(&i, e)| EvalChip {
                chip: &self.chips[i],
                segments: &stage.segments[i],
                embeddings: e,
            })
            .collect();
        let e = evaluate(protocol, &chips)?;
        Ok(MetricReport {
            model: model_tag(stage.gnn.config().variant, self.cfg.clusters),
            protocol,
            params: EvalParams {
                k: Some(stage.k),
                n: Some(stage.n_segments),
                layer: Some(format!("{layer:?}").to_lowercase()),
            },
            measures: e.measures,
            segments: e.segments,
            skipped_pairs: e.skipped_pairs,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Segmentation, graphs, trained GNN and layer-2 embeddings for one
/// `(N, K, variant)` setting.
pub struct GraphStage {
    pub n_segments: usize,
    pub k: usize,
    pub segments: Vec<SegmentMap>,
    pub graphs: Vec<SegmentGraph>,
    pub gnn: GnnModel,
    pub gnn_summary: TrainSummary,
    pub embeddings: Vec<Vec<Vec<f32>>>,
    pub timings: Timings,
}

/// Chip-level projection from a similarity matrix.
pub fn project_chips(sim: &SimilarityMatrix, params: UmapParams) -> Result<Projection2D> {
    project_similarity(sim, params)
}

/// Segment-level projection of the selected chips' node embeddings. Point
/// ids are `<chip id>#<segment id>`.
pub fn project_segments(
    selection: &[(String, Vec<Vec<f32>>)],
    params: UmapParams,
) -> Result<Projection2D> {
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    for (chip, rows) in selection {
        for (s, row) in rows.iter().enumerate() {
            ids.push(segment_point_id(chip, s));
            vectors.push(row.clone());
        }
    }
    project_vectors(ids, &vectors, Level::Segment, params)
}

pub fn segment_point_id(chip: &str, segment: usize) -> String {
    format!("{chip}#{segment}")
}

/// Inverse of [`segment_point_id`].
pub fn parse_segment_point(id: &str) -> Option<(&str, usize)> {
    let (chip, seg) = id.rsplit_once('#')?;
    Some((chip, seg.parse().ok()?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    K,
    N,
    Layer,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(Self::K),
            "n" => Ok(Self::N),
            "layer" => Ok(Self::Layer),
            other => Err(Error::invalid(format!("unknown sweep axis {other:?}"))),
        }
    }
}

fn parse_all<T: std::str::FromStr>(values: &[String], axis: SweepAxis) -> Result<Vec<T>> {
    values
        .iter()
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad {axis:?} value {v:?}")))
        })
        .collect()
}

/// One report per value. K and N re-run graph construction and GNN
/// training; the layer axis reads out `base` at each layer. `seconds` on
/// each report covers everything re-run for that value.
pub fn sweep(
    fs: &FeatureStage,
    base: &GraphStage,
    axis: SweepAxis,
    values: &[String],
    protocol: Protocol,
) -> Result<Vec<MetricReport>> {
    let variant = base.gnn.config().variant;
    match axis {
        SweepAxis::K => parse_all::<usize>(values, axis)?
            .into_iter()
            .map(|k| {
                let start = Instant::now();
                let stage = fs.graph_stage_on(base.segments.clone(), base.n_segments, k, variant)?;
                let mut r = fs.evaluate(&stage, protocol, LayerChoice::L2)?;
                r.seconds = start.elapsed().as_secs_f64();
                Ok(r)
            })
            .collect(),
        SweepAxis::N => parse_all::<usize>(values, axis)?
            .into_iter()
            .map(|n| {
                let start = Instant::now();
                let stage = fs.graph_stage(n, base.k, variant)?;
                let mut r = fs.evaluate(&stage, protocol, LayerChoice::L2)?;
                r.seconds = start.elapsed().as_secs_f64();
                Ok(r)
            })
            .collect(),
        SweepAxis::Layer => parse_all::<LayerChoice>(values, axis)?
            .into_iter()
            .map(|layer| fs.evaluate(base, protocol, layer))
            .collect(),
    }
}
