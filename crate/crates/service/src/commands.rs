//! Store-backed pipeline stages behind the CLI subcommands. Each stage
//! reads the previous stage's artifacts and writes its own.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rayon::prelude::*;

use terralabel::clustering::{subsample_raster, FcmModel, FcmParams, Spectra};
use terralabel::clustering::fcm_fit;
use terralabel::evaluation::{MetricReport, Protocol};
use terralabel::features::{train_unet as fit_unet, Sample, UNetModel};
use terralabel::graphs::{train_gnn as fit_gnn, GnnConfig, GnnModel, LayerChoice, SegmentGraph, Variant};
use terralabel::ingest::{ChipStore, Split, Tile};
use terralabel::matching::{similarity_matrix, SimilarityMatrix};
use terralabel::pipeline::{
    chip_graph, project_segments as project_segment_rows, sweep as run_sweep, synthetic_tile, unet_sample, PipelineConfig,
    SweepAxis, SyntheticConfig, TrainSummary,
};
use terralabel::projection::{project_similarity, Projection2D, UmapParams};
use terralabel::superpixels::slic;

use crate::artifacts::{Artifacts, EmbeddingInfo};

pub enum TileSource {
    /// Raw little-endian f32 raster with a JSON sidecar.
    Raw(PathBuf),
    /// Directory of single-band PNGs, one per band.
    Pngs { dir: PathBuf, id: String },
    Synthetic(SyntheticConfig),
}

pub fn ingest(root: &Path, source: TileSource, bands: Option<usize>, chip_size: usize) -> Result<Vec<String>> {
    let tile = match source {
        TileSource::Raw(path) => Tile::read_raw(&path)?,
        TileSource::Pngs { dir, id } => Tile::read_png_stack(&dir, id)?,
        TileSource::Synthetic(cfg) => synthetic_tile(&cfg)?.tile,
    };
    if let Some(b) = bands {
        if b != tile.bands {
            bail!("--bands {b} but tile {} has {} bands", tile.id, tile.bands);
        }
    }
    let mut store = ChipStore::open_or_create(root)?;
    let ids = store.add_tile(&tile, chip_size)?;
    info!("ingested {} chips from {}", ids.len(), tile.id);
    Ok(ids)
}

pub fn split(art: &mut Artifacts) -> Result<(usize, usize)> {
    art.store.resplit()?;
    Ok((art.store.ids_in(Split::Train).len(), art.store.ids_in(Split::Test).len()))
}

/// FCM on subsampled training pixels, streamed chip by chip.
pub fn fcm(art: &Artifacts, clusters: usize, stride: usize, seed: u64) -> Result<FcmModel> {
    let mut samples: Option<Spectra> = None;
    for id in art.store.ids_in(Split::Train) {
        let chip = art.store.read_chip(&id)?;
        let s = subsample_raster(&chip.data, chip.bands, stride)?;
        match samples.as_mut() {
            Some(all) => all.extend(&s),
            None => samples = Some(s),
        }
    }
    let samples = samples.context("store has no training chips")?;
    let fit = fcm_fit(
        &samples,
        &FcmParams {
            seed,
            ..FcmParams::new(clusters)
        },
    )?;
    info!("fcm: {} samples, {} iterations", samples.len(), fit.iterations);
    fit.model.save(&art.fcm())?;
    Ok(fit.model)
}

pub fn train_unet(art: &Artifacts, cfg: &PipelineConfig) -> Result<TrainSummary> {
    let fcm = art.load_fcm()?;
    if fcm.clusters != cfg.clusters {
        bail!("fcm.json has C={} but --clusters is {}; rerun fcm", fcm.clusters, cfg.clusters);
    }
    let norm = &art.store.manifest().norm;
    let samples = |split: Split| -> Result<Vec<Sample>> {
        art.store
            .ids_in(split)
            .par_iter()
            .map(|id| Ok(unet_sample(&art.store.read_chip(id)?, norm, &fcm)?))
            .collect()
    };
    let (train, val) = (samples(Split::Train)?, samples(Split::Test)?);
    let init = UNetModel::init(cfg.unet_config(art.store.manifest().bands), cfg.seed)?;
    let report = fit_unet(&init.net, init.params.clone(), &train, &val, &cfg.unet)?;
    let model = UNetModel {
        net: init.net,
        params: report.params,
    };
    model.save(&art.unet())?;
    let summary = TrainSummary {
        epochs: report.history.len(),
        initial_val_loss: report.initial_val_loss,
        best_val_loss: report.best_val_loss,
        stop: report.stop,
    };
    art.write_json(&art.unet_report(), &summary)?;
    Ok(summary)
}

pub fn extract(art: &Artifacts, ckpt: Option<&Path>) -> Result<usize> {
    art.ensure_dirs()?;
    let unet = UNetModel::load(ckpt.unwrap_or(&art.unet()))?;
    let maps = unet.config().final_feature_maps;
    let ids = art.store.chip_ids();
    ids.par_iter().try_for_each(|id| -> Result<()> {
        let chip = art.store.read_normalized(id)?;
        art.write_activation(id, maps, chip.size, &unet.activations(&chip)?)
    })?;
    Ok(ids.len())
}

pub fn segment(art: &Artifacts, cfg: &PipelineConfig) -> Result<usize> {
    art.ensure_dirs()?;
    let params = cfg.slic_params(cfg.n_segments);
    let ids = art.store.chip_ids();
    let counts = ids
        .par_iter()
        .map(|id| -> Result<usize> {
            let seg = slic(&art.store.read_normalized(id)?, &params)?;
            seg.save(&art.segments(id))?;
            Ok(seg.len())
        })
        .collect::<Result<Vec<_>>>()?;
    art.write_json(&art.segment_params(), &params)?;
    Ok(counts.iter().sum::<usize>() / counts.len().max(1))
}

pub fn build_graphs(art: &Artifacts, k: usize) -> Result<usize> {
    art.ensure_dirs()?;
    let fcm = art.load_fcm()?;
    let ids = art.store.chip_ids();
    ids.par_iter().try_for_each(|id| -> Result<()> {
        let raw = art.store.read_chip(id)?;
        let seg = art.read_segments(id)?;
        let (maps, act) = art.read_activation(id)?;
        chip_graph(&raw, &seg, &act, maps, &fcm, k)?.save(&art.graph(id))?;
        Ok(())
    })?;
    Ok(ids.len())
}

pub fn train_gnn(art: &Artifacts, variant: Variant, cfg: &PipelineConfig) -> Result<TrainSummary> {
    art.ensure_dirs()?;
    let fcm = art.load_fcm()?;
    let ids = art.store.chip_ids();
    let graphs: Vec<SegmentGraph> = ids.par_iter().map(|id| art.read_graph(id)).collect::<Result<_>>()?;
    let (train, val): (Vec<_>, Vec<_>) = ids
        .iter()
        .zip(&graphs)
        .partition(|(id, _)| art.store.split_of(id) == Some(Split::Train));
    let train: Vec<SegmentGraph> = train.into_iter().map(|p| p.1.clone()).collect();
    let val: Vec<SegmentGraph> = val.into_iter().map(|p| p.1.clone()).collect();
    let in_dim = graphs.first().context("no graphs")?.feature_dim();
    let mut model = GnnModel::init(GnnConfig::new(variant, in_dim, fcm.clusters), cfg.seed)?;
    let report = fit_gnn(&model, &train, &val, &cfg.gnn)?;
    model.params = report.params;
    model.save(&art.gnn(variant, fcm.clusters))?;
    let summary = TrainSummary {
        epochs: report.history.len(),
        initial_val_loss: report.initial_val_loss,
        best_val_loss: report.best_val_loss,
        stop: report.stop,
    };
    art.write_json(&art.gnn_report(variant, fcm.clusters), &summary)?;

    let embeddings = model.embed_all(&graphs, LayerChoice::L2)?;
    ids.par_iter()
        .zip(&embeddings)
        .try_for_each(|(id, rows)| art.write_embedding(id, rows))?;
    let info = EmbeddingInfo {
        variant,
        clusters: fcm.clusters,
        k: graphs[0].k,
        n_segments: art.read_segment_params().map_or(cfg.n_segments, |p| p.n_segments),
        dim: model.config().embedding_dim(),
    };
    art.write_json(&art.embedding_info(), &info)?;
    Ok(summary)
}

pub fn match_chips(art: &Artifacts, out: Option<&Path>) -> Result<(SimilarityMatrix, usize)> {
    let (ids, embeddings) = art.all_embeddings()?;
    let (sim, work) = similarity_matrix(&ids, &embeddings)?;
    sim.save(out.unwrap_or(&art.sim()))?;
    Ok((sim, work))
}

pub fn project(art: &Artifacts, sim: Option<&Path>, out: Option<&Path>, params: UmapParams) -> Result<Projection2D> {
    let sim = SimilarityMatrix::load(sim.unwrap_or(&art.sim()))?;
    let proj = project_similarity(&sim, params)?;
    proj.save(out.unwrap_or(&art.chips_proj()))?;
    Ok(proj)
}

pub fn project_segments(art: &Artifacts, chip_ids: &[String], params: UmapParams) -> Result<Projection2D> {
    if chip_ids.is_empty() {
        bail!("no chips selected");
    }
    let selection = chip_ids
        .iter()
        .map(|id| {
            if art.store.split_of(id).is_none() {
                bail!("unknown chip {id}");
            }
            Ok((id.clone(), art.read_embedding(id)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(project_segment_rows(&selection, params)?)
}

pub fn eval(
    art: &Artifacts,
    cfg: &PipelineConfig,
    protocol: Protocol,
    variant: Variant,
    layer: LayerChoice,
) -> Result<MetricReport> {
    let fs = art.feature_stage(cfg)?;
    let gs = art.graph_stage(&fs, variant)?;
    Ok(fs.evaluate(&gs, protocol, layer)?)
}

pub fn sweep(
    art: &Artifacts,
    cfg: &PipelineConfig,
    axis: SweepAxis,
    values: &[String],
    protocol: Protocol,
    variant: Variant,
) -> Result<Vec<MetricReport>> {
    let fs = art.feature_stage(cfg)?;
    let base = art.graph_stage(&fs, variant)?;
    Ok(run_sweep(&fs, &base, axis, values, protocol)?)
}
