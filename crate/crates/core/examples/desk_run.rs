//! Desk-scale run on a synthetic tile; prints stage timings and the
//! chip-projection neighbour agreement with the ground-truth materials.
//!
//! cargo run --release -p terralabel-core --example desk_run -- [epochs] [chip size]

use std::time::Instant;

use terralabel::features::TrainConfig;
use terralabel::pipeline::{project_chips, synthetic_tile, FeatureStage, PipelineConfig, SyntheticConfig};
use terralabel::projection::neighbour_purity;

fn main() -> terralabel::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(15);
    let chip_size = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(128);
    let start = Instant::now();
    let synth = synthetic_tile(&SyntheticConfig::default())?;
    let cfg = PipelineConfig {
        chip_size,
        desk_scale: true,
        n_segments: 120,
        unet: TrainConfig {
            max_epochs: epochs,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let fs = FeatureStage::from_tile(&synth.tile, &cfg)?;
    println!("unet: {:?}", fs.unet_summary);
    let gs = fs.graph_stage(cfg.n_segments, cfg.k, cfg.variant)?;
    println!("gnn: {:?}", gs.gnn_summary);
    let (sim, work) = fs.similarity(&gs)?;
    let proj = project_chips(&sim, cfg.umap)?;
    let truth = synth.chip_materials(chip_size);
    let labels: Vec<usize> = proj
        .ids
        .iter()
        .map(|id| truth.iter().find(|t| &t.0 == id).unwrap().1)
        .collect();
    for (name, secs) in fs.timings.0.iter().chain(&gs.timings.0) {
        println!("{name:>14}: {secs:7.1}s");
    }
    println!("pairs: {work}");
    println!("agreement k=5: {:.3}", neighbour_purity(&proj.coords, &labels, 5));
    println!("total: {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
