use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use terralabel::evaluation::{render_table, MetricReport, Protocol};
use terralabel::graphs::{LayerChoice, Variant};
use terralabel::pipeline::{PipelineConfig, SweepAxis, SyntheticConfig};
use terralabel_service::artifacts::{parse_model, Artifacts};
use terralabel_service::commands::{self, TileSource};
use terralabel_service::labels::{label_ids, mask_png, rasterize, to_csv, write_masks, LabelLog};
use terralabel_service::render::DEFAULT_BANDS;
use terralabel_service::server::{serve, AppState, ServeOptions};

#[derive(Parser)]
#[command(name = "terralabel", version, about = "Unsupervised chip and segment mapping for satellite imagery")]
struct Cli {
    /// Chip store directory.
    #[arg(long, global = true, env = "TERRALABEL_STORE", default_value = "store")]
    store: PathBuf,
    /// JSON pipeline config; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Tuning {
    #[arg(long, global = true)]
    clusters: Option<usize>,
    #[arg(long, global = true)]
    chip_size: Option<usize>,
    /// Small U-Net (depth 3, 8 base kernels).
    #[arg(long, global = true)]
    desk_scale: bool,
    #[arg(long, global = true)]
    unet_epochs: Option<usize>,
    #[arg(long, global = true)]
    gnn_epochs: Option<usize>,
    #[arg(long, global = true)]
    n_segments: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    umap_epochs: Option<usize>,
    #[arg(long, global = true)]
    umap_neighbors: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Cut a tile into chips and add them to the store.
    Ingest {
        /// Raw f32 raster with a JSON sidecar.
        #[arg(long, group = "source")]
        tile: Option<PathBuf>,
        /// Directory of single-band PNGs.
        #[arg(long, group = "source", requires = "id")]
        png_dir: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
        /// Generate a synthetic tile of this side length.
        #[arg(long, group = "source")]
        synthetic: Option<usize>,
        /// Expected band count.
        #[arg(long)]
        bands: Option<usize>,
    },
    /// Reassign train and test splits.
    Split,
    /// Fit fuzzy c-means on subsampled training pixels.
    Fcm {
        #[arg(long)]
        stride: Option<usize>,
    },
    TrainUnet,
    /// Write U-Net activations for every chip.
    Extract {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// SLIC superpixels for every chip.
    Segment,
    BuildGraphs,
    TrainGnn {
        #[arg(long, default_value = "gcn")]
        variant: Variant,
    },
    /// Chip-to-chip similarity by optimal segment assignment.
    Match {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 2-D UMAP of the chip similarity matrix.
    Project {
        #[arg(long)]
        sim: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 2-D UMAP of the segments of selected chips.
    ProjectSegments {
        #[arg(long, value_delimiter = ',', required = true)]
        chips: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Similarity measures of matched segments on the test split.
    Eval {
        #[arg(long, default_value = "context")]
        protocol: Protocol,
        /// Model tag such as gcn8.
        #[arg(long, default_value = "gcn8")]
        model: String,
        #[arg(long, default_value = "l2")]
        layer: LayerChoice,
    },
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "context")]
        protocol: Protocol,
        #[arg(long, default_value = "gcn8")]
        model: String,
    },
    /// Export labels as CSV or per-chip mask PNGs.
    ExportLabels {
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// 1-based bands for red, green, blue.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        bands: Option<Vec<usize>>,
    },
}

fn load_config(path: Option<&Path>, t: &Tuning) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(v) = t.clusters {
        cfg.clusters = v;
    }
    if let Some(v) = t.chip_size {
        cfg.chip_size = v;
    }
    cfg.desk_scale |= t.desk_scale;
    if let Some(v) = t.unet_epochs {
        cfg.unet.max_epochs = v;
    }
    if let Some(v) = t.gnn_epochs {
        cfg.gnn.max_epochs = v;
    }
    if let Some(v) = t.n_segments {
        cfg.n_segments = v;
    }
    if let Some(v) = t.k {
        cfg.k = v;
    }
    if let Some(v) = t.umap_epochs {
        cfg.umap.epochs = v;
    }
    if let Some(v) = t.umap_neighbors {
        cfg.umap.n_neighbors = v;
    }
    if let Some(v) = t.seed {
        cfg.seed = v;
        cfg.unet.seed = v;
        cfg.gnn.seed = v;
        cfg.umap.seed = v;
    }
    Ok(cfg)
}

fn model_at(art: &Artifacts, tag: &str) -> Result<Variant> {
    let (variant, clusters) = parse_model(tag)?;
    let fcm = art.load_fcm()?;
    if clusters != fcm.clusters {
        bail!("model {tag} asks for C={clusters} but this store was clustered with C={}", fcm.clusters);
    }
    Ok(variant)
}

fn report(art: &Artifacts, name: &str, reports: &[MetricReport]) -> Result<()> {
    std::fs::create_dir_all(art.reports())?;
    let path = art.reports().join(format!("{name}.json"));
    art.write_json(&path, &reports)?;
    print!("{}", render_table(reports));
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref(), &cli.tuning)?;
    let root = cli.store.as_path();
    match cli.command {
        Command::Ingest {
            tile,
            png_dir,
            id,
            synthetic,
            bands,
        } => {
            let source = match (tile, png_dir, synthetic) {
                (Some(p), _, _) => TileSource::Raw(p),
                (_, Some(dir), _) => TileSource::Pngs {
                    dir,
                    id: id.context("--png-dir needs --id")?,
                },
                (_, _, Some(size)) => TileSource::Synthetic(SyntheticConfig {
                    size,
                    seed: cfg.seed,
                    ..SyntheticConfig::default()
                }),
                _ => bail!("give one of --tile, --png-dir or --synthetic"),
            };
            let ids = commands::ingest(root, source, bands, cfg.chip_size)?;
            println!("{} chips", ids.len());
        }
        Command::Split => {
            let (train, test) = commands::split(&mut Artifacts::open(root)?)?;
            println!("{train} train, {test} test");
        }
        Command::Fcm { stride } => {
            let art = Artifacts::open(root)?;
            commands::fcm(&art, cfg.clusters, stride.unwrap_or(cfg.fcm_stride), cfg.seed)?;
            println!("wrote {}", art.fcm().display());
        }
        Command::TrainUnet => {
            let s = commands::train_unet(&Artifacts::open(root)?, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Extract { checkpoint } => {
            let n = commands::extract(&Artifacts::open(root)?, checkpoint.as_deref())?;
            println!("{n} chips");
        }
        Command::Segment => {
            let mean = commands::segment(&Artifacts::open(root)?, &cfg)?;
            println!("{mean} segments per chip on average");
        }
        Command::BuildGraphs => {
            let n = commands::build_graphs(&Artifacts::open(root)?, cfg.k)?;
            println!("{n} graphs");
        }
        Command::TrainGnn { variant } => {
            let s = commands::train_gnn(&Artifacts::open(root)?, variant, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Match { out } => {
            let (sim, work) = commands::match_chips(&Artifacts::open(root)?, out.as_deref())?;
            println!("{} chips, {work} segment pairs", sim.ids.len());
        }
        Command::Project { sim, out } => {
            let p = commands::project(&Artifacts::open(root)?, sim.as_deref(), out.as_deref(), cfg.umap)?;
            println!("{} points", p.len());
        }
        Command::ProjectSegments { chips, out } => {
            let p = commands::project_segments(&Artifacts::open(root)?, &chips, cfg.umap)?;
            match out {
                Some(path) => p.save(&path)?,
                None => println!("{}", p.to_json()?),
            }
        }
        Command::Eval { protocol, model, layer } => {
            let art = Artifacts::open(root)?;
            let variant = model_at(&art, &model)?;
            let r = commands::eval(&art, &cfg, protocol, variant, layer)?;
            let name = format!("eval_{}_{}", model.to_lowercase(), serde_json::to_value(protocol)?.as_str().unwrap_or("x"));
            report(&art, &name, &[r])?;
        }
        Command::Sweep {
            axis,
            values,
            protocol,
            model,
        } => {
            let art = Artifacts::open(root)?;
            let variant = model_at(&art, &model)?;
            let rs = commands::sweep(&art, &cfg, axis, &values, protocol, variant)?;
            report(&art, &format!("sweep_{:?}", axis).to_lowercase(), &rs)?;
        }
        Command::ExportLabels { format, out } => {
            let art = Artifacts::open(root)?;
            let records = LabelLog::new(art.labels()).read_all()?;
            match format.as_str() {
                "csv" => std::fs::write(&out, to_csv(&records)?)?,
                "masks" => {
                    let ids = label_ids(&records);
                    let mut chips: Vec<&str> = records
                        .iter()
                        .filter(|r| r.segment_id.is_some())
                        .map(|r| r.chip_id.as_str())
                        .collect();
                    chips.sort_unstable();
                    chips.dedup();
                    let masks = chips
                        .into_iter()
                        .map(|c| {
                            let seg = art.read_segments(c)?;
                            let png = mask_png(&rasterize(c, &seg, &records, &ids), seg.height, seg.width)?;
                            Ok((c.to_string(), png))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    write_masks(&out, &masks)?;
                    std::fs::write(out.join("labels.json"), serde_json::to_vec_pretty(&ids)?)?;
                }
                other => bail!("unknown format {other:?}; use csv or masks"),
            }
            println!("{} records", records.len());
        }
        Command::Serve { host, port, bands } => {
            let bands = match bands.as_deref() {
                Some(&[r, g, b]) => [r, g, b],
                _ => DEFAULT_BANDS,
            };
            let state = AppState::load(root, ServeOptions { bands, umap: cfg.umap })?;
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            tokio::runtime::Runtime::new()?.block_on(serve(state, addr))?;
        }
    }
    Ok(())
}
