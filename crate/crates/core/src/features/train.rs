use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::combo_loss;
use super::unet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::ingest::{rotate_planes, Chip};
use crate::numerics::nn::{apply_stat_updates, Mode};
use crate::numerics::{adam_step, checkpoint, AdamState, ParamStore, Tape, Tensor, DEFAULT_LR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Std of additive Gaussian noise, in units of normalized band std.
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 15,
            batch_size: 2,
            lr: DEFAULT_LR,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

/// One normalized input chip with its `[C][H][W]` membership target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub size: usize,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

impl Sample {
    pub fn new(chip: &Chip, target: Vec<f32>) -> Result<Self> {
        let n = chip.size * chip.size;
        if target.is_empty() || target.len() % n != 0 {
            return Err(Error::invalid(format!(
                "target for {} has {} values, not a multiple of {n}",
                chip.id,
                target.len()
            )));
        }
        Ok(Self {
            id: chip.id.clone(),
            size: chip.size,
            input: chip.data.clone(),
            target,
        })
    }

    fn planes(&self, values: &[f32]) -> usize {
        values.len() / (self.size * self.size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ParamStore<f32>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochStats>,
    pub stop: StopReason,
}

fn batch_tensors(samples: &[&Sample], rotations: &[usize], noise: Option<(&mut ChaCha8Rng, f32)>) -> (Tensor, Tensor) {
    let s = samples[0];
    let (bands, classes) = (s.planes(&s.input), s.planes(&s.target));
    let mut inputs = Vec::with_capacity(samples.len() * s.input.len());
    let mut targets = Vec::with_capacity(samples.len() * s.target.len());
    for (sample, &k) in samples.iter().zip(rotations) {
        inputs.extend(rotate_planes(&sample.input, bands, s.size, k));
        targets.extend(rotate_planes(&sample.target, classes, s.size, k));
    }
    if let Some((rng, sigma)) = noise {
        if sigma > 0.0 {
            let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
            for v in &mut inputs {
                *v += normal.sample(rng);
            }
        }
    }
    let n = samples.len();
    (
        Tensor::new([n, bands, s.size, s.size], inputs).expect("consistent sample sizes"),
        Tensor::new([n, classes, s.size, s.size], targets).expect("consistent sample sizes"),
    )
}

fn check_samples(net: &UNet, samples: &[Sample]) -> Result<()> {
    let cfg = &net.config;
    for s in samples {
        let n = s.size * s.size;
        if s.input.len() != cfg.in_channels * n || s.target.len() != cfg.out_classes * n {
            return Err(Error::invalid(format!(
                "sample {} does not match {} bands / {} classes at {}×{}",
                s.id, cfg.in_channels, cfg.out_classes, s.size, s.size
            )));
        }
    }
    if let Some(first) = samples.first() {
        if samples.iter().any(|s| s.size != first.size) {
            return Err(Error::invalid("samples must share one chip size"));
        }
    }
    Ok(())
}

/// Mean eval-mode combo loss over `samples`.
pub fn evaluate_loss(net: &UNet, params: &ParamStore<f32>, samples: &[Sample], batch_size: usize) -> Result<f64> {
    check_samples(net, samples)?;
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut total = 0.0;
    for batch in refs.chunks(batch_size.max(1)) {
        let (x, y) = batch_tensors(batch, &vec![0; batch.len()], None);
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let x = tape.constant(x);
        let y = tape.constant(y);
        let out = net.forward(&mut tape, &p, x, Mode::Eval, &mut Vec::new())?;
        let loss = combo_loss(&mut tape, y, out.probs)?;
        total += tape.value(loss).item() as f64 * batch.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Train with rotation/noise augmentation and Adam, stopping once the
/// validation loss has not improved for `patience` epochs. With no
/// validation samples the training loss is monitored instead.
///
/// A non-finite loss or gradient ends training with
/// [`StopReason::Diverged`] and the best parameters seen so far.
pub fn train_unet(
    net: &UNet,
    init: ParamStore<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_samples(net, train)?;
    check_samples(net, val)?;
    if train.is_empty() && cfg.max_epochs > 0 {
        return Err(Error::invalid("no training samples"));
    }
    let monitor = if val.is_empty() { train } else { val };
    let initial_val_loss = evaluate_loss(net, &init, monitor, cfg.batch_size)?;
    let mut report = TrainReport {
        params: init.clone(),
        initial_val_loss,
        best_val_loss: initial_val_loss,
        best_epoch: None,
        history: Vec::new(),
        stop: StopReason::MaxEpochs,
    };
    let mut params = init;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0;

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let rotations: Vec<usize> = batch.iter().map(|_| rng.random_range(0..4)).collect();
            let (x, y) = batch_tensors(&batch, &rotations, Some((&mut rng, cfg.noise_sigma)));
            let mut tape = Tape::new();
            let p = params.bind(&mut tape);
            let x = tape.constant(x);
            let y = tape.constant(y);
            let mut updates = Vec::new();
            let step = net
                .forward(&mut tape, &p, x, Mode::Train, &mut updates)
                .and_then(|out| combo_loss(&mut tape, y, out.probs));
            let loss = match step {
                Ok(l) if tape.value(l).item().is_finite() => l,
                Ok(_) | Err(Error::Divergence(_)) => {
                    report.stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let grads = tape.backward(loss)?;
            match adam_step(&mut params, &p, &grads, &mut adam, cfg.lr) {
                Ok(()) => {}
                Err(Error::Divergence(_)) => {
                    report.stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            apply_stat_updates(&mut params, updates);
            train_total += tape.value(loss).item() as f64 * batch.len() as f64;
        }
        let val_loss = evaluate_loss(net, &params, monitor, cfg.batch_size)?;
        report.history.push(EpochStats {
            epoch,
            train_loss: train_total / train.len() as f64,
            val_loss,
        });
        log::info!("epoch {epoch}: val loss {val_loss:.5}");
        if !val_loss.is_finite() {
            report.stop = StopReason::Diverged;
            break;
        }
        if val_loss < report.best_val_loss || !report.best_val_loss.is_finite() {
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

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Sidecar {
    unet: UNetConfig,
}

/// A U-Net with its weights, persisted as a TLWT checkpoint plus a JSON
/// sidecar holding the architecture.
#[derive(Clone, Debug)]
pub struct UNetModel {
    pub net: UNet,
    pub params: ParamStore<f32>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl UNetModel {
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        let (net, params) = UNet::new(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.net.config
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        let sidecar = Sidecar {
            unet: self.net.config.clone(),
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        if !side.exists() {
            return Err(Error::Missing(side));
        }
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(&side)?)?;
        let mut model = Self::init(sidecar.unet, 0)?;
        model.params.load_named(checkpoint::load(path)?)?;
        Ok(model)
    }

    /// Eval-mode forward pass returning `[final_feature_maps][H][W]`.
    pub fn activations(&self, chip: &Chip) -> Result<Vec<f32>> {
        let cfg = &self.net.config;
        if chip.bands != cfg.in_channels {
            return Err(Error::Shape {
                op: "extract_activations",
                lhs: vec![chip.bands, chip.size, chip.size],
                rhs: vec![cfg.in_channels],
            });
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new([1, chip.bands, chip.size, chip.size], chip.data.clone())?);
        let out = self.net.forward(&mut tape, &p, x, Mode::Eval, &mut Vec::new())?;
        let features = out.features;
        drop(out);
        Ok(tape.value(features).data().to_vec())
    }

    /// Per-class sigmoid probabilities `[C][H][W]`.
    pub fn predict(&self, chip: &Chip) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new([1, chip.bands, chip.size, chip.size], chip.data.clone())?);
        let out = self.net.forward(&mut tape, &p, x, Mode::Eval, &mut Vec::new())?;
        Ok(tape.value(out.probs).data().to_vec())
    }

    /// [`UNetModel::activations`] over many chips in parallel.
    pub fn activations_batch(&self, chips: &[Chip]) -> Result<Vec<Vec<f32>>> {
        chips.par_iter().map(|c| self.activations(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    fn tiny() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_kernels: 4,
            in_channels: 2,
            out_classes: 2,
            final_feature_maps: 6,
        }
    }

    fn chip(seed: u64, size: usize) -> Chip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..2 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
        Chip::from_data(format!("t_r000_c{seed:03}"), 2, size, data).unwrap()
    }

    fn samples(n: usize, size: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let c = chip(i as u64, size);
                let target = (0..size * size)
                    .map(|p| if c.data[p] > 0.0 { 1.0 } else { 0.0 })
                    .chain((0..size * size).map(|p| if c.data[p] > 0.0 { 0.0 } else { 1.0 }))
                    .collect();
                Sample::new(&c, target).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let model = UNetModel::init(tiny(), 3).unwrap();
        let data = samples(2, 8);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let report = train_unet(&model.net, model.params.clone(), &data, &data, &cfg).unwrap();
        assert!(report.history.is_empty());
        for ((_, a), (_, b)) in report.params.named().zip(model.params.named()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let model = UNetModel::init(tiny(), 1).unwrap();
        let data = samples(4, 8);
        let cfg = TrainConfig {
            max_epochs: 40,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let report = train_unet(&model.net, model.params.clone(), &data, &data, &cfg).unwrap();
        assert!(report.best_val_loss < report.initial_val_loss);
    }

    #[test]
    fn extraction_is_deterministic_and_shaped() {
        let model = UNetModel::init(tiny(), 2).unwrap();
        let c = chip(9, 8);
        let a = model.activations(&c).unwrap();
        assert_eq!(a.len(), 6 * 64);
        assert_eq!(a, model.activations(&c).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unet.tlwt");
        let model = UNetModel::init(tiny(), 4).unwrap();
        model.save(&path).unwrap();
        let back = UNetModel::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        let c = chip(5, 8);
        assert_eq!(back.activations(&c).unwrap(), model.activations(&c).unwrap());
    }

    #[test]
    fn combo_loss_gradient_matches_differences() {
        let truth = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| [1.0, 0.0, 0.3, 1.0, 0.0, 0.7, 1.0, 0.2][i]);
        let logits = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| (i as f64 * 0.7).sin());
        let check = gradcheck::check(&[logits], 1e-4, |tape, v| {
            let t = tape.constant(truth.clone());
            let p = tape.sigmoid(v[0]);
            combo_loss(tape, t, p)
        })
        .unwrap();
        assert!(check.max_relative_error() < 1e-4, "{:?}", check.relative_errors);
    }
}
