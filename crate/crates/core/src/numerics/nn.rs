//! Parameterised layers built from tape primitives.

use rand::Rng;

use super::params::{he_uniform, Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Element, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistic updates emitted by batch-norm layers during a
/// training forward pass, applied after the optimizer step.
pub type StatUpdates<T> = Vec<(ParamId, Tensor<T>)>;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]), true);
        Self {
            weight,
            bias,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.weight], self.pad)?;
        tape.add(y, p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(shape), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(shape), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(shape), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(shape), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mode: Mode,
        updates: &mut StatUpdates<T>,
    ) -> Result<Var> {
        let eps = T::from_f64_lossy(self.eps);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm(x, p[self.gamma], p[self.beta], eps)?;
                let s = tape.shape(x);
                let n = (s[0] * s[2] * s[3]) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = T::from_f64_lossy(self.momentum);
                let keep = T::one() - m;
                let blend = |old: &Tensor<T>, new: &[T], scale: f64| {
                    let scale = T::from_f64_lossy(scale);
                    Tensor::from_fn(old.shape().to_vec(), |i| keep * old.data()[i] + m * new[i] * scale)
                };
                updates.push((self.running_mean, blend(tape.value(p[self.running_mean]), &mean, 1.0)));
                updates.push((self.running_var, blend(tape.value(p[self.running_var]), &var, unbiased)));
                Ok(y)
            }
            Mode::Eval => {
                // Fold running statistics into one per-channel affine map.
                let var_eps = tape.add_scalar(p[self.running_var], eps);
                let std = tape.sqrt(var_eps);
                let scale = tape.div(p[self.gamma], std)?;
                let shifted = tape.mul(p[self.running_mean], scale)?;
                let shift = tape.sub(p[self.beta], shifted)?;
                let y = tape.mul(x, scale)?;
                tape.add(y, shift)
            }
        }
    }
}

/// Dense layer on `[rows, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), he_uniform(&[fan_in, fan_out], fan_in, rng), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([1, fan_out]), true),
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add(y, p[self.bias])
    }
}

/// Write batch-norm running statistics collected during a training step.
pub fn apply_stat_updates<T: Element>(store: &mut ParamStore<T>, updates: StatUpdates<T>) {
    for (id, value) in updates {
        *store.get_mut(id) = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_norm_train_normalises_channels() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn([2, 2, 3, 3], |i| (i as f64 * 1.3).sin() * 4.0 + 2.0));
        let mut updates = Vec::new();
        let y = bn.forward(&mut tape, &p, x, Mode::Train, &mut updates).unwrap();
        let v = tape.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| v.data()[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 18.0;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert_eq!(updates.len(), 2);
    }

    #[test]
    fn fused_batch_norm_gradients() {
        let x = Tensor::<f64>::from_fn([2, 3, 2, 3], |i| ((i * 7) % 11) as f64 * 0.3 - 1.0);
        let gamma = Tensor::from_fn([1, 3, 1, 1], |i| 0.5 + i as f64);
        let beta = Tensor::from_fn([1, 3, 1, 1], |i| i as f64 - 1.0);
        let weights = Tensor::<f64>::from_fn([2, 3, 2, 3], |i| (i as f64 * 0.37).cos());
        let check = crate::numerics::gradcheck::check(&[x, gamma, beta], 1e-4, |tape, v| {
            let (y, _, _) = tape.batch_norm(v[0], v[1], v[2], 1e-5)?;
            let w = tape.constant(weights.clone());
            let yw = tape.mul(y, w)?;
            Ok(tape.sum_all(yw))
        })
        .unwrap();
        assert!(check.max_relative_error() < 1e-4, "{:?}", check.relative_errors);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        *store.get_mut(bn.running_mean) = Tensor::full([1, 1, 1, 1], 2.0);
        *store.get_mut(bn.running_var) = Tensor::full([1, 1, 1, 1], 4.0 - 1e-5);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new([1, 1, 1, 2], vec![2.0, 6.0]).unwrap());
        let y = bn.forward(&mut tape, &p, x, Mode::Eval, &mut Vec::new()).unwrap();
        let v = tape.value(y).data();
        assert!(v[0].abs() < 1e-9 && (v[1] - 2.0).abs() < 1e-9, "{v:?}");
    }

    #[test]
    fn conv_layer_preserves_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 5, 3, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::ones([1, 3, 7, 9]));
        let y = conv.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 5, 7, 9]);
    }
}
