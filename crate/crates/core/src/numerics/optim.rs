use super::params::{Bound, ParamId, ParamStore};
use super::tape::Gradients;
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Adam moments for every trainable entry of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T: Element = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let moments = params
            .iter()
            .map(|(_, p)| {
                p.trainable.then(|| {
                    (
                        Tensor::zeros(p.value.shape().to_vec()),
                        Tensor::zeros(p.value.shape().to_vec()),
                    )
                })
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }
}

/// Apply one Adam update using gradients gathered by [`Tape::backward`].
/// Parameters no path reached are treated as having zero gradient.
///
/// [`Tape::backward`]: super::tape::Tape::backward
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    bound: &Bound,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let ids: Vec<ParamId> = params.ids().filter(|&id| params.is_trainable(id)).collect();
    let collected: Vec<(ParamId, Tensor<T>)> = ids
        .into_iter()
        .map(|id| {
            let g = grads.get_or_zeros(bound[id], params.get(id).shape());
            (id, g)
        })
        .collect();
    apply_adam(params, &collected, state, lr)
}

/// Adam over explicit `(param, gradient)` pairs.
pub fn apply_adam<T: Element>(
    params: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite gradient for {}",
            params.name(*id)
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(state.beta1), T::from_f64_lossy(state.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for (id, g) in grads {
        let (m, v) = state.moments[id.0]
            .as_mut()
            .ok_or_else(|| Error::invalid("adam step on non-trainable tensor"))?;
        let p = params.get_mut(*id);
        if m.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: m.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for (((pv, mv), vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            let m_hat = mv.to_f64_lossy() / bc1;
            let v_hat = vv.to_f64_lossy() / bc2;
            let update = lr * m_hat / (v_hat.sqrt() + state.eps);
            *pv = *pv - T::from_f64_lossy(update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn single(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value), true);
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = single(3.0);
        let mut state = AdamState::new(&store);
        for _ in 0..5 {
            apply_adam(&mut store, &[(id, Tensor::scalar(0.0))], &mut state, 1e-3).unwrap();
        }
        assert_eq!(store.get(id).item(), 3.0);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + ε) ≈ -lr for g = 1.
        let (mut store, id) = single(0.0);
        let mut state = AdamState::new(&store);
        apply_adam(&mut store, &[(id, Tensor::scalar(1.0))], &mut state, 1e-3).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let (mut store, id) = single(0.0);
        let mut state = AdamState::new(&store);
        let mut last = 0.0;
        for _ in 0..100 {
            apply_adam(&mut store, &[(id, Tensor::scalar(-2.0))], &mut state, 1e-2).unwrap();
            let now = store.get(id).item();
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let (mut store, id) = single(0.0);
        let mut state = AdamState::new(&store);
        let err = apply_adam(&mut store, &[(id, Tensor::scalar(f64::NAN))], &mut state, 1e-3);
        assert!(matches!(err, Err(Error::Divergence(_))));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn step_through_tape() {
        let (mut store, id) = single(1.0);
        let mut state = AdamState::new(&store);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let sq = tape.mul(bound[id], bound[id]).unwrap();
        let grads = tape.backward(sq).unwrap();
        adam_step(&mut store, &bound, &grads, &mut state, 0.1).unwrap();
        assert!(store.get(id).item() < 1.0);
    }
}
