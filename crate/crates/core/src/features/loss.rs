//! Dice + binary cross-entropy combo loss over non-exclusive class maps.

use crate::error::{Error, Result};
use crate::numerics::{Element, Tape, Tensor, Var};

/// Clamp applied to predictions before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;
pub const DICE_WEIGHT: f64 = 0.5;
pub const BCE_WEIGHT: f64 = 0.5;

/// `d = 2·Σ(X·Y) / (ΣX + ΣY)` for one class; 1 when both maps are empty.
pub fn dice_per_class(truth: &[f32], pred: &[f32]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::Shape {
            op: "dice",
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    let (mut inter, mut total) = (0.0f64, 0.0f64);
    for (&x, &y) in truth.iter().zip(pred) {
        inter += x as f64 * y as f64;
        total += x as f64 + y as f64;
    }
    Ok(if total == 0.0 { 1.0 } else { 2.0 * inter / total })
}

fn check_probabilities<T: Element>(tape: &Tape<T>, pred: Var) -> Result<()> {
    let bad = tape
        .value(pred)
        .data()
        .iter()
        .position(|&p| !(p >= T::zero() && p <= T::one()));
    match bad {
        Some(i) => Err(Error::Divergence(format!(
            "prediction {} at index {i} is outside [0, 1]",
            tape.value(pred).data()[i]
        ))),
        None => Ok(()),
    }
}

/// Per-class dice coefficients `[1, C, 1, 1]` for `[N, C, H, W]` maps.
pub fn dice_coefficients<T: Element>(tape: &mut Tape<T>, truth: Var, pred: Var) -> Result<Var> {
    if tape.shape(truth) != tape.shape(pred) || tape.shape(pred).len() != 4 {
        return Err(Error::Shape {
            op: "dice",
            lhs: tape.shape(truth).to_vec(),
            rhs: tape.shape(pred).to_vec(),
        });
    }
    let axes = [0, 2, 3];
    let xy = tape.mul(truth, pred)?;
    let inter = tape.sum_axes(xy, &axes)?;
    let sx = tape.sum_axes(truth, &axes)?;
    let sy = tape.sum_axes(pred, &axes)?;
    let total = tape.add(sx, sy)?;
    // Classes with empty truth and prediction score 1: adding the mask to
    // the denominator and the result leaves non-empty classes untouched.
    let empty = tape.value(total).map(|v| if v == T::zero() { T::one() } else { T::zero() });
    let empty = tape.constant(empty);
    let safe_total = tape.add(total, empty)?;
    let twice = tape.scale(inter, T::from_f64_lossy(2.0));
    let ratio = tape.div(twice, safe_total)?;
    tape.add(ratio, empty)
}

/// Mean binary cross-entropy over every class and pixel.
pub fn bce<T: Element>(tape: &mut Tape<T>, truth: Var, pred: Var) -> Result<Var> {
    let eps = T::from_f64_lossy(BCE_EPS);
    let p = tape.clamp(pred, eps, T::one() - eps);
    let log_p = tape.log(p);
    let neg = tape.scale(p, -T::one());
    let one_minus_p = tape.add_scalar(neg, T::one());
    let log_q = tape.log(one_minus_p);
    let neg_truth = tape.scale(truth, -T::one());
    let one_minus_truth = tape.add_scalar(neg_truth, T::one());
    let a = tape.mul(truth, log_p)?;
    let b = tape.mul(one_minus_truth, log_q)?;
    let ll = tape.add(a, b)?;
    let mean = tape.mean_all(ll);
    Ok(tape.scale(mean, -T::one()))
}

/// `0.5·(1 − mean dice) + 0.5·BCE`. `pred` must already be per-class
/// sigmoid probabilities.
pub fn combo_loss<T: Element>(tape: &mut Tape<T>, truth: Var, pred: Var) -> Result<Var> {
    check_probabilities(tape, pred)?;
    let dice = dice_coefficients(tape, truth, pred)?;
    let mean_dice = tape.mean_all(dice);
    let neg = tape.scale(mean_dice, -T::one());
    let dice_loss = tape.add_scalar(neg, T::one());
    let bce = bce(tape, truth, pred)?;
    let a = tape.scale(dice_loss, T::from_f64_lossy(DICE_WEIGHT));
    let b = tape.scale(bce, T::from_f64_lossy(BCE_WEIGHT));
    tape.add(a, b)
}

/// Evaluate the combo loss on plain `[N, C, H, W]` buffers.
pub fn combo_loss_value(shape: [usize; 4], truth: &[f32], pred: &[f32]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let t = tape.constant(Tensor::<f32>::new(shape, truth.to_vec())?.cast());
    let p = tape.constant(Tensor::<f32>::new(shape, pred.to_vec())?.cast());
    let loss = combo_loss(&mut tape, t, p)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        assert_eq!(dice_per_class(&[1.0; 5], &[1.0; 5]).unwrap(), 1.0);
        assert_eq!(dice_per_class(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dice_per_class(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(dice_per_class(&[0.0; 3], &[0.0; 3]).unwrap(), 1.0);
        assert!(dice_per_class(&[0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn perfect_prediction_costs_only_the_clamp() {
        let truth = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let loss = combo_loss_value([1, 2, 2, 2], &truth, &truth).unwrap();
        let floor = -(1.0 - BCE_EPS).ln() * BCE_WEIGHT;
        assert!((loss - floor).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn half_prediction_bce_is_ln2() {
        let truth = [1.0, 0.0, 1.0, 0.0];
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(Tensor::new([1, 1, 2, 2], truth.to_vec()).unwrap());
        let p = tape.constant(Tensor::full([1, 1, 2, 2], 0.5));
        let b = bce(&mut tape, t, p).unwrap();
        assert!((tape.value(b).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_oracle() {
        // 2 classes × 4 pixels, evaluated term by term.
        let truth = [0.2f32, 0.9, 0.0, 0.6, 0.8, 0.1, 1.0, 0.4];
        let pred = [0.3f32, 0.7, 0.1, 0.5, 0.6, 0.2, 0.9, 0.45];
        let mut dice = 0.0;
        for c in 0..2 {
            let (x, y) = (&truth[c * 4..c * 4 + 4], &pred[c * 4..c * 4 + 4]);
            let inter: f64 = x.iter().zip(y).map(|(&a, &b)| a as f64 * b as f64).sum();
            let tot: f64 = x.iter().chain(y).map(|&v| v as f64).sum();
            dice += 2.0 * inter / tot / 2.0;
        }
        let mut bce = 0.0;
        for (&x, &y) in truth.iter().zip(&pred) {
            let (x, y) = (x as f64, y as f64);
            bce -= x * y.ln() + (1.0 - x) * (1.0 - y).ln();
        }
        bce /= 8.0;
        let expected = 0.5 * (1.0 - dice) + 0.5 * bce;
        let got = combo_loss_value([1, 2, 2, 2], &truth, &pred).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn out_of_range_prediction_is_fault() {
        let r = combo_loss_value([1, 1, 1, 2], &[0.0, 1.0], &[0.5, 1.5]);
        assert!(matches!(r, Err(Error::Divergence(_))));
        let r = combo_loss_value([1, 1, 1, 2], &[0.0, 1.0], &[0.5, f32::NAN]);
        assert!(r.is_err());
    }
}
