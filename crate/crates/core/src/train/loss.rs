use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Smoothing term of the soft-Dice loss.
pub const DICE_SMOOTH: f32 = 1.0;

/// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.size() != gt.size() {
        return Err(Error::shape("dice", &[pred.size(); 2], &[gt.size(); 2]));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// `1 − (2Σpg + ε) / (Σp + Σg + ε)` with `p = sigmoid(logits)`.
pub fn soft_dice_loss(tape: &mut Tape, logits: Var, gt: &Tensor) -> Result<Var> {
    if tape.shape(logits) != gt.shape() {
        return Err(Error::shape("soft_dice_loss", tape.shape(logits), gt.shape()));
    }
    let p = tape.sigmoid(logits);
    let g = tape.constant(gt.clone());
    let pg = tape.mul(p, g)?;
    let inter = tape.sum(pg);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_SMOOTH);
    let sp = tape.sum(p);
    let den = tape.add_scalar(sp, gt.sum() + DICE_SMOOTH);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Equal-weight soft-Dice and binary cross-entropy on logits.
pub fn seg_loss(tape: &mut Tape, logits: Var, gt: &Tensor) -> Result<Var> {
    let d = soft_dice_loss(tape, logits, gt)?;
    let b = tape.bce_with_logits(logits, gt)?;
    let s = tape.add(d, b)?;
    Ok(tape.scale(s, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_fixtures() {
        let a = Mask::from_fn(4, |_, y| y == 0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = Mask::from_fn(4, |_, y| y == 3);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let c = Mask::from_fn(4, |x, y| y == 0 && x < 2);
        assert!((dice(&a, &c).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice(&Mask::empty(4), &Mask::empty(4)).unwrap(), 1.0);
        assert!(dice(&a, &Mask::empty(5)).is_err());
    }

    #[test]
    fn bce_of_zero_logits_is_ln2() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros([8, 8]));
        let gt = Tensor::from_fn([8, 8], |i| (i % 2) as f32);
        let b = t.bce_with_logits(l, &gt).unwrap();
        assert!((t.value(b).item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::full([8, 8], 40.0));
        let loss = seg_loss(&mut t, l, &Tensor::ones([8, 8])).unwrap();
        assert!(t.value(loss).item().abs() < 1e-6);
    }
}
