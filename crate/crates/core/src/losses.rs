//! Training objective: focal loss on the coarse mask, BCE plus Dice on the
//! fine mask and label-smoothed cross-entropy on final logits.
//!
//! Every loss has a tape form (`*_var`) for gradients and a plain form that
//! evaluates it once.

use std::rc::Rc;

use crate::coarse::channels_last_index;
use crate::error::{Error, Result};
use crate::numerics::{DType, Tape, Tensor, Var};

/// Predictions are clamped to `[PRED_EPS, 1 - PRED_EPS]` before any log.
pub const PRED_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;
/// Labels with this value are left out of the cross-entropy mean.
pub const IGNORE_INDEX: u32 = 255;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    /// Weight of the positive class; negatives get `1 - alpha`.
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { gamma: 2.0, alpha: 0.25 }
    }
}

/// Weights of the coarse, fine and final terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub coarse: f64,
    pub fine: f64,
    pub final_: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            coarse: 0.05,
            fine: 0.2,
            final_: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(coarse: f64, fine: f64, final_: f64) -> Result<Self> {
        for (name, v) in [("coarse", coarse), ("fine", fine), ("final", final_)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} loss weight must be finite and non-negative, got {v}")));
            }
        }
        Ok(LossWeights { coarse, fine, final_ })
    }
}

fn check_binary_target(pred: &[usize], target: &Tensor) -> Result<()> {
    if pred != target.shape() {
        return Err(Error::shape(format!(
            "prediction {pred:?} and target {:?} differ in shape",
            target.shape()
        )));
    }
    if let Some(i) = target.data().iter().position(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid(format!(
            "target must be binary, found {} at index {i}",
            target.data()[i]
        )));
    }
    Ok(())
}

fn const_like(tape: &mut Tape, target: &Tensor, f: impl Fn(f64) -> f64) -> Var {
    tape.leaf(target.map(f).with_dtype(DType::F64))
}

/// Mean of `-α_t (1 - p_t)^γ ln p_t` over all elements.
pub fn focal_loss_var(tape: &mut Tape, pred: &Var, target: &Tensor, params: FocalParams) -> Result<Var> {
    check_binary_target(pred.shape(), target)?;
    let p = tape.clamp(pred, PRED_EPS, 1.0 - PRED_EPS)?;
    let sign = const_like(tape, target, |t| 2.0 * t - 1.0);
    let base = const_like(tape, target, |t| 1.0 - t);
    let pt = tape.mul(&p, &sign)?;
    let pt = tape.add(&pt, &base)?;
    let miss = tape.scale(&pt, -1.0)?;
    let miss = tape.add_scalar(&miss, 1.0)?;
    let modulation = tape.powf(&miss, params.gamma)?;
    let alpha = params.alpha;
    let balance = const_like(tape, target, |t| -(t * alpha + (1.0 - t) * (1.0 - alpha)));
    let log_pt = tape.ln(&pt)?;
    let weighted = tape.mul(&modulation, &log_pt)?;
    let weighted = tape.mul(&weighted, &balance)?;
    tape.mean_all(&weighted)
}

pub fn focal_loss(pred: &Tensor, target: &Tensor, params: FocalParams) -> Result<f64> {
    eval(pred, |t, p| focal_loss_var(t, p, target, params))
}

/// Mean binary cross-entropy plus the smoothed Dice loss
/// `1 - (2Σpt + s) / (Σp + Σt + s)`, summed over the whole tensor.
pub fn bce_dice_loss_var(tape: &mut Tape, pred: &Var, target: &Tensor) -> Result<Var> {
    check_binary_target(pred.shape(), target)?;
    let p = tape.clamp(pred, PRED_EPS, 1.0 - PRED_EPS)?;
    let sign = const_like(tape, target, |t| 2.0 * t - 1.0);
    let base = const_like(tape, target, |t| 1.0 - t);
    let pt = tape.mul(&p, &sign)?;
    let pt = tape.add(&pt, &base)?;
    let log_pt = tape.ln(&pt)?;
    let bce = tape.mean_all(&log_pt)?;
    let bce = tape.scale(&bce, -1.0)?;

    let t = const_like(tape, target, |t| t);
    let inter = tape.mul(&p, &t)?;
    let inter = tape.sum_all(&inter)?;
    let num = tape.scale(&inter, 2.0)?;
    let num = tape.add_scalar(&num, DICE_SMOOTH)?;
    let psum = tape.sum_all(&p)?;
    let den = tape.add_scalar(&psum, target.sum() + DICE_SMOOTH)?;
    let ratio = tape.div(&num, &den)?;
    let dice = tape.scale(&ratio, -1.0)?;
    let dice = tape.add_scalar(&dice, 1.0)?;
    tape.add(&bce, &dice)
}

pub fn bce_dice_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    eval(pred, |t, p| bce_dice_loss_var(t, p, target))
}

/// Cross-entropy of `B×K×H×W` logits against a `B×H×W` label map with the
/// target smoothed to `(1 - ε)·onehot + ε/K`. Pixels labelled
/// [`IGNORE_INDEX`] are skipped; if every pixel is skipped the loss is 0.
pub fn ce_label_smoothing_var(tape: &mut Tape, logits: &Var, labels: &[u32], smoothing: f64) -> Result<Var> {
    let (b, k, h, w) = match *logits.shape() {
        [b, k, h, w] => (b, k, h, w),
        _ => return Err(Error::shape(format!("logits must be B×K×H×W, got {:?}", logits.shape()))),
    };
    let n = h * w;
    if labels.len() != b * n {
        return Err(Error::shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(Error::invalid(format!("label smoothing must lie in [0, 1], got {smoothing}")));
    }
    let mut target = vec![0.0; b * n * k];
    let mut counted = 0usize;
    for (row, &y) in target.chunks_mut(k).zip(labels) {
        if y == IGNORE_INDEX {
            continue;
        }
        if y as usize >= k {
            return Err(Error::invalid(format!("label {y} outside 0..{k}")));
        }
        row.fill(smoothing / k as f64);
        row[y as usize] += 1.0 - smoothing;
        counted += 1;
    }
    let rows = tape.gather(logits, Rc::new(channels_last_index(b, k, n)), 1, &[b * n, k])?;
    let log_p = tape.log_softmax(&rows)?;
    let q = tape.leaf(Tensor::new(&[b * n, k], target)?);
    let picked = tape.mul(&log_p, &q)?;
    let total = tape.sum_all(&picked)?;
    tape.scale(&total, -1.0 / counted.max(1) as f64)
}

pub fn ce_label_smoothing(logits: &Tensor, labels: &[u32], smoothing: f64) -> Result<f64> {
    eval(logits, |t, l| ce_label_smoothing_var(t, l, labels, smoothing))
}

/// `w_c·coarse + w_f·fine + w_final·final`.
pub fn total_loss(coarse: f64, fine: f64, final_: f64, w: &LossWeights) -> f64 {
    w.coarse * coarse + w.fine * fine + w.final_ * final_
}

pub fn total_loss_var(tape: &mut Tape, coarse: &Var, fine: &Var, final_: &Var, w: &LossWeights) -> Result<Var> {
    let c = tape.scale(coarse, w.coarse)?;
    let f = tape.scale(fine, w.fine)?;
    let l = tape.scale(final_, w.final_)?;
    let cf = tape.add(&c, &f)?;
    tape.add(&cf, &l)
}

fn eval(x: &Tensor, f: impl FnOnce(&mut Tape, &Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::inference(DType::F64);
    let v = tape.leaf(x.clone().with_dtype(DType::F64));
    Ok(f(&mut tape, &v)?.value().item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_EPS};

    fn clampp(p: f64) -> f64 {
        p.clamp(PRED_EPS, 1.0 - PRED_EPS)
    }

    fn bce_oracle(pred: &[f64], target: &[f64]) -> f64 {
        let mut s = 0.0;
        for (&p, &t) in pred.iter().zip(target) {
            let p = clampp(p);
            s += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        }
        s / pred.len() as f64
    }

    fn dice_oracle(pred: &[f64], target: &[f64]) -> f64 {
        let (mut pt, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for (&p, &t) in pred.iter().zip(target) {
            let p = clampp(p);
            pt += p * t;
            ps += p;
            ts += t;
        }
        1.0 - (2.0 * pt + 1.0) / (ps + ts + 1.0)
    }

    fn random_pair(seed: u64, n: usize) -> (Tensor, Tensor) {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let pred: Vec<f64> = (0..n).map(|_| next()).collect();
        let target: Vec<f64> = (0..n).map(|_| if next() < 0.4 { 1.0 } else { 0.0 }).collect();
        (Tensor::new(&[1, 1, 8, n / 8], pred).unwrap(), Tensor::new(&[1, 1, 8, n / 8], target).unwrap())
    }

    #[test]
    fn focal_reference_value() {
        let p = Tensor::new(&[1], vec![0.3]).unwrap();
        let t = Tensor::new(&[1], vec![1.0]).unwrap();
        let l = focal_loss(&p, &t, FocalParams::default()).unwrap();
        assert!((l - 0.25 * 0.49 * -(0.3f64.ln())).abs() < 1e-15);
        assert!((l - 0.147_486_668).abs() < 1e-8);
    }

    #[test]
    fn focal_perfect_prediction_is_tiny() {
        let t = Tensor::new(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(focal_loss(&t, &t, FocalParams::default()).unwrap() <= 1e-5);
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let (p, t) = random_pair(3, 64);
        let f = focal_loss(&p, &t, FocalParams { gamma: 0.0, alpha: 0.5 }).unwrap();
        assert!((f - 0.5 * bce_oracle(p.data(), t.data())).abs() <= 1e-12);
    }

    #[test]
    fn bce_dice_matches_loop_oracle() {
        let (p, t) = random_pair(5, 64);
        let l = bce_dice_loss(&p, &t).unwrap();
        let expected = bce_oracle(p.data(), t.data()) + dice_oracle(p.data(), t.data());
        assert!((l - expected).abs() <= 1e-10);
    }

    #[test]
    fn bce_dice_half_prediction() {
        let t = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 2) as f64).unwrap();
        let p = Tensor::full(&[1, 1, 4, 4], 0.5).unwrap();
        let dice = 1.0 - (2.0 * 4.0 + 1.0) / (8.0 + 8.0 + 1.0);
        let l = bce_dice_loss(&p, &t).unwrap();
        assert!((l - (std::f64::consts::LN_2 + dice)).abs() < 1e-12);
    }

    #[test]
    fn bce_dice_identity_masks() {
        let t = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i / 3) % 2) as f64).unwrap();
        let bce = bce_oracle(t.data(), t.data());
        let dice = dice_oracle(t.data(), t.data());
        assert!(bce <= 1e-5 && dice <= 1e-6);
        assert!((bce_dice_loss(&t, &t).unwrap() - bce - dice).abs() < 1e-12);
    }

    #[test]
    fn non_binary_target_is_rejected() {
        let p = Tensor::full(&[2], 0.5).unwrap();
        let t = Tensor::new(&[2], vec![0.5, 1.0]).unwrap();
        assert!(focal_loss(&p, &t, FocalParams::default()).is_err());
        let t = Tensor::new(&[3], vec![0.0, 1.0, 1.0]).unwrap();
        assert!(bce_dice_loss(&p, &t).is_err());
    }

    fn ce_oracle(logits: &Tensor, labels: &[u32], eps: f64) -> f64 {
        let s = logits.shape();
        let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
        let (mut total, mut n) = (0.0, 0);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let lab = labels[(bi * h + y) * w + x];
                    if lab == IGNORE_INDEX {
                        continue;
                    }
                    let z: Vec<f64> = (0..k).map(|c| logits.at(&[bi, c, y, x])).collect();
                    let norm: f64 = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                    for (c, zc) in z.iter().enumerate() {
                        let q = eps / k as f64 + if c as u32 == lab { 1.0 - eps } else { 0.0 };
                        total -= q * (zc - norm);
                    }
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn ce_matches_explicit_sum() {
        let logits = Tensor::from_fn(&[2, 3, 2, 3], |i| (i as f64 * 0.71).sin() * 2.0).unwrap();
        let labels = [0, 2, 1, 255, 1, 0, 2, 2, 0, 1, 255, 1];
        let l = ce_label_smoothing(&logits, &labels, 0.1).unwrap();
        assert!((l - ce_oracle(&logits, &labels, 0.1)).abs() <= 1e-10);
    }

    #[test]
    fn ce_limits() {
        let uniform = Tensor::zeros(&[1, 5, 2, 2]).unwrap();
        for eps in [0.0, 0.1, 0.7] {
            let l = ce_label_smoothing(&uniform, &[0, 1, 4, 2], eps).unwrap();
            assert!((l - 5f64.ln()).abs() < 1e-12);
        }
        let sharp = Tensor::from_fn(&[1, 2, 1, 2], |i| if i == 0 || i == 3 { 1e4 } else { -1e4 }).unwrap();
        assert_eq!(ce_label_smoothing(&sharp, &[0, 1], 0.0).unwrap(), 0.0);
        assert!(ce_label_smoothing(&sharp, &[0, 2], 0.0).is_err());
        assert_eq!(ce_label_smoothing(&sharp, &[255, 255], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, 1.0, &w) - 1.25).abs() < 1e-15);
        assert!((total_loss(2.0, 0.5, 1.0, &w) - 1.2).abs() < 1e-12);
        let zero = LossWeights::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(total_loss(3.0, 4.0, 5.0, &zero), 0.0);
        assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn losses_pass_grad_check() {
        let (p, t) = random_pair(9, 16);
        let p = p.map(|v| 0.05 + 0.9 * v);
        for which in 0..2 {
            let r = grad_check(
                |tape, x| match which {
                    0 => focal_loss_var(tape, x, &t, FocalParams::default()),
                    _ => bce_dice_loss_var(tape, x, &t),
                },
                &p,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "loss {which}: {}", r.max_rel_error);
        }
        let logits = Tensor::from_fn(&[1, 3, 2, 2], |i| (i as f64 * 1.1).cos()).unwrap();
        let r = grad_check(|tape, x| ce_label_smoothing_var(tape, x, &[0, 1, 2, 255], 0.1), &logits, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
    }
}
