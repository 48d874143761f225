use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffcore::{sigmoid, Array, CustomOp, Scalar, Tape, Var};
use crate::error::{shape_err, Result};

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Focal loss of one logit against a binary target, and its derivative.
pub fn focal_term(x: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if target {
        let q = 1.0 - p;
        let lnp = -softplus(-x);
        let l = alpha * libm::pow(q, gamma) * -lnp;
        let g = alpha * (gamma * p * libm::pow(q, gamma) * lnp - libm::pow(q, gamma + 1.0));
        (l, g)
    } else {
        let lnq = -softplus(x);
        let l = (1.0 - alpha) * libm::pow(p, gamma) * -lnq;
        let g = (1.0 - alpha)
            * (-gamma * libm::pow(p, gamma) * (1.0 - p) * lnq + libm::pow(p, gamma + 1.0));
        (l, g)
    }
}

/// Mean focal loss over one row of logits.
pub fn focal_value<T: Scalar>(logits: &[T], target: &[T], alpha: f64, gamma: f64) -> f64 {
    let s: f64 = logits
        .iter()
        .zip(target)
        .map(|(x, t)| focal_term(x.as_f64(), t.as_f64() > 0.5, alpha, gamma).0)
        .sum();
    s / logits.len() as f64
}

/// Dice loss `1 - (2 sum(s t) + k) / (sum(s) + sum(t) + k)` on probabilities.
pub fn dice_from_probs(probs: &[f64], target: &[f64], smooth: f64) -> f64 {
    let inter: f64 = probs.iter().zip(target).map(|(s, t)| s * t).sum();
    let ps: f64 = probs.iter().sum();
    let ts: f64 = target.iter().sum();
    1.0 - (2.0 * inter + smooth) / (ps + ts + smooth)
}

pub fn dice_value<T: Scalar>(logits: &[T], target: &[T], smooth: f64) -> f64 {
    let probs: Vec<f64> = logits.iter().map(|x| sigmoid(x.as_f64())).collect();
    let t: Vec<f64> = target.iter().map(|t| t.as_f64()).collect();
    dice_from_probs(&probs, &t, smooth)
}

struct FocalOp {
    grad: Vec<f64>,
}

impl<T: Scalar> CustomOp<T> for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(
        &self,
        inputs: &[&Array<T>],
        _output: &Array<T>,
        grad: &Array<T>,
    ) -> Vec<Option<Array<T>>> {
        let g = grad.item().as_f64();
        let data = self.grad.iter().map(|v| T::of(g * v)).collect();
        vec![Some(
            Array::new(inputs[0].shape(), data).expect("focal grad shape"),
        )]
    }
}

/// Sum over rows of the per-row mean focal loss of `logits` (rows x P)
/// against binary `targets` of the same shape.
pub fn focal_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &Array<T>,
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let x = tape.value(logits);
    if x.shape() != targets.shape() || x.shape().len() != 2 {
        return Err(shape_err(
            "focal_loss",
            alloc::format!("{:?} vs {:?}", x.shape(), targets.shape()),
        ));
    }
    let p = x.cols() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for (v, t) in x.data().iter().zip(targets.data()) {
        let (l, g) = focal_term(v.as_f64(), t.as_f64() > 0.5, alpha, gamma);
        total += l;
        grad.push(g / p);
    }
    tape.custom(
        &[logits],
        Array::scalar(T::of(total / p)),
        Box::new(FocalOp { grad }),
    )
}

struct DiceOp {
    grad: Vec<f64>,
}

impl<T: Scalar> CustomOp<T> for DiceOp {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(
        &self,
        inputs: &[&Array<T>],
        _output: &Array<T>,
        grad: &Array<T>,
    ) -> Vec<Option<Array<T>>> {
        let g = grad.item().as_f64();
        let data = self.grad.iter().map(|v| T::of(g * v)).collect();
        vec![Some(
            Array::new(inputs[0].shape(), data).expect("dice grad shape"),
        )]
    }
}

/// Sum over rows of the dice loss of `sigmoid(logits)` against `targets`.
pub fn dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &Array<T>,
    smooth: f64,
) -> Result<Var> {
    let x = tape.value(logits);
    if x.shape() != targets.shape() || x.shape().len() != 2 {
        return Err(shape_err(
            "dice_loss",
            alloc::format!("{:?} vs {:?}", x.shape(), targets.shape()),
        ));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let s: Vec<f64> = x.row(r).iter().map(|v| sigmoid(v.as_f64())).collect();
        let t: Vec<f64> = targets.row(r).iter().map(|v| v.as_f64()).collect();
        let inter: f64 = s.iter().zip(&t).map(|(a, b)| a * b).sum();
        let num = 2.0 * inter + smooth;
        let den = s.iter().sum::<f64>() + t.iter().sum::<f64>() + smooth;
        total += 1.0 - num / den;
        let g = &mut grad[r * x.cols()..(r + 1) * x.cols()];
        for i in 0..s.len() {
            let ds = -(2.0 * t[i] * den - num) / (den * den);
            g[i] = ds * s[i] * (1.0 - s[i]);
        }
    }
    tape.custom(
        &[logits],
        Array::scalar(T::of(total)),
        Box::new(DiceOp { grad }),
    )
}

/// Weighted mean negative log-probability of `labels` (one slot per row),
/// with rows labelled `null_slot` weighted by `null_weight`.
pub fn ce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: Var,
    labels: &[usize],
    null_slot: usize,
    null_weight: f64,
) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&l| l >= shape[1]) {
        return Err(shape_err(
            "ce_loss",
            alloc::format!("{:?} with {} labels", shape, labels.len()),
        ));
    }
    let w: Vec<f64> = labels
        .iter()
        .map(|&l| if l == null_slot { null_weight } else { 1.0 })
        .collect();
    let total: f64 = w.iter().sum();
    let mut sel = Array::zeros(&shape);
    for (i, &l) in labels.iter().enumerate() {
        sel.row_mut(i)[l] = T::of(-w[i] / total);
    }
    let sel = tape.constant(sel)?;
    let picked = tape.mul(log_probs, sel)?;
    tape.sum_all(picked)
}
