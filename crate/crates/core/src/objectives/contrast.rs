use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffcore::{log_sum_exp, sigmoid, Array, CustomOp, Scalar, Tape, Var};
use crate::error::{shape_err, Result};
use crate::rng::permutation;

/// Mean of the rows of `features` (cells x D) selected by `mask`. An empty
/// mask falls back to the mean of all rows; the flag reports the fallback.
pub fn map_pool<T: Scalar>(features: &Array<T>, mask: &[bool]) -> (Vec<T>, bool) {
    let empty = !mask.iter().any(|&m| m);
    let d = features.cols();
    let mut out = vec![T::zero(); d];
    let mut n = 0usize;
    for r in 0..features.rows() {
        if empty || mask[r] {
            for (o, &v) in out.iter_mut().zip(features.row(r)) {
                *o += v;
            }
            n += 1;
        }
    }
    let inv = T::one() / T::of(n as f64);
    out.iter_mut().for_each(|v| *v *= inv);
    (out, empty)
}

/// Channel-wise max over the selected rows, with the same fallback.
pub fn mmp_pool<T: Scalar>(features: &Array<T>, mask: &[bool]) -> (Vec<T>, bool) {
    let empty = !mask.iter().any(|&m| m);
    let mut out = vec![T::neg_infinity(); features.cols()];
    for r in 0..features.rows() {
        if empty || mask[r] {
            for (o, &v) in out.iter_mut().zip(features.row(r)) {
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    (out, empty)
}

/// Positive and negative feature rows of one anchor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastIndices {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Pixels for the contrastive term. For each anchor class, all of its
/// pixels are positives and up to `max_negatives` other pixels are drawn,
/// split as evenly as possible across the other labels present. Returns the
/// union of used pixels and, per anchor, indices into that union.
pub fn sample_contrast(
    labels: &[u8],
    anchors: &[u8],
    max_negatives: usize,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<ContrastIndices>) {
    let mut by_label: Vec<(u8, Vec<usize>)> = Vec::new();
    for (p, &l) in labels.iter().enumerate() {
        match by_label.iter_mut().find(|(c, _)| *c == l) {
            Some((_, v)) => v.push(p),
            None => by_label.push((l, vec![p])),
        }
    }
    by_label.sort_by_key(|(c, _)| *c);
    let mut picked: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(anchors.len());
    for &k in anchors {
        let positives = by_label
            .iter()
            .find(|(c, _)| *c == k)
            .map(|(_, v)| v.clone())
            .unwrap_or_default();
        let mut others: Vec<&Vec<usize>> = by_label
            .iter()
            .filter(|(c, _)| *c != k)
            .map(|(_, v)| v)
            .collect();
        // smallest strata first so their unused quota flows to larger ones
        others.sort_by_key(|v| v.len());
        let mut remaining = max_negatives;
        let mut negatives = Vec::new();
        for (i, pool) in others.iter().enumerate() {
            let share = remaining / (others.len() - i);
            let take = share.min(pool.len());
            let order = permutation(rng, pool.len());
            negatives.extend(order[..take].iter().map(|&j| pool[j]));
            remaining -= take;
        }
        negatives.sort_unstable();
        picked.push((positives, negatives));
    }
    let mut union: Vec<usize> = picked
        .iter()
        .flat_map(|(p, n)| p.iter().chain(n))
        .copied()
        .collect();
    union.sort_unstable();
    union.dedup();
    let pos_of = |p: &usize| union.binary_search(p).expect("pixel in union");
    let sets = picked
        .iter()
        .map(|(p, n)| ContrastIndices {
            positives: p.iter().map(pos_of).collect(),
            negatives: n.iter().map(pos_of).collect(),
        })
        .collect();
    (union, sets)
}

struct InfoNceOp {
    grad: Vec<f64>,
}

impl<T: Scalar> CustomOp<T> for InfoNceOp {
    fn name(&self) -> &'static str {
        "info_nce"
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
            Array::new(inputs[0].shape(), data).expect("info_nce grad shape"),
        )]
    }
}

/// Loss on a precomputed similarity matrix (anchors x features, already
/// divided by the temperature). Returns `None` when no anchor has positives.
pub(crate) fn info_nce_on_similarities<T: Scalar>(
    tape: &mut Tape<T>,
    sims: Var,
    sets: &[ContrastIndices],
) -> Result<(Option<Var>, usize)> {
    let s = tape.value(sims);
    if s.rows() != sets.len() {
        return Err(shape_err(
            "info_nce",
            alloc::format!("{} anchors for {} sets", s.rows(), sets.len()),
        ));
    }
    let cols = s.cols();
    let valid: Vec<usize> = (0..sets.len())
        .filter(|&k| !sets[k].positives.is_empty())
        .collect();
    let skipped = sets.len() - valid.len();
    if valid.is_empty() {
        return Ok((None, skipped));
    }
    let mut grad = vec![0.0; s.len()];
    let mut total = 0.0;
    let wa = 1.0 / valid.len() as f64;
    for &k in &valid {
        let row: Vec<f64> = s.row(k).iter().map(|v| v.as_f64()).collect();
        let set = &sets[k];
        let negs: Vec<f64> = set.negatives.iter().map(|&j| row[j]).collect();
        let lse_neg = if negs.is_empty() {
            f64::NEG_INFINITY
        } else {
            log_sum_exp(&negs)
        };
        let wp = wa / set.positives.len() as f64;
        let g = &mut grad[k * cols..(k + 1) * cols];
        for &p in &set.positives {
            let sp = row[p];
            if lse_neg == f64::NEG_INFINITY {
                continue;
            }
            // -log(e^sp / (e^sp + e^lse)) = softplus(lse - sp)
            let x = lse_neg - sp;
            let term = if x > 0.0 {
                x + libm::log1p(libm::exp(-x))
            } else {
                libm::log1p(libm::exp(x))
            };
            total += wp * term;
            let q = sigmoid(x);
            g[p] -= wp * q;
            for (&j, &sn) in set.negatives.iter().zip(&negs) {
                g[j] += wp * q * libm::exp(sn - lse_neg);
            }
        }
    }
    let value = Array::scalar(T::of(total));
    let v = tape.custom(&[sims], value, Box::new(InfoNceOp { grad }))?;
    Ok((Some(v), skipped))
}

/// Supervised InfoNCE between anchors (K x D) and features (P x D), both
/// L2-normalised first, averaged over positives then over anchors. Anchors
/// without positives are skipped and counted.
pub fn info_nce<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    features: Var,
    sets: &[ContrastIndices],
    temperature: f64,
) -> Result<(Option<Var>, usize)> {
    let a = tape.l2_normalize_rows(anchors, T::of(1e-12))?;
    let f = tape.l2_normalize_rows(features, T::of(1e-12))?;
    let s = tape.matmul_nt(a, f)?;
    let s = tape.scale(s, T::of(1.0 / temperature))?;
    info_nce_on_similarities(tape, s, sets)
}
