//! Bipartite matching between predictions and ground truth, and the set
//! losses built on it.

mod hungarian;
mod losses;
#[cfg(test)]
mod tests;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Scalar, Tape, Var};
use crate::error::{invalid, shape_err, Result};

pub use hungarian::hungarian;
pub use losses::{
    ce_loss, dice_from_probs, dice_loss, dice_value, focal_loss, focal_term, focal_value,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub w_class: f64,
    pub w_focal: f64,
    pub w_dice: f64,
    /// Cross-entropy weight of rows labelled no-object.
    pub null_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            w_class: 2.0,
            w_focal: 5.0,
            w_dice: 5.0,
            null_weight: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
        }
    }
}

/// Ground-truth segments of one scene: one binary mask per present class.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSet {
    pub labels: Vec<u8>,
    /// Row `j` is the binary mask of `labels[j]`, entries x pixels.
    pub masks: Array<f32>,
}

impl GroundTruthSet {
    /// One entry per foreground class present in a pixel label map, in
    /// ascending class order.
    pub fn from_labels(labels: &[u8]) -> Self {
        let mut present: Vec<u8> = labels.iter().copied().filter(|&l| l != 0).collect();
        present.sort_unstable();
        present.dedup();
        let p = labels.len();
        let mut masks = Array::zeros(&[present.len(), p]);
        for (j, &c) in present.iter().enumerate() {
            for (o, &l) in masks.row_mut(j).iter_mut().zip(labels) {
                *o = if l == c { 1.0 } else { 0.0 };
            }
        }
        Self {
            labels: present,
            masks,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Query-to-target map produced by matching. `targets[i]` is the
/// ground-truth entry matched to query `i`, or `None` for no-object.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub targets: Vec<Option<usize>>,
    pub cost: f64,
}

impl Assignment {
    /// Class id per query (0 for no-object) given the ground-truth labels.
    pub fn classes(&self, gt: &GroundTruthSet) -> Vec<Option<u8>> {
        self.targets
            .iter()
            .map(|t| t.map(|j| gt.labels[j]))
            .collect()
    }
}

/// Square `N x N` cost between `N` queries and the ground truth padded with
/// no-object columns. `probs` is `N x (C+1)` with no-object last; `masks`
/// is `N x P` logits.
pub fn matching_cost<T: Scalar>(
    probs: &Array<T>,
    masks: &Array<T>,
    gt: &GroundTruthSet,
    cfg: &MatchConfig,
) -> Result<Vec<f64>> {
    let n = probs.rows();
    let c1 = probs.cols();
    if masks.rows() != n || masks.cols() != gt.masks.cols() {
        return Err(shape_err(
            "matching_cost",
            format!("masks {:?} vs gt {:?}", masks.shape(), gt.masks.shape()),
        ));
    }
    if gt.len() > n {
        return Err(invalid(format!(
            "{} ground-truth entries for {} queries",
            gt.len(),
            n
        )));
    }
    if gt.labels.iter().any(|&l| l == 0 || l as usize >= c1) {
        return Err(invalid("ground-truth label outside the class range"));
    }
    let targets: Vec<Array<T>> = (0..gt.len())
        .map(|j| {
            Array::new(
                &[gt.masks.cols()],
                gt.masks.row(j).iter().map(|&v| T::of(v as f64)).collect(),
            )
        })
        .collect::<Result<_>>()?;
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        let p = probs.row(i);
        let m = masks.row(i);
        for j in 0..n {
            let c = if j < gt.len() {
                let slot = gt.labels[j] as usize - 1;
                -cfg.w_class * p[slot].as_f64()
                    + cfg.w_focal
                        * focal_value(m, targets[j].data(), cfg.focal_alpha, cfg.focal_gamma)
                    + cfg.w_dice * dice_value(m, targets[j].data(), cfg.dice_smooth)
            } else {
                -cfg.w_class * p[c1 - 1].as_f64()
            };
            cost.push(c);
        }
    }
    Ok(cost)
}

/// Optimal assignment of queries to ground truth.
pub fn match_predictions<T: Scalar>(
    probs: &Array<T>,
    masks: &Array<T>,
    gt: &GroundTruthSet,
    cfg: &MatchConfig,
) -> Result<Assignment> {
    let n = probs.rows();
    let cost = matching_cost(probs, masks, gt, cfg)?;
    let (cols, total) = hungarian(&cost, n)?;
    let targets = cols
        .into_iter()
        .map(|j| (j < gt.len()).then_some(j))
        .collect();
    Ok(Assignment {
        targets,
        cost: total,
    })
}

/// Scalar parts of a set loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SetLoss {
    pub ce: f64,
    pub focal: f64,
    pub dice: f64,
}

impl SetLoss {
    pub fn total(&self) -> f64 {
        self.ce + self.focal + self.dice
    }
}

/// Cross-entropy plus focal and dice terms for queries with known targets.
/// `targets[i]` is the ground-truth entry of query `i` or `None`. Mask terms
/// are summed over supervised queries, or averaged when `average_masks`.
pub fn supervised_loss<T: Scalar>(
    tape: &mut Tape<T>,
    masks: Var,
    log_probs: Var,
    gt: &GroundTruthSet,
    targets: &[Option<usize>],
    cfg: &MatchConfig,
    average_masks: bool,
) -> Result<(Var, SetLoss)> {
    let c1 = tape.shape(log_probs)[1];
    let labels: Vec<usize> = targets
        .iter()
        .map(|t| t.map_or(c1 - 1, |j| gt.labels[j] as usize - 1))
        .collect();
    let ce = ce_loss(tape, log_probs, &labels, c1 - 1, cfg.null_weight)?;
    let rows: Vec<usize> = (0..targets.len())
        .filter(|&i| targets[i].is_some())
        .collect();
    let mut parts = SetLoss {
        ce: tape.value(ce).item().as_f64(),
        ..SetLoss::default()
    };
    if rows.is_empty() {
        return Ok((ce, parts));
    }
    let p = gt.masks.cols();
    let mut tgt = Vec::with_capacity(rows.len() * p);
    for &i in &rows {
        let j = targets[i].expect("supervised row");
        tgt.extend(gt.masks.row(j).iter().map(|&v| T::of(v as f64)));
    }
    let tgt = Array::new(&[rows.len(), p], tgt)?;
    let sel = tape.gather_rows(masks, &rows)?;
    let focal = focal_loss(tape, sel, &tgt, cfg.focal_alpha, cfg.focal_gamma)?;
    let dice = dice_loss(tape, sel, &tgt, cfg.dice_smooth)?;
    let mut m = tape.add(focal, dice)?;
    parts.focal = tape.value(focal).item().as_f64();
    parts.dice = tape.value(dice).item().as_f64();
    if average_masks {
        let k = rows.len() as f64;
        m = tape.scale(m, T::of(1.0 / k))?;
        parts.focal /= k;
        parts.dice /= k;
    }
    Ok((tape.add(ce, m)?, parts))
}

/// Class-agnostic set loss: Hungarian-match, then cross-entropy over all
/// queries plus focal and dice over matched pairs.
pub fn loss_agn<T: Scalar>(
    tape: &mut Tape<T>,
    masks: Var,
    log_probs: Var,
    gt: &GroundTruthSet,
    cfg: &MatchConfig,
) -> Result<(Var, SetLoss, Assignment)> {
    let probs = tape.value(log_probs).map(|v| v.exp());
    let assignment = match_predictions(&probs, tape.value(masks), gt, cfg)?;
    let (loss, parts) =
        supervised_loss(tape, masks, log_probs, gt, &assignment.targets, cfg, false)?;
    Ok((loss, parts, assignment))
}
