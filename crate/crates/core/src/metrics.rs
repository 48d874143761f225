//! Matching stability, classification coverage and segmentation scores.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// Hungarian-assigned class per query for every sample of an epoch
/// (`None` is no-object).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignmentRecord {
    queries: usize,
    rows: Vec<Vec<Option<u8>>>,
}

impl AssignmentRecord {
    pub fn new(queries: usize) -> Self {
        Self {
            queries,
            rows: Vec::new(),
        }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn push(&mut self, row: Vec<Option<u8>>) -> Result<()> {
        if row.len() != self.queries {
            return Err(invalid(alloc::format!(
                "record row of {} for {} queries",
                row.len(),
                self.queries
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<Option<u8>>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StsReport {
    pub value: f64,
    /// Per-class entropies, `None` for classes never assigned.
    pub per_class: Vec<Option<f64>>,
}

/// Mean over classes `1..=C` of the entropy (nats) of the distribution of
/// query indices each class was assigned to. Classes never assigned add 0.
pub fn sts(record: &AssignmentRecord, classes: usize) -> Result<StsReport> {
    if record.is_empty() || classes == 0 {
        return Err(invalid("stability score of an empty record"));
    }
    let n = record.queries();
    let mut per_class = Vec::with_capacity(classes);
    for c in 1..=classes as u8 {
        let mut counts = vec![0usize; n];
        for row in record.rows() {
            for (q, a) in row.iter().enumerate() {
                if *a == Some(c) {
                    counts[q] += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            per_class.push(None);
            continue;
        }
        let h: f64 = counts
            .iter()
            .map(|&k| {
                let s = k as f64 / total as f64;
                -s * libm::log(s.clamp(1e-12, 1.0))
            })
            .sum();
        per_class.push(Some(h));
    }
    let value = per_class.iter().flatten().sum::<f64>() / classes as f64;
    Ok(StsReport { value, per_class })
}

/// Jaccard index of two class sets; 1 when both are empty.
pub fn coverage(pred: &[u8], gt: &[u8]) -> f64 {
    let mut p: Vec<u8> = pred.to_vec();
    let mut g: Vec<u8> = gt.to_vec();
    p.sort_unstable();
    p.dedup();
    g.sort_unstable();
    g.dedup();
    let inter = p.iter().filter(|c| g.contains(c)).count();
    let union = p.len() + g.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub const BETA_SQUARED: f64 = 0.3;

/// `(1 + b2) P R / (b2 P + R)`, 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

/// Per-class pixel counts accumulated over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct SegCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl SegCounts {
    /// Counters for labels `0..=classes`.
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes + 1],
            fp: vec![0; classes + 1],
            fn_: vec![0; classes + 1],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len() - 1
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(invalid("prediction and ground truth differ in size"));
        }
        let c = self.classes();
        for (&p, &g) in pred.iter().zip(gt) {
            if p as usize > c || g as usize > c {
                return Err(invalid(alloc::format!(
                    "label {} outside 0..={}",
                    p.max(g),
                    c
                )));
            }
            if p == g {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[g as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SegCounts) {
        for (a, b) in self.tp.iter_mut().zip(&other.tp) {
            *a += b;
        }
        for (a, b) in self.fp.iter_mut().zip(&other.fp) {
            *a += b;
        }
        for (a, b) in self.fn_.iter_mut().zip(&other.fn_) {
            *a += b;
        }
    }

    /// Foreground classes with at least one ground-truth pixel.
    fn scored(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.classes()).filter(|&c| self.tp[c] + self.fn_[c] > 0)
    }

    pub fn iou(&self, c: usize) -> f64 {
        let den = self.tp[c] + self.fp[c] + self.fn_[c];
        if den == 0 {
            0.0
        } else {
            self.tp[c] as f64 / den as f64
        }
    }

    pub fn precision(&self, c: usize) -> f64 {
        let den = self.tp[c] + self.fp[c];
        if den == 0 {
            0.0
        } else {
            self.tp[c] as f64 / den as f64
        }
    }

    pub fn recall(&self, c: usize) -> f64 {
        let den = self.tp[c] + self.fn_[c];
        if den == 0 {
            0.0
        } else {
            self.tp[c] as f64 / den as f64
        }
    }

    /// Mean IoU over foreground classes present in the ground truth.
    pub fn miou(&self) -> f64 {
        mean(self.scored().map(|c| self.iou(c)))
    }

    /// Mean F-measure over the same classes as [`SegCounts::miou`].
    pub fn f_beta(&self, beta2: f64) -> f64 {
        mean(
            self.scored()
                .map(|c| f_measure(self.precision(c), self.recall(c), beta2)),
        )
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Dataset-level mIoU over paired label maps.
pub fn miou(pred: &[Vec<u8>], gt: &[Vec<u8>], classes: usize) -> Result<f64> {
    Ok(counts(pred, gt, classes)?.miou())
}

/// Dataset-level F-measure over paired label maps.
pub fn f_beta(pred: &[Vec<u8>], gt: &[Vec<u8>], classes: usize, beta2: f64) -> Result<f64> {
    Ok(counts(pred, gt, classes)?.f_beta(beta2))
}

fn counts(pred: &[Vec<u8>], gt: &[Vec<u8>], classes: usize) -> Result<SegCounts> {
    if pred.len() != gt.len() {
        return Err(invalid("prediction and ground-truth sets differ in length"));
    }
    let mut c = SegCounts::new(classes);
    for (p, g) in pred.iter().zip(gt) {
        c.add(p, g)?;
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(rows: &[&[Option<u8>]]) -> AssignmentRecord {
        let mut r = AssignmentRecord::new(rows[0].len());
        for row in rows {
            r.push(row.to_vec()).unwrap();
        }
        r
    }

    #[test]
    fn sts_worked_example() {
        let r = record(&[&[Some(1), Some(2)], &[Some(2), Some(1)]]);
        let s = sts(&r, 2).unwrap();
        assert!((s.value - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sts_point_mass_and_uniform() {
        let rows: Vec<Vec<Option<u8>>> =
            (0..5).map(|_| vec![Some(1), None, Some(2), None]).collect();
        let r = record(&rows.iter().map(|v| v.as_slice()).collect::<Vec<_>>());
        assert_eq!(sts(&r, 2).unwrap().value, 0.0);

        let n = 4;
        let rows: Vec<Vec<Option<u8>>> = (0..n)
            .map(|d| {
                (0..n)
                    .map(|q| if q == d { Some(1) } else { None })
                    .collect()
            })
            .collect();
        let r = record(&rows.iter().map(|v| v.as_slice()).collect::<Vec<_>>());
        let s = sts(&r, 1).unwrap();
        assert!((s.value - libm::log(n as f64)).abs() < 1e-12);
    }

    #[test]
    fn sts_skips_unassigned_classes() {
        let r = record(&[&[Some(1), Some(2)], &[Some(2), Some(1)]]);
        let s = sts(&r, 4).unwrap();
        assert_eq!(s.per_class[2], None);
        assert!((s.value - core::f64::consts::LN_2 / 2.0).abs() < 1e-12);
        assert!(sts(&AssignmentRecord::new(2), 2).is_err());
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage(&[1, 2], &[2, 1]), 1.0);
        assert_eq!(coverage(&[1], &[3]), 0.0);
        assert!((coverage(&[1, 2], &[2, 3]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(coverage(&[], &[]), 1.0);
    }

    #[test]
    fn miou_fixtures() {
        let gt = vec![vec![0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]];
        assert_eq!(miou(&gt, &gt, 2).unwrap(), 1.0);
        assert_eq!(f_beta(&gt, &gt, 2, BETA_SQUARED).unwrap(), 1.0);
        let bg = vec![vec![0; 16]];
        assert_eq!(miou(&bg, &gt, 2).unwrap(), 0.0);
        // 2 of 4 gt pixels, no false positives
        let half = vec![vec![0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]];
        assert_eq!(miou(&half, &gt, 2).unwrap(), 0.5);
        assert_eq!(
            f_beta(&half, &gt, 2, BETA_SQUARED).unwrap(),
            1.3 * 0.5 / 0.8
        );
    }

    #[test]
    fn f_measure_examples() {
        assert!((f_measure(1.0, 0.5, 0.3) - 0.8125).abs() < 1e-15);
        assert_eq!(f_measure(0.0, 0.0, 0.3), 0.0);
    }

    proptest! {
        #[test]
        fn equal_precision_recall(p in 0.001f64..1.0) {
            prop_assert!((f_measure(p, p, BETA_SQUARED) - p).abs() < 1e-12);
        }

        #[test]
        fn scores_in_unit_range_and_order_free(
            maps in proptest::collection::vec(proptest::collection::vec((0u8..4, 0u8..4), 16), 1..6)
        ) {
            let pred: Vec<Vec<u8>> = maps.iter().map(|m| m.iter().map(|p| p.0).collect()).collect();
            let gt: Vec<Vec<u8>> = maps.iter().map(|m| m.iter().map(|p| p.1).collect()).collect();
            let a = miou(&pred, &gt, 3).unwrap();
            let f = f_beta(&pred, &gt, 3, BETA_SQUARED).unwrap();
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&f));
            let rp: Vec<Vec<u8>> = pred.iter().rev().cloned().collect();
            let rg: Vec<Vec<u8>> = gt.iter().rev().cloned().collect();
            prop_assert_eq!(a, miou(&rp, &rg, 3).unwrap());
            prop_assert_eq!(f, f_beta(&rp, &rg, 3, BETA_SQUARED).unwrap());
        }

        #[test]
        fn sts_bounded(rows in proptest::collection::vec(proptest::collection::vec(proptest::option::of(1u8..4), 5), 1..20)) {
            let mut r = AssignmentRecord::new(5);
            for row in rows {
                r.push(row).unwrap();
            }
            let s = sts(&r, 3).unwrap().value;
            prop_assert!(s >= 0.0 && s <= libm::log(5.0) + 1e-12);
        }
    }
}
