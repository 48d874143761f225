use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::diffcore::grad_check;
use crate::rng::stream;

fn brute_force(cost: &[f64], n: usize) -> f64 {
    fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

#[test]
fn hungarian_small_examples() {
    let (cols, c) = hungarian(&[0.0, 1.0, 1.0, 0.0], 2).unwrap();
    assert_eq!((cols, c), (vec![0, 1], 0.0));
    let (cols, c) = hungarian(&[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0], 3).unwrap();
    assert_eq!(cols, vec![1, 0, 2]);
    assert_eq!(c, 5.0);
}

#[test]
fn hungarian_matches_enumeration() {
    let mut rng = stream(1, "hungarian", 0, 0);
    for n in 2..=7 {
        for _ in 0..200 {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (cols, total) = hungarian(&cost, n).unwrap();
            let mut seen = cols.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert!((total - brute_force(&cost, n)).abs() < 1e-9);
        }
    }
}

#[test]
fn hungarian_rejects_bad_input() {
    assert!(hungarian(&[0.0, f64::NAN, 1.0, 2.0], 2).is_err());
    assert!(hungarian(&[0.0; 3], 2).is_err());
}

#[test]
fn dice_examples() {
    assert_eq!(dice_from_probs(&[1.0; 4], &[1.0; 4], 1.0), 0.0);
    assert!((dice_from_probs(&[0.0; 4], &[1.0; 4], 1.0) - 0.8).abs() < 1e-15);
}

#[test]
fn ce_zero_on_one_hot() {
    let mut t = Tape::<f64>::new();
    let lp = t
        .constant(Array::new(&[2, 3], vec![0.0, -60.0, -60.0, -50.0, -50.0, 0.0]).unwrap())
        .unwrap();
    let ce = ce_loss(&mut t, lp, &[0, 2], 2, 0.1).unwrap();
    assert_eq!(t.value(ce).item(), 0.0);
}

#[test]
fn ce_weights_null_rows() {
    let mut t = Tape::<f64>::new();
    let lp = t
        .constant(Array::new(&[2, 2], vec![-1.0, -2.0, -3.0, -4.0]).unwrap())
        .unwrap();
    let ce = ce_loss(&mut t, lp, &[0, 1], 1, 0.1).unwrap();
    assert!((t.value(ce).item() - (1.0 + 0.1 * 4.0) / 1.1).abs() < 1e-12);
}

fn random_logits(rng: &mut impl Rng, rows: usize, cols: usize) -> Array<f64> {
    Array::new(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect(),
    )
    .unwrap()
}

fn random_targets(rng: &mut impl Rng, rows: usize, cols: usize) -> Array<f64> {
    Array::new(
        &[rows, cols],
        (0..rows * cols)
            .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap()
}

#[test]
fn loss_gradients() {
    let mut rng = stream(2, "loss-grad", 0, 0);
    for _ in 0..20 {
        let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..9));
        let x = random_logits(&mut rng, r, c);
        let tg = random_targets(&mut rng, r, c);
        let f = grad_check(
            "focal",
            |t, v| focal_loss(t, v[0], &tg, 0.25, 2.0),
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(f.passes(1e-5), "{f:?}");
        let d = grad_check(
            "dice",
            |t, v| dice_loss(t, v[0], &tg, 1.0),
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(d.passes(1e-5), "{d:?}");
        let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
        let ce = grad_check(
            "ce",
            |t, v| {
                let lp = t.log_softmax_rows(v[0])?;
                ce_loss(t, lp, &labels, c - 1, 0.1)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(ce.passes(1e-5), "{ce:?}");
    }
}

#[test]
fn focal_matches_reference_formula() {
    for &x in &[-4.0, -0.3, 0.0, 1.7, 6.0] {
        for &t in &[false, true] {
            let p = 1.0 / (1.0 + libm::exp(-x));
            let (pt, at) = if t { (p, 0.25) } else { (1.0 - p, 0.75) };
            let expect = -at * (1.0 - pt) * (1.0 - pt) * libm::log(pt);
            assert!((focal_term(x, t, 0.25, 2.0).0 - expect).abs() < 1e-12);
        }
    }
}

fn gt_from(labels: &[u8]) -> GroundTruthSet {
    GroundTruthSet::from_labels(labels)
}

#[test]
fn cost_examples() {
    let cfg = MatchConfig::default();
    let gt = gt_from(&[1, 1, 0, 0]);
    let probs = Array::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let masks = Array::new(&[2, 4], vec![60.0, 60.0, -60.0, -60.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let cost = matching_cost(&probs, &masks, &gt, &cfg).unwrap();
    assert!((cost[0] + 2.0).abs() < 1e-12, "{cost:?}");
    assert_eq!(cost[3], -2.0);
}

#[test]
fn cost_matches_reference_evaluator() {
    let cfg = MatchConfig::default();
    let mut rng = stream(3, "cost", 0, 0);
    let labels: Vec<u8> = (0..16)
        .map(|i| {
            if i < 5 {
                1
            } else if i < 9 {
                3
            } else {
                0
            }
        })
        .collect();
    let gt = gt_from(&labels);
    let probs_raw: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(0.1..1.0)).collect();
    let mut probs = Array::new(&[3, 4], probs_raw).unwrap();
    for i in 0..3 {
        let s: f64 = probs.row(i).iter().sum();
        probs.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    let masks = random_logits(&mut rng, 3, 16);
    let cost = matching_cost(&probs, &masks, &gt, &cfg).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let expect = if j < 2 {
                let c = [1usize, 3][j];
                let tgt: Vec<f64> = labels
                    .iter()
                    .map(|&l| if l as usize == c { 1.0 } else { 0.0 })
                    .collect();
                let s: Vec<f64> = masks
                    .row(i)
                    .iter()
                    .map(|&x| 1.0 / (1.0 + libm::exp(-x)))
                    .collect();
                let mut focal = 0.0;
                for k in 0..16 {
                    let p = s[k];
                    let (pt, at) = if tgt[k] > 0.5 {
                        (p, 0.25)
                    } else {
                        (1.0 - p, 0.75)
                    };
                    focal += -at * (1.0 - pt) * (1.0 - pt) * libm::log(pt);
                }
                focal /= 16.0;
                let inter: f64 = s.iter().zip(&tgt).map(|(a, b)| a * b).sum();
                let dice = 1.0
                    - (2.0 * inter + 1.0) / (s.iter().sum::<f64>() + tgt.iter().sum::<f64>() + 1.0);
                -2.0 * probs.row(i)[c - 1] + 5.0 * focal + 5.0 * dice
            } else {
                -2.0 * probs.row(i)[3]
            };
            assert!((cost[i * 3 + j] - expect).abs() < 1e-10);
        }
    }
}

fn tape_loss(
    masks: &Array<f64>,
    logits: &Array<f64>,
    gt: &GroundTruthSet,
) -> (f64, SetLoss, Assignment) {
    let mut t = Tape::new();
    let m = t.constant(masks.clone()).unwrap();
    let l = t.constant(logits.clone()).unwrap();
    let lp = t.log_softmax_rows(l).unwrap();
    let (loss, parts, a) = loss_agn(&mut t, m, lp, gt, &MatchConfig::default()).unwrap();
    (t.value(loss).item(), parts, a)
}

#[test]
fn perfect_prediction_has_small_loss() {
    let labels = [2u8, 2, 0, 0, 0, 1, 1, 0];
    let gt = gt_from(&labels);
    let masks = Array::new(
        &[3, 8],
        labels
            .iter()
            .map(|&l| if l == 1 { 40.0 } else { -40.0 })
            .chain(labels.iter().map(|&l| if l == 2 { 40.0 } else { -40.0 }))
            .chain([-40.0; 8])
            .collect(),
    )
    .unwrap();
    let logits = Array::new(
        &[3, 3],
        vec![40.0, 0.0, 0.0, 0.0, 40.0, 0.0, 0.0, 0.0, 40.0],
    )
    .unwrap();
    let (loss, parts, a) = tape_loss(&masks, &logits, &gt);
    assert_eq!(a.targets, vec![Some(0), Some(1), None]);
    assert!(loss < 1e-12, "{loss} {parts:?}");
}

#[test]
fn padding_semantics() {
    let labels = [0u8, 3, 3, 0];
    let gt = gt_from(&labels);
    let mut rng = stream(4, "pad", 0, 0);
    let masks = random_logits(&mut rng, 3, 4);
    let logits = random_logits(&mut rng, 3, 4);
    let (_, _, a) = tape_loss(&masks, &logits, &gt);
    assert_eq!(a.targets.iter().filter(|t| t.is_some()).count(), 1);
    assert_eq!(a.targets.iter().filter(|t| t.is_none()).count(), 2);
}

fn permute(a: &Array<f64>, perm: &[usize]) -> Array<f64> {
    Array::new(
        a.shape(),
        perm.iter().flat_map(|&i| a.row(i).to_vec()).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_invariant_to_query_order(seed in 0u64..10_000, rot in 1usize..4) {
        let mut rng = stream(seed, "perm", 0, 0);
        let labels: Vec<u8> = (0..12).map(|_| rng.gen_range(0..4)).collect();
        let gt = gt_from(&labels);
        prop_assume!(!gt.is_empty());
        let masks = random_logits(&mut rng, 4, 12);
        let logits = random_logits(&mut rng, 4, 4);
        let perm: Vec<usize> = (0..4).map(|i| (i + rot) % 4).collect();
        let (a, _, _) = tape_loss(&masks, &logits, &gt);
        let (b, _, _) = tape_loss(&permute(&masks, &perm), &permute(&logits, &perm), &gt);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn losses_bounded(seed in 0u64..10_000) {
        let mut rng = stream(seed, "bounds", 0, 0);
        let x = random_logits(&mut rng, 2, 10);
        let tg = random_targets(&mut rng, 2, 10);
        let mut t = Tape::new();
        let v = t.constant(x).unwrap();
        let f = focal_loss(&mut t, v, &tg, 0.25, 2.0).unwrap();
        let d = dice_loss(&mut t, v, &tg, 1.0).unwrap();
        prop_assert!(t.value(f).item() >= 0.0);
        prop_assert!((0.0..=2.0).contains(&t.value(d).item()));
        let d1 = dice_from_probs(&[0.3, 0.9], &[1.0, 0.0], 1.0);
        prop_assert!((0.0..=1.0).contains(&d1));
    }
}

#[test]
fn gt_permutation_invariance() {
    // permuting gt entries is the same as relabelling the matched columns
    let labels = [1u8, 1, 2, 2, 0, 3, 3, 0];
    let gt = gt_from(&labels);
    let mut swapped = gt.clone();
    swapped.labels.reverse();
    let rows: Vec<f32> = (0..3)
        .rev()
        .flat_map(|j| gt.masks.row(j).to_vec())
        .collect();
    swapped.masks = Array::new(gt.masks.shape(), rows).unwrap();
    let mut rng = stream(5, "gtperm", 0, 0);
    let masks = random_logits(&mut rng, 5, 8);
    let logits = random_logits(&mut rng, 5, 4);
    let (a, _, _) = tape_loss(&masks, &logits, &gt);
    let (b, _, _) = tape_loss(&masks, &logits, &swapped);
    assert!((a - b).abs() < 1e-12);
}
