use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::audio::stft_magnitude;
use crate::ccdm::{Covariance, Mixture};
use crate::diffcore::grad_check;
use crate::model::ModelConfig;
use crate::rng::stream;
use crate::synth::{default_classes, generate_noise_pool, generate_scene, SynthConfig};

fn sets(pos: &[&[usize]], neg: &[&[usize]]) -> Vec<ContrastIndices> {
    pos.iter()
        .zip(neg)
        .map(|(p, n)| ContrastIndices {
            positives: p.to_vec(),
            negatives: n.to_vec(),
        })
        .collect()
}

fn nce_value(sims: Vec<f64>, cols: usize, s: &[ContrastIndices]) -> f64 {
    let mut t = Tape::<f64>::new();
    let v = t
        .constant(Array::new(&[s.len(), cols], sims).unwrap())
        .unwrap();
    let (l, _) = contrast::info_nce_on_similarities(&mut t, v, s).unwrap();
    t.value(l.unwrap()).item()
}

#[test]
fn info_nce_examples() {
    assert_eq!(nce_value(vec![10.0, 0.0], 2, &sets(&[&[0]], &[&[]])), 0.0);
    let l = nce_value(vec![3.0, 3.0], 2, &sets(&[&[0]], &[&[1]]));
    assert!((l - core::f64::consts::LN_2).abs() < 1e-15);
    let l = nce_value(vec![10.0, -10.0], 2, &sets(&[&[0]], &[&[1]]));
    assert!((l - 2.061_153_6e-9).abs() < 1e-15, "{l}");
}

#[test]
fn info_nce_on_normalised_features() {
    // f.f_p = 1 and f.f_n = -1 at temperature 0.1
    let mut t = Tape::<f64>::new();
    let a = t
        .constant(Array::new(&[1, 2], vec![3.0, 0.0]).unwrap())
        .unwrap();
    let f = t
        .constant(Array::new(&[2, 2], vec![0.5, 0.0, -2.0, 0.0]).unwrap())
        .unwrap();
    let (l, skipped) = info_nce(&mut t, a, f, &sets(&[&[0]], &[&[1]]), 0.1).unwrap();
    assert_eq!(skipped, 0);
    let expect = -libm::log(libm::exp(10.0) / (libm::exp(10.0) + libm::exp(-10.0)));
    assert!((t.value(l.unwrap()).item() - expect).abs() < 1e-15);
}

#[test]
fn info_nce_skips_anchors_without_positives() {
    let mut t = Tape::<f64>::new();
    let v = t
        .constant(Array::new(&[2, 2], vec![1.0, 0.0, 0.5, 0.2]).unwrap())
        .unwrap();
    let (l, skipped) =
        contrast::info_nce_on_similarities(&mut t, v, &sets(&[&[], &[0]], &[&[1], &[1]])).unwrap();
    assert_eq!(skipped, 1);
    let expect = libm::log1p(libm::exp(0.2 - 0.5));
    assert!((t.value(l.unwrap()).item() - expect).abs() < 1e-15);
    let (none, skipped) =
        contrast::info_nce_on_similarities(&mut t, v, &sets(&[&[], &[]], &[&[1], &[0]])).unwrap();
    assert!(none.is_none());
    assert_eq!(skipped, 2);
}

#[test]
fn pooling_examples() {
    let f = Array::new(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    assert_eq!(
        map_pool(&f, &[true, true, false, false]),
        (vec![2.0, 3.0], false)
    );
    assert_eq!(
        map_pool(&f, &[false, false, true, false]),
        (vec![5.0, 6.0], false)
    );
    assert_eq!(map_pool(&f, &[false; 4]), (vec![4.0, 5.0], true));
    assert_eq!(
        mmp_pool(&f, &[true, false, true, false]),
        (vec![5.0, 6.0], false)
    );
    let c = Array::new(&[3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
    assert_eq!(map_pool(&c, &[true, false, true]).0, vec![0.5, -1.0]);
}

#[test]
fn acp_examples() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Array::zeros(&[6, 2])).unwrap();
    let l = acp_loss(&mut t, z, &[0.5; 6]).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
    let mut last = f64::INFINITY;
    for s in [0.0, 2.0, 5.0, 10.0, 30.0] {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Array::full(&[6, 2], s)).unwrap();
        let l = acp_loss(&mut t, z, &[1.0; 6]).unwrap();
        let v = t.value(l).item();
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-20);
}

#[test]
fn acp_matches_reference() {
    let mut rng = stream(1, "acp", 0, 0);
    let m: Vec<f64> = (0..30).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let target: Vec<f32> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut expect = 0.0;
    for r in 0..10 {
        let s: f64 = m[r * 3..r * 3 + 3].iter().sum();
        let p = 1.0 / (1.0 + libm::exp(-s));
        expect += (p - target[r] as f64) * (p - target[r] as f64);
    }
    expect /= 10.0;
    let mut t = Tape::<f64>::new();
    let v = t.constant(Array::new(&[10, 3], m).unwrap()).unwrap();
    let l = acp_loss(&mut t, v, &target).unwrap();
    assert!((t.value(l).item() - expect).abs() < 1e-12);
}

#[test]
fn objective_gradients() {
    let mut rng = stream(2, "obj-grad", 0, 0);
    for _ in 0..20 {
        let k = rng.gen_range(1..4);
        let cells = rng.gen_range(3..12);
        let m = Array::new(
            &[cells, k],
            (0..cells * k).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let target: Vec<f32> = (0..cells).map(|_| rng.gen_range(0.0..1.0)).collect();
        let r = grad_check("acp", |t, v| acp_loss(t, v[0], &target), &[m], 1e-5).unwrap();
        assert!(r.passes(1e-5), "{r:?}");

        let d = 4;
        let p = rng.gen_range(3..9);
        let a = Array::new(
            &[k, d],
            (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let f = Array::new(
            &[p, d],
            (0..p * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let s: Vec<ContrastIndices> = (0..k)
            .map(|_| {
                let mut pos = Vec::new();
                let mut neg = Vec::new();
                for j in 0..p {
                    match rng.gen_range(0..3) {
                        0 => pos.push(j),
                        1 => neg.push(j),
                        _ => {}
                    }
                }
                if pos.is_empty() {
                    pos.push(0);
                }
                ContrastIndices {
                    positives: pos,
                    negatives: neg,
                }
            })
            .collect();
        let r = grad_check(
            "pcl",
            |t, v| Ok(info_nce(t, v[0], v[1], &s, 0.5)?.0.expect("positives")),
            &[a, f],
            1e-5,
        )
        .unwrap();
        assert!(r.passes(1e-5), "{r:?}");

        let labels: Vec<u8> = (0..8).map(|i| [0, 1, 1, 2, 2, 2, 0, 1][i]).collect();
        let gt = GroundTruthSet::from_labels(&labels);
        let classes: Vec<u8> = if rng.gen_bool(0.5) {
            vec![1, 2]
        } else {
            vec![2]
        };
        let masks = Array::new(
            &[classes.len(), 8],
            (0..classes.len() * 8)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect(),
        )
        .unwrap();
        let logits = Array::new(
            &[classes.len(), 4],
            (0..classes.len() * 4)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect(),
        )
        .unwrap();
        let r = grad_check(
            "vcp",
            |t, v| {
                let lp = t.log_softmax_rows(v[1])?;
                Ok(vcp_loss(t, v[0], lp, &gt, &classes, &MatchConfig::default())?.0)
            },
            &[masks, logits],
            1e-5,
        )
        .unwrap();
        assert!(r.passes(1e-5), "{r:?}");
    }
}

#[test]
fn vcp_matches_hand_assembly() {
    use crate::matching::{dice_value, focal_value};
    let labels = [0u8, 1, 1, 2, 2, 2, 0, 0];
    let gt = GroundTruthSet::from_labels(&labels);
    let mut rng = stream(3, "vcp", 0, 0);
    let masks = Array::new(
        &[2, 8],
        (0..16)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect::<Vec<f64>>(),
    )
    .unwrap();
    let logits = Array::new(
        &[2, 3],
        (0..6)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect::<Vec<f64>>(),
    )
    .unwrap();
    let mut t = Tape::new();
    let m = t.constant(masks.clone()).unwrap();
    let l = t.constant(logits.clone()).unwrap();
    let lp = t.log_softmax_rows(l).unwrap();
    let lpv = t.value(lp).clone();
    let (loss, _) = vcp_loss(&mut t, m, lp, &gt, &[2, 1], &MatchConfig::default()).unwrap();
    let tgt = |c: u8| -> Vec<f64> {
        labels
            .iter()
            .map(|&l| if l == c { 1.0 } else { 0.0 })
            .collect()
    };
    let ce = -(lpv.row(0)[1] + lpv.row(1)[0]) / 2.0;
    let mut mask = 0.0;
    for (r, c) in [(0usize, 2u8), (1, 1)] {
        mask +=
            focal_value(masks.row(r), &tgt(c), 0.25, 2.0) + dice_value(masks.row(r), &tgt(c), 1.0);
    }
    assert!((t.value(loss).item() - (ce + mask / 2.0)).abs() < 1e-12);
    assert!(vcp_loss(&mut t, m, lp, &gt, &[3, 1], &MatchConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pcl_scale_invariant(seed in 0u64..5000, scale in 0.1f64..20.0) {
        let mut rng = stream(seed, "scale", 0, 0);
        let a = Array::new(&[2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let f = Array::new(&[5, 3], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let s = sets(&[&[0, 1], &[2]], &[&[2, 3, 4], &[0, 4]]);
        let eval = |a: &Array<f64>, f: &Array<f64>| {
            let mut t = Tape::new();
            let av = t.constant(a.clone()).unwrap();
            let fv = t.constant(f.clone()).unwrap();
            let l = info_nce(&mut t, av, fv, &s, 0.1).unwrap().0.unwrap();
            t.value(l).item()
        };
        let base = eval(&a, &f);
        let scaled = eval(&a.map(|v| v * scale), &f.map(|v| v * scale));
        prop_assert!(base >= 0.0);
        prop_assert!((base - scaled).abs() < 1e-9 * (1.0 + base));
    }

    #[test]
    fn map_pool_in_hull(seed in 0u64..5000) {
        let mut rng = stream(seed, "hull", 0, 0);
        let f = Array::new(&[6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let mask: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.5)).collect();
        let (p, fallback) = map_pool(&f, &mask);
        for j in 0..3 {
            let sel: Vec<f64> = (0..6).filter(|&r| fallback || mask[r]).map(|r| f.row(r)[j]).collect();
            let lo = sel.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = sel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p[j] >= lo - 1e-12 && p[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn acp_in_unit_range(seed in 0u64..5000) {
        let mut rng = stream(seed, "acp-range", 0, 0);
        let m = Array::new(&[5, 2], (0..10).map(|_| rng.gen_range(-10.0..10.0)).collect::<Vec<f64>>()).unwrap();
        let target: Vec<f32> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut t = Tape::new();
        let v = t.constant(m).unwrap();
        let l = acp_loss(&mut t, v, &target).unwrap();
        prop_assert!((0.0..=1.0).contains(&t.value(l).item()));
    }
}

#[test]
fn stratified_negatives() {
    let labels: Vec<u8> = (0..100)
        .map(|i| {
            if i < 10 {
                1
            } else if i < 15 {
                2
            } else {
                0
            }
        })
        .collect();
    let mut rng = stream(4, "strat", 0, 0);
    let (union, s) = sample_contrast(&labels, &[1], 20, &mut rng);
    let negs: Vec<u8> = s[0].negatives.iter().map(|&i| labels[union[i]]).collect();
    assert_eq!(s[0].positives.len(), 10);
    assert_eq!(negs.len(), 20);
    assert_eq!(negs.iter().filter(|&&l| l == 2).count(), 5);
    assert_eq!(negs.iter().filter(|&&l| l == 0).count(), 15);
    assert!(s[0].positives.iter().all(|&i| labels[union[i]] == 1));
}

struct Fixture {
    model: SegModel<f64>,
    bank: GmmBank,
    inputs: SceneInputs<f64>,
    clean: Spectrogram,
    noise: Vec<Spectrogram>,
    labels: Vec<u8>,
    sounding: Vec<u8>,
}

fn fixture() -> Fixture {
    let cfg = ModelConfig {
        d_model: 8,
        ffn_hidden: 8,
        pixel_hidden: 4,
        ..ModelConfig::default()
    };
    let model = SegModel::<f64>::new(cfg.clone(), 1).unwrap();
    let scfg = SynthConfig::default();
    let classes = default_classes(4).unwrap();
    let scene = (0..50)
        .map(|i| generate_scene(&scfg, &classes, 2, i).unwrap())
        .find(|s| s.sounding().len() == 2)
        .unwrap();
    let clean = stft_magnitude(&scene.waveform).unwrap();
    let pool = generate_noise_pool(&classes, 3, 2);
    let noise = pool
        .clips
        .iter()
        .map(|w| stft_magnitude(w).unwrap())
        .collect();
    let inputs = SceneInputs::new(&cfg, &clean, &scene.image).unwrap();
    let mut bank = GmmBank::new(4, 8);
    let mut rng = stream(9, "bank", 0, 0);
    for s in 0..5 {
        let mu: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        bank.set(
            s,
            Mixture::new(Covariance::Diagonal, 8, vec![0.5, 0.5], mu, vec![0.5; 16]).unwrap(),
        )
        .unwrap();
    }
    Fixture {
        model,
        bank,
        inputs,
        clean,
        noise,
        labels: scene.labels.clone(),
        sounding: scene.sounding(),
    }
}

fn run_cpm(fx: &Fixture, cfg: &CpmConfig, seed: u64, bank: &GmmBank) -> (Option<f64>, CpmParts) {
    let mut t = Tape::new();
    let b = fx.model.bind(&mut t).unwrap();
    let audio = fx.model.encode_audio(&mut t, &b, &fx.inputs).unwrap();
    let visual = fx.model.encode_visual(&mut t, &b, &fx.inputs).unwrap();
    let scene = CpmScene {
        inputs: &fx.inputs,
        clean: &fx.clean,
        labels: &fx.labels,
        sounding: &fx.sounding,
        audio,
        visual,
    };
    let mut rng = stream(seed, "cpm", 0, 0);
    let out = cpm_loss(
        &mut t,
        &fx.model,
        &b,
        Head::Mixture(bank),
        bank,
        &fx.noise,
        &scene,
        cfg,
        &MatchConfig::default(),
        &mut rng,
    )
    .unwrap();
    (out.loss.map(|l| t.value(l).item()), out.parts)
}

#[test]
fn cpm_composition_and_gate() {
    let fx = fixture();
    let cfg = CpmConfig::default();
    let (total, parts) = run_cpm(&fx, &cfg, 5, &fx.bank);
    let total = total.unwrap();
    assert!(total.is_finite());
    assert_eq!(total, parts.acp + parts.vcp + parts.pcl);
    assert!(parts.acp > 0.0 && parts.vcp > 0.0 && parts.pcl > 0.0);
    // same seed, same value
    assert_eq!(run_cpm(&fx, &cfg, 5, &fx.bank).0.unwrap(), total);

    let warm = GmmBank::new(4, 8);
    let (none, _) = run_cpm(&fx, &cfg, 5, &warm);
    assert!(none.is_none());

    let only_vcp = CpmConfig {
        acp: false,
        pcl: false,
        ..CpmConfig::default()
    };
    let (v, p) = run_cpm(&fx, &only_vcp, 5, &fx.bank);
    assert_eq!(v.unwrap(), p.vcp);
    assert_eq!(p.vcp, parts.vcp);
    let max = CpmConfig {
        pooling: Pooling::Max,
        ..CpmConfig::default()
    };
    let (m, mp) = run_cpm(&fx, &max, 5, &fx.bank);
    assert!(m.unwrap().is_finite());
    assert_eq!(mp.acp, parts.acp);
}
