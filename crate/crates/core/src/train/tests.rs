use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::ccdm::{Covariance, Mixture};
use crate::metrics::SegCounts;
use crate::model::PredictionSet;
use crate::synth::{generate, SynthConfig};

fn tiny_cfg() -> TrainConfig {
    let mut cfg = TrainConfig {
        seed: 3,
        epochs: 2,
        batch_size: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig {
        classes: 2,
        d_model: 6,
        queries: 3,
        ffn_hidden: 5,
        pixel_hidden: 3,
        height: 16,
        width: 16,
        ..ModelConfig::default()
    };
    cfg.gmm.components = 1;
    cfg.gmm.warmup_per_component = 2;
    cfg.gmm.bank_size = 16;
    cfg
}

fn tiny_data() -> TrainData {
    let scfg = SynthConfig {
        classes: 2,
        height: 16,
        width: 16,
        scenes: 8,
        noise_pool: 3,
        min_extent: 4,
        max_extent: 8,
        test_fraction: 0.25,
        ..SynthConfig::default()
    };
    TrainData::new(generate(&scfg, 11).unwrap()).unwrap()
}

fn ready_bank(state: &mut RunState, d: usize) {
    for s in 0..state.gmm.null_slot() + 1 {
        let means = (0..d).map(|i| 0.1 * (s * d + i) as f64).collect();
        let m = Mixture::new(Covariance::Diagonal, d, vec![1.0], means, vec![0.5; d]).unwrap();
        state.gmm.set(s, m).unwrap();
    }
}

fn losses(
    cfg: &TrainConfig,
    data: &TrainData,
    mut state: RunState,
    steps: usize,
) -> (Vec<f64>, RunState) {
    let train = data.set.train.clone();
    let mut out = Vec::new();
    for i in 0..steps {
        let j = (2 * i) % train.len();
        let batch = [train[j], train[(j + 1) % train.len()]];
        let r = train_step(&mut state, data, &batch, cfg).unwrap();
        assert!(!r.aborted);
        out.push(r.loss);
    }
    (out, state)
}

#[test]
fn lr_schedule_examples() {
    assert_eq!(lr_schedule(0, 100, 1e-4, 0.9).unwrap(), 1e-4);
    assert_eq!(lr_schedule(100, 100, 1e-4, 0.9).unwrap(), 0.0);
    let half = lr_schedule(50, 100, 1.0, 0.9).unwrap();
    assert!((half - libm::pow(0.5, 0.9)).abs() < 1e-15);
    assert!((half - 0.5359).abs() < 1e-4);
    assert!(lr_schedule(0, 0, 1e-4, 0.9).is_err());
    assert!(lr_schedule(5, 4, 1e-4, 0.9).is_err());
}

#[test]
fn adamw_first_step_is_sign_step() {
    let p0 = Array::new(&[3], vec![1.0f32, -2.0, 0.5]).unwrap();
    let g = Array::new(&[3], vec![0.3f32, -4.0, 0.0]).unwrap();
    let mut params = vec![p0.clone()];
    let mut opt = AdamW::new(&params, 0.9, 0.999, 1e-8, 0.0);
    opt.step(&mut params, &[g], 0.01);
    let d: Vec<f32> = params[0]
        .data()
        .iter()
        .zip(p0.data())
        .map(|(a, b)| a - b)
        .collect();
    assert!((d[0] + 0.01).abs() < 1e-6);
    assert!((d[1] - 0.01).abs() < 1e-6);
    assert_eq!(d[2], 0.0);
}

#[test]
fn adamw_decay_is_decoupled() {
    let mut params = vec![Array::new(&[1], vec![2.0f32]).unwrap()];
    let mut opt = AdamW::new(&params, 0.9, 0.999, 1e-8, 0.1);
    opt.step(&mut params, &[Array::zeros(&[1])], 0.5);
    assert!((params[0].data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-6);
}

#[test]
fn zero_lambda_is_agnostic_loss() {
    let data = tiny_data();
    let cfg = TrainConfig {
        lambda: 0.0,
        ccdm: false,
        ..tiny_cfg()
    };
    let mut state = RunState::new(&cfg).unwrap();
    ready_bank(&mut state, cfg.model.d_model);
    let base = TrainConfig {
        seed: cfg.seed,
        ..TrainConfig::baseline()
    };
    let base = TrainConfig {
        model: cfg.model.clone(),
        gmm: cfg.gmm.clone(),
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        ..base
    };
    let (a, _) = losses(&cfg, &data, state.clone(), 2);
    let (b, _) = losses(&base, &data, state, 2);
    assert_eq!(a, b);
}

#[test]
fn warmup_gate_blocks_prompting() {
    let data = tiny_data();
    let cfg = tiny_cfg();
    let mut state = RunState::new(&cfg).unwrap();
    let batch = [data.set.train[0], data.set.train[1]];
    let r = train_step(&mut state, &data, &batch, &cfg).unwrap();
    assert_eq!(r.cpm_scenes, 0);
    assert_eq!(r.cpm, CpmParts::default());
    let expect = (r.agn.ce + r.agn.focal + r.agn.dice) as f32;
    assert!((r.loss as f32 - expect).abs() < 1e-4 * expect.abs().max(1.0));
    assert_eq!(state.gmm.draws(), 0);
}

#[test]
fn prompting_runs_once_ready() {
    let data = tiny_data();
    let cfg = tiny_cfg();
    let mut state = RunState::new(&cfg).unwrap();
    ready_bank(&mut state, cfg.model.d_model);
    let batch = [data.set.train[0], data.set.train[1]];
    let r = train_step(&mut state, &data, &batch, &cfg).unwrap();
    assert!(r.cpm_scenes > 0);
    assert!(r.cpm.acp > 0.0);
    assert!(state.gmm.draws() > 0);
    assert!(r.loss.is_finite());
}

#[test]
fn alternating_steps_split_objectives() {
    let data = tiny_data();
    let cfg = TrainConfig {
        alternate: true,
        ..tiny_cfg()
    };
    let mut state = RunState::new(&cfg).unwrap();
    ready_bank(&mut state, cfg.model.d_model);
    let batch = [data.set.train[0], data.set.train[1]];
    let first = train_step(&mut state, &data, &batch, &cfg).unwrap();
    let second = train_step(&mut state, &data, &batch, &cfg).unwrap();
    assert_eq!(first.cpm_scenes, 0);
    assert!(first.agn.dice > 0.0);
    assert!(second.cpm_scenes > 0);
    assert_eq!(second.agn, SetLoss::default());
}

#[test]
fn steps_record_and_fill_memory() {
    let data = tiny_data();
    let cfg = tiny_cfg();
    let (_, state) = losses(&cfg, &data, RunState::new(&cfg).unwrap(), 2);
    assert_eq!(state.record.len(), 4);
    // Every query lands in exactly one slot.
    let stored: usize = (0..cfg.model.classes + 1)
        .map(|s| state.memory.len(s))
        .sum();
    assert_eq!(stored, 4 * cfg.model.queries);
    assert_eq!(state.step, 2);
    assert_eq!(state.optimizer.t, 2);
}

#[test]
fn fixed_seed_is_deterministic() {
    let data = tiny_data();
    let cfg = tiny_cfg();
    let (a, sa) = losses(&cfg, &data, RunState::new(&cfg).unwrap(), 10);
    let (b, sb) = losses(&cfg, &data, RunState::new(&cfg).unwrap(), 10);
    assert_eq!(a, b);
    assert!(sa == sb);
}

#[test]
fn state_arrays_round_trip() {
    let data = tiny_data();
    let cfg = tiny_cfg();
    let (_, mut state) = losses(&cfg, &data, RunState::new(&cfg).unwrap(), 3);
    epoch_end(&mut state, &cfg).unwrap();
    let (_, state) = losses(&cfg, &data, state, 1);
    let back = RunState::from_arrays(
        &cfg,
        &state.f32_arrays(),
        &state.f64_arrays(),
        state.epoch,
        state.step,
        state.optimizer.t,
    )
    .unwrap();
    assert!(back == state);
    let (a, _) = losses(&cfg, &data, state, 5);
    let (b, _) = losses(&cfg, &data, back, 5);
    assert_eq!(a, b);
}

#[test]
fn epoch_end_degenerate_and_refit() {
    let data = tiny_data();
    let cfg = tiny_cfg();
    let mut empty = RunState::new(&cfg).unwrap();
    let end = epoch_end(&mut empty, &cfg).unwrap();
    assert_eq!(end.sts, None);
    assert_eq!(empty.epoch, 1);

    let mut state = RunState::new(&cfg).unwrap();
    let e = train_epoch(&mut state, &data, &cfg).unwrap();
    assert!(e.sts.is_some());
    assert!(state.record.is_empty());
    assert_eq!(state.sts_history.len(), 1);
    // Fill each slot enough to refit.
    let mut rng = stream(0, "test", 0, 0);
    for s in 0..cfg.model.classes + 1 {
        for _ in 0..4 {
            let v = (0..cfg.model.d_model)
                .map(|_| crate::rng::normal(&mut rng) + s as f64)
                .collect();
            state.memory.push(s, v).unwrap();
        }
    }
    let end = epoch_end(&mut state, &cfg).unwrap();
    assert_eq!(end.unfitted, 0);
    assert!(state.gmm.is_ready());
    let mut rng = stream(1, "test", 0, 0);
    for _ in 0..20 {
        let z: Vec<f64> = (0..cfg.model.d_model)
            .map(|_| 2.0 * crate::rng::normal(&mut rng))
            .collect();
        let (p, _) = state.gmm.posterior(&z).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn evaluate_is_defined_repeatable_and_prompt_free() {
    let mut data = tiny_data();
    data.noise.clear();
    let cfg = tiny_cfg();
    let mut state = RunState::new(&cfg).unwrap();
    ready_bank(&mut state, cfg.model.d_model);
    let test = data.set.test.clone();
    let a = evaluate(&state, &data, &test, &cfg).unwrap();
    let b = evaluate(&state, &data, &test, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(state.gmm.draws(), 0);
    for v in [a.miou, a.f_beta, a.coverage] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(a.scenes, test.len());
}

#[test]
fn oracle_predictions_score_one() {
    let data = tiny_data();
    let c = 2;
    let mut counts = SegCounts::new(c);
    for scene in &data.set.scenes {
        let gt = GroundTruthSet::from_labels(&scene.labels);
        let hw = scene.labels.len();
        let n = c + 1;
        let mut masks = vec![-10.0f32; n * hw];
        let mut probs = vec![0.0f32; n * (c + 1)];
        for q in 0..n {
            match gt.labels.get(q) {
                Some(&k) => {
                    for (p, &m) in gt.masks.row(q).iter().enumerate() {
                        masks[q * hw + p] = if m > 0.5 { 10.0 } else { -10.0 };
                    }
                    probs[q * (c + 1) + k as usize - 1] = 1.0;
                }
                None => probs[q * (c + 1) + c] = 1.0,
            }
        }
        let pred = PredictionSet {
            masks: Array::new(&[n, 16, 16], masks).unwrap(),
            probs: Array::new(&[n, c + 1], probs).unwrap(),
            embeddings: Array::zeros(&[n, 1]),
        };
        counts.add(&merge_inference(&pred), &scene.labels).unwrap();
    }
    assert_eq!(counts.miou(), 1.0);
    assert_eq!(counts.f_beta(BETA_SQUARED), 1.0);
}

#[test]
fn separation_report_needs_fitted_bank() {
    let data = tiny_data();
    let cfg = tiny_cfg();
    let mut state = RunState::new(&cfg).unwrap();
    assert_eq!(
        evaluate_separation(&state, &data, &data.set.test, &cfg).unwrap(),
        None
    );
    ready_bank(&mut state, cfg.model.d_model);
    let r = evaluate_separation(&state, &data, &data.set.test, &cfg)
        .unwrap()
        .unwrap();
    assert!(r.mse.is_finite() && r.constant_mse > 0.0);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig {
        lambda: -1.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    let mut c = TrainConfig::default();
    c.cpm.temperature = 0.0;
    assert!(c.validate().is_err());
    assert!(TrainConfig {
        power: 0.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
}
