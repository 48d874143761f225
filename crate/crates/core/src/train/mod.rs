//! Training loop: class-agnostic set loss plus weighted prompting
//! objectives, AdamW with polynomial decay, epoch-level mixture refits and
//! evaluation.

mod optim;
mod state;
#[cfg(test)]
mod tests;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::audio::{mix, ratio_target, stft_magnitude, Spectrogram};
use crate::ccdm::GmmConfig;
use crate::diffcore::{Array, Tape};
use crate::error::{invalid, Result};
use crate::matching::{loss_agn, GroundTruthSet, MatchConfig, SetLoss};
use crate::metrics::{coverage, sts, SegCounts, BETA_SQUARED};
use crate::model::{merge_inference, Head, ModelConfig, SceneInputs};
use crate::objectives::{acp_loss, cpm_loss, CpmConfig, CpmParts, CpmScene};
use crate::rng::{permutation, stream};
use crate::synth::SyntheticSet;

pub use optim::{lr_schedule, AdamW};
pub use state::RunState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the prompting objectives.
    pub lambda: f64,
    /// Mixture posterior as the class head once fitted.
    pub ccdm: bool,
    /// Alternate class-agnostic and prompting steps instead of summing them.
    pub alternate: bool,
    pub cpm: CpmConfig,
    pub gmm: GmmConfig,
    pub matching: MatchConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 60,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 1e-4,
            power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.5,
            ccdm: true,
            alternate: false,
            cpm: CpmConfig::default(),
            gmm: GmmConfig::default(),
            matching: MatchConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The plain set-prediction baseline: softmax head, no prompting.
    pub fn baseline() -> Self {
        let mut c = Self {
            ccdm: false,
            ..Self::default()
        };
        c.cpm.acp = false;
        c.cpm.vcp = false;
        c.cpm.pcl = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.lambda < 0.0 || self.cpm.temperature <= 0.0 || self.power <= 0.0 {
            return Err(invalid("lambda must be >= 0, temperature and power > 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid("batch size and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.gmm.momentum) || self.gmm.components == 0 {
            return Err(invalid(
                "mixture momentum must be in [0, 1) and components > 0",
            ));
        }
        Ok(())
    }

    /// Whether the memory bank and mixtures are maintained at all.
    pub fn uses_mixtures(&self) -> bool {
        self.ccdm || self.cpm.any()
    }
}

/// Scenes with their spectrograms, ready for training.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub set: SyntheticSet,
    pub spectra: Vec<Spectrogram>,
    pub noise: Vec<Spectrogram>,
}

impl TrainData {
    pub fn new(set: SyntheticSet) -> Result<Self> {
        let spectra = set
            .scenes
            .iter()
            .map(|s| stft_magnitude(&s.waveform))
            .collect::<Result<Vec<_>>>()?;
        let noise = set
            .noise
            .clips
            .iter()
            .map(stft_magnitude)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            set,
            spectra,
            noise,
        })
    }

    pub fn classes(&self) -> usize {
        self.set.num_classes()
    }

    pub fn inputs(&self, cfg: &ModelConfig, i: usize) -> Result<SceneInputs<f32>> {
        SceneInputs::new(cfg, &self.spectra[i], &self.set.scenes[i].image)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub agn: SetLoss,
    pub cpm: CpmParts,
    /// Scenes whose prompting objectives ran.
    pub cpm_scenes: usize,
    pub lr: f64,
    /// The update was skipped because the loss was not finite.
    pub aborted: bool,
}

/// One optimiser step over `batch` (scene indices).
pub fn train_step(
    state: &mut RunState,
    data: &TrainData,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let total_steps = cfg.epochs * steps_per_epoch(data.set.train.len(), cfg.batch_size);
    let lr = lr_schedule(state.step.min(total_steps), total_steps, cfg.lr, cfg.power)?;
    let mut report = StepReport {
        lr,
        ..StepReport::default()
    };
    let mut acc = state.model.params().zeros_like();
    let scale = 1.0 / batch.len() as f32;
    let ready = cfg.uses_mixtures() && state.gmm.is_ready();
    let head = if cfg.ccdm && ready {
        Head::Mixture(&state.gmm)
    } else {
        Head::Softmax
    };
    let (do_agn, do_cpm) = if cfg.alternate && ready && cfg.cpm.any() {
        (state.step % 2 == 0, state.step % 2 == 1)
    } else {
        (true, ready && cfg.cpm.any() && cfg.lambda > 0.0)
    };
    let mut pending: Vec<(Vec<Option<u8>>, Vec<(usize, Vec<f64>)>)> =
        Vec::with_capacity(batch.len());
    let n_slots = cfg.model.classes + 1;
    for &idx in batch {
        let scene = &data.set.scenes[idx];
        let inputs = data.inputs(&cfg.model, idx)?;
        let mut tape = Tape::new();
        let b = state.model.bind(&mut tape)?;
        let f = state.model.forward(&mut tape, &b, &inputs, head)?;
        let gt = GroundTruthSet::from_labels(&scene.labels);
        let (agn, parts, assignment) =
            loss_agn(&mut tape, f.masks, f.log_probs, &gt, &cfg.matching)?;
        let mut total = if do_agn { Some(agn) } else { None };
        if do_agn {
            report.agn.ce += parts.ce / batch.len() as f64;
            report.agn.focal += parts.focal / batch.len() as f64;
            report.agn.dice += parts.dice / batch.len() as f64;
        }
        if do_cpm {
            let sounding = scene.sounding();
            let cs = CpmScene {
                inputs: &inputs,
                clean: &data.spectra[idx],
                labels: &scene.labels,
                sounding: &sounding,
                audio: f.audio,
                visual: f.visual,
            };
            let mut rng = stream(cfg.seed, "cpm", state.step as u64, idx as u64);
            let out = cpm_loss(
                &mut tape,
                &state.model,
                &b,
                head,
                &state.gmm,
                &data.noise,
                &cs,
                &cfg.cpm,
                &cfg.matching,
                &mut rng,
            )?;
            if let Some(l) = out.loss {
                let w = tape.scale(l, cfg.lambda as f32)?;
                total = Some(match total {
                    Some(t) => tape.add(t, w)?,
                    None => w,
                });
                report.cpm_scenes += 1;
                report.cpm.acp += out.parts.acp / batch.len() as f64;
                report.cpm.vcp += out.parts.vcp / batch.len() as f64;
                report.cpm.pcl += out.parts.pcl / batch.len() as f64;
                report.cpm.pcl_skipped += out.parts.pcl_skipped;
                report.cpm.saliency_fallbacks += out.parts.saliency_fallbacks;
            }
        }
        if let Some(total) = total {
            let v = tape.value(total).item() as f64;
            report.loss += v / batch.len() as f64;
            if !v.is_finite() {
                report.aborted = true;
                break;
            }
            let grads = tape.backward(total)?;
            b.accumulate(&grads, scale, &mut acc);
        }
        let classes = assignment.classes(&gt);
        let emb = tape.value(f.embeddings);
        let pushes = classes
            .iter()
            .enumerate()
            .map(|(q, c)| {
                let slot = c.map_or(n_slots - 1, |c| c as usize - 1);
                (slot, emb.row(q).iter().map(|&v| v as f64).collect())
            })
            .collect();
        pending.push((classes, pushes));
    }
    if report.aborted || !acc.iter().all(|a| a.all_finite()) {
        report.aborted = true;
        state.step += 1;
        return Ok(report);
    }
    for (classes, pushes) in pending {
        state.record.push(classes)?;
        if cfg.uses_mixtures() {
            for (slot, e) in pushes {
                state.memory.push(slot, e)?;
            }
        }
    }
    state
        .optimizer
        .step(state.model.params_mut().values_mut(), &acc, lr as f32);
    state.step += 1;
    Ok(report)
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: Vec<StepReport>,
    pub mean_loss: f64,
    pub agn: SetLoss,
    pub cpm: CpmParts,
    /// Stability score of this epoch's assignments.
    pub sts: Option<f64>,
    /// Mixture slots left unfitted at the epoch boundary.
    pub unfitted: usize,
    pub gmm_ready: bool,
}

/// Runs every step of the current epoch, then [`epoch_end`].
pub fn train_epoch(
    state: &mut RunState,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<EpochReport> {
    let train = &data.set.train;
    let mut rng = stream(cfg.seed, "order", state.epoch as u64, 0);
    let order: Vec<usize> = permutation(&mut rng, train.len())
        .into_iter()
        .map(|i| train[i])
        .collect();
    let mut steps = Vec::new();
    for batch in order.chunks(cfg.batch_size) {
        steps.push(train_step(state, data, batch, cfg)?);
    }
    let n = steps.len().max(1) as f64;
    let mut report = EpochReport {
        epoch: state.epoch,
        mean_loss: steps.iter().map(|s| s.loss).sum::<f64>() / n,
        ..EpochReport::default()
    };
    for s in &steps {
        report.agn.ce += s.agn.ce / n;
        report.agn.focal += s.agn.focal / n;
        report.agn.dice += s.agn.dice / n;
        report.cpm.acp += s.cpm.acp / n;
        report.cpm.vcp += s.cpm.vcp / n;
        report.cpm.pcl += s.cpm.pcl / n;
    }
    report.steps = steps;
    let end = epoch_end(state, cfg)?;
    report.sts = end.sts;
    report.unfitted = end.unfitted;
    report.gmm_ready = state.gmm.is_ready();
    Ok(report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochEnd {
    pub sts: Option<f64>,
    pub unfitted: usize,
}

/// Refits the mixtures (once every bank is past warm-up), scores the
/// epoch's assignment stability and clears the record.
pub fn epoch_end(state: &mut RunState, cfg: &TrainConfig) -> Result<EpochEnd> {
    let mut out = EpochEnd::default();
    if cfg.uses_mixtures() {
        let need = cfg.gmm.components * cfg.gmm.warmup_per_component;
        if state.memory.min_len() >= need.max(cfg.gmm.components) {
            let mut rng = stream(cfg.seed, "em", state.epoch as u64, 0);
            out.unfitted = state.gmm.refit(&state.memory, &cfg.gmm, &mut rng)?.len();
        } else {
            out.unfitted = cfg.model.classes + 1;
        }
    }
    if !state.record.is_empty() {
        let s = sts(&state.record, cfg.model.classes)?.value;
        state.sts_history.push(s);
        out.sts = Some(s);
    }
    state.record.clear();
    state.epoch += 1;
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub f_beta: f64,
    /// Mean per-scene Jaccard of post-audio-decoder classes.
    pub coverage: f64,
    pub scenes: usize,
    pub per_scene_coverage: Vec<f64>,
}

/// Class-agnostic inference over `split`: merged label maps, mIoU, F-beta
/// and coverage. Uses the mixture head when it is enabled and fitted.
pub fn evaluate(
    state: &RunState,
    data: &TrainData,
    split: &[usize],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let head = if cfg.ccdm && state.gmm.is_ready() {
        Head::Mixture(&state.gmm)
    } else {
        Head::Softmax
    };
    let mut counts = SegCounts::new(cfg.model.classes);
    let mut per_scene_coverage = Vec::with_capacity(split.len());
    for &idx in split {
        let scene = &data.set.scenes[idx];
        let inputs = data.inputs(&cfg.model, idx)?;
        let mut tape = Tape::new();
        let b = state.model.bind_frozen(&mut tape)?;
        let f = state.model.forward(&mut tape, &b, &inputs, head)?;
        let pred = state.model.prediction_set(&tape, &f);
        let labels = merge_inference(&pred);
        counts.add(&labels, &scene.labels)?;
        let classes = state.model.after_audio_classes(&mut tape, &b, &f, head)?;
        per_scene_coverage.push(coverage(&classes, &scene.sounding()));
    }
    let n = per_scene_coverage.len();
    Ok(EvalReport {
        miou: counts.miou(),
        f_beta: counts.f_beta(BETA_SQUARED),
        coverage: if n == 0 {
            0.0
        } else {
            per_scene_coverage.iter().sum::<f64>() / n as f64
        },
        scenes: n,
        per_scene_coverage,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SeparationReport {
    /// MSE of the prompted ratio-mask prediction.
    pub mse: f64,
    /// MSE of predicting 0.5 everywhere on the same mixtures.
    pub constant_mse: f64,
    pub scenes: usize,
}

/// Audio prompting on held-out mixtures: prompts drawn from the fitted
/// mixtures, noise from the pool, both under evaluation streams.
pub fn evaluate_separation(
    state: &RunState,
    data: &TrainData,
    split: &[usize],
    cfg: &TrainConfig,
) -> Result<Option<SeparationReport>> {
    if !state.gmm.is_ready() || data.noise.is_empty() {
        return Ok(None);
    }
    let mut rep = SeparationReport::default();
    let d = cfg.model.d_model;
    for &idx in split {
        let scene = &data.set.scenes[idx];
        let sounding = scene.sounding();
        if sounding.is_empty() {
            continue;
        }
        let mut rng = stream(cfg.seed, "eval-separation", idx as u64, 0);
        let prompts = state.gmm.sample_prompts(&sounding, &mut rng)?;
        let j = rand::Rng::gen_range(&mut rng, 0..data.noise.len());
        let mixture = mix(&data.spectra[idx], &data.noise[j])?;
        let target = ratio_target(&data.spectra[idx], &mixture)?;
        let mut inputs = data.inputs(&cfg.model, idx)?;
        inputs.set_audio(&cfg.model, &mixture)?;
        let mut tape = Tape::new();
        let b = state.model.bind_frozen(&mut tape)?;
        let audio = state.model.encode_audio(&mut tape, &b, &inputs)?;
        let z: Vec<f32> = prompts
            .iter()
            .flat_map(|p| p.z.iter().map(|&v| v as f32))
            .collect();
        let z = tape.constant(Array::new(&[prompts.len(), d], z)?)?;
        let s = state.model.decode_audio(&mut tape, &b, z, None, &audio)?;
        let e = state.model.embed(&mut tape, &b, s)?;
        let logits = state.model.audio_mask_logits(&mut tape, &b, e, &audio)?;
        let l = acp_loss(&mut tape, logits, target.0.data())?;
        rep.mse += tape.value(l).item() as f64;
        let t = target.0.data();
        rep.constant_mse += t
            .iter()
            .map(|&v| (v as f64 - 0.5) * (v as f64 - 0.5))
            .sum::<f64>()
            / t.len() as f64;
        rep.scenes += 1;
    }
    if rep.scenes > 0 {
        rep.mse /= rep.scenes as f64;
        rep.constant_mse /= rep.scenes as f64;
    }
    Ok(Some(rep))
}
