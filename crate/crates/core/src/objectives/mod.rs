//! Class-conditional prompting objectives: audio prompting (ratio-mask
//! recovery from a noisy mixture), visual prompting (matching-free prompted
//! segmentation) and the prompt-anchored contrastive loss.

mod contrast;
#[cfg(test)]
mod tests;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{mix, ratio_target, Spectrogram};
use crate::ccdm::GmmBank;
use crate::diffcore::{Array, Scalar, Tape, Var};
use crate::error::{invalid, Result};
use crate::matching::{supervised_loss, GroundTruthSet, MatchConfig, SetLoss};
use crate::model::{AudioFeatures, Bound, Head, SceneInputs, SegModel, VisualFeatures};

pub use contrast::{info_nce, map_pool, mmp_pool, sample_contrast, ContrastIndices};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpmConfig {
    pub acp: bool,
    pub vcp: bool,
    pub pcl: bool,
    pub pooling: Pooling,
    pub temperature: f64,
    pub max_negatives: usize,
    /// Detach encoder features inside the prompting objectives.
    pub stop_encoder_grad: bool,
}

impl Default for CpmConfig {
    fn default() -> Self {
        Self {
            acp: true,
            vcp: true,
            pcl: true,
            pooling: Pooling::Mean,
            temperature: 0.1,
            max_negatives: 256,
            stop_encoder_grad: false,
        }
    }
}

impl CpmConfig {
    pub fn any(&self) -> bool {
        self.acp || self.vcp || self.pcl
    }
}

/// Mean squared error between `sigmoid` of the prompt-summed audio logits
/// ((T*F) x K) and a ratio mask ((T*F) values).
pub fn acp_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &[f32]) -> Result<Var> {
    let summed = tape.sum_rows(logits)?;
    if tape.shape(summed)[0] != target.len() {
        return Err(invalid("ratio target does not cover the spectrogram"));
    }
    let s = tape.sigmoid(summed)?;
    let tgt = Array::new(
        &[target.len(), 1],
        target.iter().map(|&v| T::of(v as f64)).collect(),
    )?;
    let tgt = tape.constant(tgt)?;
    let d = tape.sub(s, tgt)?;
    let d = tape.square(d)?;
    tape.mean_all(d)
}

/// Prompted segmentation loss: prompt `i` is supervised directly by the
/// ground-truth entry of `classes[i]`. Cross-entropy is averaged over
/// prompts and so are the mask terms.
pub fn vcp_loss<T: Scalar>(
    tape: &mut Tape<T>,
    masks: Var,
    log_probs: Var,
    gt: &GroundTruthSet,
    classes: &[u8],
    cfg: &MatchConfig,
) -> Result<(Var, SetLoss)> {
    let targets = classes
        .iter()
        .map(|c| {
            gt.labels
                .iter()
                .position(|l| l == c)
                .map(Some)
                .ok_or_else(|| invalid(alloc::format!("class {} has no pixels", c)))
        })
        .collect::<Result<Vec<_>>>()?;
    if targets.is_empty() {
        return Err(invalid("no prompts"));
    }
    supervised_loss(tape, masks, log_probs, gt, &targets, cfg, true)
}

/// Everything the prompting objectives need about one training scene.
pub struct CpmScene<'a, T> {
    pub inputs: &'a SceneInputs<T>,
    pub clean: &'a Spectrogram,
    pub labels: &'a [u8],
    pub sounding: &'a [u8],
    /// Clean-audio and image features from the class-agnostic pass.
    pub audio: AudioFeatures,
    pub visual: VisualFeatures,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CpmParts {
    pub acp: f64,
    pub vcp: f64,
    pub pcl: f64,
    /// Anchors dropped for lack of positives.
    pub pcl_skipped: usize,
    /// Saliency masks that were empty and replaced by the full lattice.
    pub saliency_fallbacks: usize,
}

pub struct CpmOutput {
    /// `None` while the mixture bank is not ready.
    pub loss: Option<Var>,
    pub parts: CpmParts,
    pub noise_index: Option<usize>,
}

fn detach_audio<T: Scalar>(t: &mut Tape<T>, a: AudioFeatures) -> Result<AudioFeatures> {
    Ok(AudioFeatures {
        tokens: t.detach(a.tokens)?,
        keys: t.detach(a.keys)?,
        coarse: t.detach(a.coarse)?,
        energy: a.energy,
    })
}

fn detach_visual<T: Scalar>(t: &mut Tape<T>, v: VisualFeatures) -> Result<VisualFeatures> {
    Ok(VisualFeatures {
        tokens: t.detach(v.tokens)?,
        keys: t.detach(v.keys)?,
        coarse: t.detach(v.coarse)?,
        pixel_hidden: t.detach(v.pixel_hidden)?,
    })
}

/// Prompting objectives for one scene. Prompts are sampled once per scene
/// and shared by all three terms; the audio saliency of the audio term
/// selects the anchor region of the contrastive term.
#[allow(clippy::too_many_arguments)]
pub fn cpm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &SegModel<T>,
    bound: &Bound,
    head: Head<'_>,
    bank: &GmmBank,
    noise: &[Spectrogram],
    scene: &CpmScene<'_, T>,
    cfg: &CpmConfig,
    matching: &MatchConfig,
    rng: &mut impl Rng,
) -> Result<CpmOutput> {
    let mut parts = CpmParts::default();
    if !bank.is_ready() || !cfg.any() || scene.sounding.is_empty() {
        return Ok(CpmOutput {
            loss: None,
            parts,
            noise_index: None,
        });
    }
    let prompts = bank.sample_prompts(scene.sounding, rng)?;
    let d = model.config().d_model;
    let z: Vec<T> = prompts
        .iter()
        .flat_map(|p| p.z.iter().map(|&v| T::of(v)))
        .collect();
    let z = tape.constant(Array::new(&[prompts.len(), d], z)?)?;
    let mut terms: Vec<Var> = Vec::new();

    let (audio, visual) = if cfg.stop_encoder_grad {
        (
            detach_audio(tape, scene.audio)?,
            detach_visual(tape, scene.visual)?,
        )
    } else {
        (scene.audio, scene.visual)
    };

    let mut noise_index = None;
    let mut audio_logits = None;
    let mut mix_audio = None;
    if cfg.acp || cfg.pcl {
        if noise.is_empty() {
            return Err(invalid("prompting needs a non-empty noise pool"));
        }
        let j = rng.gen_range(0..noise.len());
        noise_index = Some(j);
        let mixture = mix(scene.clean, &noise[j])?;
        let mut inputs = scene.inputs.clone();
        inputs.set_audio(model.config(), &mixture)?;
        let mut ma = model.encode_audio(tape, bound, &inputs)?;
        if cfg.stop_encoder_grad {
            ma = detach_audio(tape, ma)?;
        }
        let state = model.decode_audio(tape, bound, z, None, &ma)?;
        let emb = model.embed(tape, bound, state)?;
        let logits = model.audio_mask_logits(tape, bound, emb, &ma)?;
        if cfg.acp {
            let target = ratio_target(scene.clean, &mixture)?;
            let l = acp_loss(tape, logits, target.0.data())?;
            parts.acp = tape.value(l).item().as_f64();
            terms.push(l);
        }
        audio_logits = Some(logits);
        mix_audio = Some(ma);
    }

    let gt = GroundTruthSet::from_labels(scene.labels);
    let classes: Vec<u8> = prompts.iter().map(|p| p.class).collect();
    if cfg.vcp {
        let f = model.forward_queries(tape, bound, z, None, audio, visual, head)?;
        let (l, _) = vcp_loss(tape, f.masks, f.log_probs, &gt, &classes, matching)?;
        parts.vcp = tape.value(l).item().as_f64();
        terms.push(l);
    }

    if cfg.pcl {
        let logits = audio_logits.expect("audio logits computed for the contrastive term");
        let ma = mix_audio.expect("mixture features computed for the contrastive term");
        let lv = tape.value(logits);
        let k = classes.len();
        let cells = lv.rows();
        let mut masks: Vec<Vec<bool>> = Vec::with_capacity(k);
        for col in 0..k {
            let s: Vec<f64> = (0..cells)
                .map(|c| crate::diffcore::sigmoid(lv.row(c)[col].as_f64()))
                .collect();
            let mean = s.iter().sum::<f64>() / cells as f64;
            let mut m: Vec<bool> = s.iter().map(|&v| v > mean).collect();
            if !m.iter().any(|&b| b) {
                parts.saliency_fallbacks += 1;
                m = vec![true; cells];
            }
            masks.push(m);
        }
        let anchors = match cfg.pooling {
            Pooling::Mean => {
                let w: Vec<Vec<T>> = masks
                    .iter()
                    .map(|m| {
                        m.iter()
                            .map(|&b| if b { T::one() } else { T::zero() })
                            .collect()
                    })
                    .collect();
                model.audio_mean_pool(tape, bound, &ma, &w)?
            }
            Pooling::Max => model.audio_max_pool(tape, bound, &ma, &masks)?,
        };
        let (pixels, sets) = sample_contrast(scene.labels, &classes, cfg.max_negatives, rng);
        let feats = model.pixel_embeddings(tape, bound, &visual, &pixels)?;
        let (l, skipped) = info_nce(tape, anchors, feats, &sets, cfg.temperature)?;
        parts.pcl_skipped = skipped;
        if let Some(l) = l {
            parts.pcl = tape.value(l).item().as_f64();
            terms.push(l);
        }
    }

    let mut loss = None;
    for t in terms {
        loss = Some(match loss {
            None => t,
            Some(acc) => tape.add(acc, t)?,
        });
    }
    Ok(CpmOutput {
        loss,
        parts,
        noise_index,
    })
}
