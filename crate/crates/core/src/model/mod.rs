//! Desk-scale set-prediction model.
//!
//! Audio and visual encoders produce token grids in a shared width `d`. A
//! set of queries passes audio-decoder layers (cross-attending to audio
//! tokens) then visual-decoder layers (cross-attending to visual tokens).
//! Each decoder layer is cross-attention, self-attention and a feed-forward
//! block, all with post layer-norm and single-head attention.
//!
//! Dense per-pixel and per-bin embeddings are never materialised during
//! training: they are sums of an upsampled coarse term, a fine per-position
//! term and a bias, so inner products with query embeddings are computed
//! term by term. [`SegModel::pixel_embeddings`] and
//! [`SegModel::audio_embeddings`] build the explicit rows when needed.

mod ops;
mod params;

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::audio::{Spectrogram, BINS, FRAMES};
use crate::ccdm::{log_posterior, GmmBank};
use crate::diffcore::{Array, CustomOp, Scalar, Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::rng::stream;

pub use params::{Bound, ParamId, ParamStore};

use ops::grid_mix;
use params::{gaussian, xavier};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub classes: usize,
    pub d_model: usize,
    pub queries: usize,
    pub ffn_hidden: usize,
    pub pixel_hidden: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub audio_patch: [usize; 2],
    pub encoder_layers: usize,
    pub audio_decoder_layers: usize,
    pub visual_decoder_layers: usize,
    /// Multiplier on the log-compressed magnitude fed to the per-bin term.
    pub energy_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            d_model: 64,
            queries: 8,
            ffn_hidden: 128,
            pixel_hidden: 16,
            height: 32,
            width: 32,
            patch: 4,
            audio_patch: [8, 16],
            encoder_layers: 2,
            audio_decoder_layers: 2,
            visual_decoder_layers: 2,
            energy_scale: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries < self.classes + 1 {
            return Err(invalid(format!(
                "{} queries cannot cover {} classes plus background",
                self.queries, self.classes
            )));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(invalid("image size must be a multiple of the patch size"));
        }
        let [pt, pf] = self.audio_patch;
        if pt == 0 || pf == 0 || FRAMES % pt != 0 || BINS % pf != 0 {
            return Err(invalid(
                "spectrogram size must be a multiple of the audio patch",
            ));
        }
        if self.d_model == 0 || self.ffn_hidden == 0 || self.pixel_hidden == 0 {
            return Err(invalid("zero model width"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn visual_grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn audio_grid(&self) -> (usize, usize) {
        (FRAMES / self.audio_patch[0], BINS / self.audio_patch[1])
    }
}

/// Precomputed, model-independent encodings of one scene.
#[derive(Clone, Debug)]
pub struct SceneInputs<T> {
    /// Flattened log-magnitude patches, tokens x (pt*pf).
    pub audio_patches: Array<T>,
    /// Scaled log-magnitude per lattice cell, (T*F) x 1.
    pub energy: Array<T>,
    /// Flattened RGB patches, tokens x (p*p*3).
    pub image_patches: Array<T>,
    /// Per-pixel RGB, (H*W) x 3.
    pub pixels: Array<T>,
}

impl<T: Scalar> SceneInputs<T> {
    pub fn new(cfg: &ModelConfig, spec: &Spectrogram, image: &Array<f32>) -> Result<Self> {
        let mut s = Self {
            audio_patches: Array::zeros(&[0]),
            energy: Array::zeros(&[0]),
            image_patches: Array::zeros(&[0]),
            pixels: Array::zeros(&[0]),
        };
        s.set_image(cfg, image)?;
        s.set_audio(cfg, spec)?;
        Ok(s)
    }

    pub fn set_image(&mut self, cfg: &ModelConfig, image: &Array<f32>) -> Result<()> {
        let (h, w, p) = (cfg.height, cfg.width, cfg.patch);
        if image.shape() != [h, w, 3] {
            return Err(shape_err(
                "scene_inputs",
                format!("image {:?}", image.shape()),
            ));
        }
        let img = image.data();
        let (gh, gw) = cfg.visual_grid();
        let mut patches = Vec::with_capacity(h * w * 3);
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..p {
                    let base = ((gy * p + dy) * w + gx * p) * 3;
                    patches.extend(img[base..base + 3 * p].iter().map(|&v| T::of(v as f64)));
                }
            }
        }
        self.image_patches = Array::new(&[gh * gw, 3 * p * p], patches)?;
        self.pixels = Array::new(&[h * w, 3], img.iter().map(|&v| T::of(v as f64)).collect())?;
        Ok(())
    }

    pub fn set_audio(&mut self, cfg: &ModelConfig, spec: &Spectrogram) -> Result<()> {
        let logs = spec.log_compressed();
        let l = logs.data();
        let [pt, pf] = cfg.audio_patch;
        let (gt, gf) = cfg.audio_grid();
        let mut patches = Vec::with_capacity(l.len());
        for ty in 0..gt {
            for fx in 0..gf {
                for dt in 0..pt {
                    let base = (ty * pt + dt) * BINS + fx * pf;
                    patches.extend(l[base..base + pf].iter().map(|&v| T::of(v as f64)));
                }
            }
        }
        self.audio_patches = Array::new(&[gt * gf, pt * pf], patches)?;
        let scale = cfg.energy_scale;
        self.energy = Array::new(
            &[l.len(), 1],
            l.iter().map(|&v| T::of(v as f64 * scale)).collect(),
        )?;
        Ok(())
    }
}

/// Encoded audio on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AudioFeatures {
    /// u_a, tokens x d.
    pub tokens: Var,
    /// tokens + positions, used as attention keys.
    pub keys: Var,
    /// Coarse term of the dense audio embedding, tokens x d.
    pub coarse: Var,
    /// Per-cell energy, (T*F) x 1 constant.
    pub energy: Var,
}

/// Encoded image on a tape.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeatures {
    /// u_v, tokens x d.
    pub tokens: Var,
    pub keys: Var,
    /// Coarse term of the dense pixel embedding, tokens x d.
    pub coarse: Var,
    /// Per-pixel hidden activations, (H*W) x pixel_hidden.
    pub pixel_hidden: Var,
}

/// Class-probability head.
#[derive(Clone, Copy, Debug)]
pub enum Head<'a> {
    Softmax,
    Mixture(&'a GmmBank),
}

/// Outputs of one forward pass, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Mask logits, queries x (H*W).
    pub masks: Var,
    /// Log class probabilities, queries x (C+1), last column is no-object.
    pub log_probs: Var,
    /// Mask embeddings q~, queries x d.
    pub embeddings: Var,
    /// Query states after the audio decoder.
    pub after_audio: Var,
    pub audio: AudioFeatures,
    pub visual: VisualFeatures,
}

/// Plain-array predictions for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<T> {
    /// queries x H x W logits.
    pub masks: Array<T>,
    /// queries x (C+1) probabilities.
    pub probs: Array<T>,
    /// queries x d.
    pub embeddings: Array<T>,
}

#[derive(Clone, Copy, Debug)]
struct MixIds {
    w: ParamId,
    b: ParamId,
    g: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    g: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    cross: AttnIds,
    slf: AttnIds,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    g: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    a_patch_w: ParamId,
    a_patch_b: ParamId,
    a_pos: ParamId,
    a_mix: Vec<MixIds>,
    v_patch_w: ParamId,
    v_patch_b: ParamId,
    v_pos: ParamId,
    v_mix: Vec<MixIds>,
    pix_w1: ParamId,
    pix_b1: ParamId,
    pix_w2: ParamId,
    pix_bias: ParamId,
    vis_proj: ParamId,
    aud_proj: ParamId,
    freq_embed: ParamId,
    energy_dir: ParamId,
    q_content: ParamId,
    q_pos: ParamId,
    audio_layers: Vec<LayerIds>,
    visual_layers: Vec<LayerIds>,
    emb_g: ParamId,
    emb_beta: ParamId,
    emb_w1: ParamId,
    emb_b1: ParamId,
    emb_w2: ParamId,
    emb_b2: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct SegModel<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    ids: Ids,
    pixel_patch: Vec<usize>,
    lattice_patch: Vec<usize>,
    lattice_freq: Vec<usize>,
}

fn ones<T: Scalar>(n: usize) -> Array<T> {
    Array::full(&[1, n], T::one())
}

fn zeros<T: Scalar>(n: usize) -> Array<T> {
    Array::zeros(&[1, n])
}

impl<T: Scalar> SegModel<T> {
    /// Builds a model with parameters drawn from the `init` stream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, "init", 0, 0);
        let r = &mut rng;
        let mut p = ParamStore::new();
        let d = cfg.d_model;
        let [pt, pf] = cfg.audio_patch;
        let (gh, gw) = cfg.visual_grid();
        let (gt, gf) = cfg.audio_grid();

        let mix = |p: &mut ParamStore<T>, r: &mut _, prefix: &str, i: usize| MixIds {
            w: p.insert(&format!("{prefix}.mix{i}.w"), xavier(r, d, d)),
            b: p.insert(&format!("{prefix}.mix{i}.b"), zeros(d)),
            g: p.insert(&format!("{prefix}.mix{i}.ln_g"), ones(d)),
            beta: p.insert(&format!("{prefix}.mix{i}.ln_b"), zeros(d)),
        };
        let a_patch_w = p.insert("audio.patch.w", xavier(r, pt * pf, d));
        let a_patch_b = p.insert("audio.patch.b", zeros(d));
        let a_pos = p.insert("audio.pos", gaussian(r, &[gt * gf, d], 0.1));
        let a_mix = (0..cfg.encoder_layers)
            .map(|i| mix(&mut p, r, "audio", i))
            .collect();
        let v_patch_w = p.insert("visual.patch.w", xavier(r, 3 * cfg.patch * cfg.patch, d));
        let v_patch_b = p.insert("visual.patch.b", zeros(d));
        let v_pos = p.insert("visual.pos", gaussian(r, &[gh * gw, d], 0.1));
        let v_mix = (0..cfg.encoder_layers)
            .map(|i| mix(&mut p, r, "visual", i))
            .collect();
        let pix_w1 = p.insert("pixel.w1", xavier(r, 3, cfg.pixel_hidden));
        let pix_b1 = p.insert("pixel.b1", zeros(cfg.pixel_hidden));
        let pix_w2 = p.insert("pixel.w2", xavier(r, cfg.pixel_hidden, d));
        let pix_bias = p.insert("pixel.bias", zeros(d));
        let vis_proj = p.insert("pixel.proj", xavier(r, d, d));
        let aud_proj = p.insert("lattice.proj", xavier(r, d, d));
        let freq_embed = p.insert("lattice.freq", gaussian(r, &[BINS, d], 0.1));
        let energy_dir = p.insert("lattice.energy", gaussian(r, &[1, d], 0.1));
        let q_content = p.insert("query.content", gaussian(r, &[cfg.queries, d], 1.0));
        let q_pos = p.insert("query.pos", gaussian(r, &[cfg.queries, d], 1.0));

        let attn = |p: &mut ParamStore<T>, r: &mut _, name: &str| AttnIds {
            wq: p.insert(&format!("{name}.wq"), xavier(r, d, d)),
            wk: p.insert(&format!("{name}.wk"), xavier(r, d, d)),
            wv: p.insert(&format!("{name}.wv"), xavier(r, d, d)),
            wo: p.insert(&format!("{name}.wo"), xavier(r, d, d)),
            g: p.insert(&format!("{name}.ln_g"), ones(d)),
            beta: p.insert(&format!("{name}.ln_b"), zeros(d)),
        };
        let layer = |p: &mut ParamStore<T>, r: &mut _, name: &str| LayerIds {
            cross: attn(p, r, &format!("{name}.cross")),
            slf: attn(p, r, &format!("{name}.self")),
            w1: p.insert(&format!("{name}.ffn.w1"), xavier(r, d, cfg.ffn_hidden)),
            b1: p.insert(&format!("{name}.ffn.b1"), zeros(cfg.ffn_hidden)),
            w2: p.insert(&format!("{name}.ffn.w2"), xavier(r, cfg.ffn_hidden, d)),
            b2: p.insert(&format!("{name}.ffn.b2"), zeros(d)),
            g: p.insert(&format!("{name}.ffn.ln_g"), ones(d)),
            beta: p.insert(&format!("{name}.ffn.ln_b"), zeros(d)),
        };
        let audio_layers = (0..cfg.audio_decoder_layers)
            .map(|i| layer(&mut p, r, &format!("dec_audio{i}")))
            .collect();
        let visual_layers = (0..cfg.visual_decoder_layers)
            .map(|i| layer(&mut p, r, &format!("dec_visual{i}")))
            .collect();
        let emb_g = p.insert("embed.ln_g", ones(d));
        let emb_beta = p.insert("embed.ln_b", zeros(d));
        let emb_w1 = p.insert("embed.w1", xavier(r, d, d));
        let emb_b1 = p.insert("embed.b1", zeros(d));
        let emb_w2 = p.insert("embed.w2", xavier(r, d, d));
        let emb_b2 = p.insert("embed.b2", zeros(d));
        let cls_w = p.insert("class.w", xavier(r, d, cfg.classes + 1));
        let cls_b = p.insert("class.b", zeros(cfg.classes + 1));

        let ids = Ids {
            a_patch_w,
            a_patch_b,
            a_pos,
            a_mix,
            v_patch_w,
            v_patch_b,
            v_pos,
            v_mix,
            pix_w1,
            pix_b1,
            pix_w2,
            pix_bias,
            vis_proj,
            aud_proj,
            freq_embed,
            energy_dir,
            q_content,
            q_pos,
            audio_layers,
            visual_layers,
            emb_g,
            emb_beta,
            emb_w1,
            emb_b1,
            emb_w2,
            emb_b2,
            cls_w,
            cls_b,
        };

        let pixel_patch = (0..cfg.pixels())
            .map(|i| (i / cfg.width / cfg.patch) * gw + (i % cfg.width) / cfg.patch)
            .collect();
        let lattice_patch = (0..FRAMES * BINS)
            .map(|i| (i / BINS / pt) * gf + (i % BINS) / pf)
            .collect();
        let lattice_freq = (0..FRAMES * BINS).map(|i| i % BINS).collect();
        Ok(Self {
            cfg,
            params: p,
            ids,
            pixel_patch,
            lattice_patch,
            lattice_freq,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        self.params.bind(tape, false)
    }

    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Result<Bound> {
        self.params.bind(tape, true)
    }

    /// Patch index of every pixel.
    pub fn pixel_patch(&self) -> &[usize] {
        &self.pixel_patch
    }

    /// Token index of every spectrogram cell.
    pub fn lattice_patch(&self) -> &[usize] {
        &self.lattice_patch
    }

    fn affine_norm(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        x: Var,
        g: ParamId,
        beta: ParamId,
    ) -> Result<Var> {
        let n = t.layer_norm_rows(x, T::of(LN_EPS))?;
        let n = t.mul_row(n, b.var(g))?;
        t.add_row(n, b.var(beta))
    }

    fn linear(&self, t: &mut Tape<T>, b: &Bound, x: Var, w: ParamId, bias: ParamId) -> Result<Var> {
        let y = t.matmul(x, b.var(w))?;
        t.add_row(y, b.var(bias))
    }

    fn mix_layers(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        mut h: Var,
        layers: &[MixIds],
        grid: (usize, usize),
    ) -> Result<Var> {
        for l in layers {
            let m = grid_mix(t, h, grid.0, grid.1)?;
            let u = self.linear(t, b, m, l.w, l.b)?;
            let u = t.relu(u)?;
            let s = t.add(h, u)?;
            h = self.affine_norm(t, b, s, l.g, l.beta)?;
        }
        Ok(h)
    }

    pub fn encode_audio(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        inp: &SceneInputs<T>,
    ) -> Result<AudioFeatures> {
        let x = t.constant(inp.audio_patches.clone())?;
        if t.shape(x)
            != [
                self.lattice_tokens(),
                self.cfg.audio_patch[0] * self.cfg.audio_patch[1],
            ]
        {
            return Err(shape_err(
                "encode_audio",
                format!("patches {:?}", t.shape(x)),
            ));
        }
        let h = self.linear(t, b, x, self.ids.a_patch_w, self.ids.a_patch_b)?;
        let tokens = self.mix_layers(t, b, h, &self.ids.a_mix, self.cfg.audio_grid())?;
        let keys = t.add(tokens, b.var(self.ids.a_pos))?;
        let coarse = t.matmul(tokens, b.var(self.ids.aud_proj))?;
        if inp.energy.shape() != [FRAMES * BINS, 1] {
            return Err(shape_err(
                "encode_audio",
                format!("energy {:?}", inp.energy.shape()),
            ));
        }
        let energy = t.constant(inp.energy.clone())?;
        Ok(AudioFeatures {
            tokens,
            keys,
            coarse,
            energy,
        })
    }

    fn lattice_tokens(&self) -> usize {
        let (a, b) = self.cfg.audio_grid();
        a * b
    }

    pub fn encode_visual(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        inp: &SceneInputs<T>,
    ) -> Result<VisualFeatures> {
        let (gh, gw) = self.cfg.visual_grid();
        let x = t.constant(inp.image_patches.clone())?;
        if t.shape(x) != [gh * gw, 3 * self.cfg.patch * self.cfg.patch] {
            return Err(shape_err(
                "encode_visual",
                format!("patches {:?}", t.shape(x)),
            ));
        }
        let h = self.linear(t, b, x, self.ids.v_patch_w, self.ids.v_patch_b)?;
        let tokens = self.mix_layers(t, b, h, &self.ids.v_mix, (gh, gw))?;
        let keys = t.add(tokens, b.var(self.ids.v_pos))?;
        let coarse = t.matmul(tokens, b.var(self.ids.vis_proj))?;
        let px = t.constant(inp.pixels.clone())?;
        if t.shape(px) != [self.cfg.pixels(), 3] {
            return Err(shape_err(
                "encode_visual",
                format!("pixels {:?}", t.shape(px)),
            ));
        }
        let ph = self.linear(t, b, px, self.ids.pix_w1, self.ids.pix_b1)?;
        let pixel_hidden = t.relu(ph)?;
        Ok(VisualFeatures {
            tokens,
            keys,
            coarse,
            pixel_hidden,
        })
    }

    fn scaled_attention(&self, t: &mut Tape<T>, q: Var, k: Var) -> Result<Var> {
        let logits = t.matmul_nt(q, k)?;
        let logits = t.scale(logits, T::of(1.0 / libm::sqrt(self.cfg.d_model as f64)))?;
        t.softmax_rows(logits)
    }

    fn with_pos(&self, t: &mut Tape<T>, x: Var, pos: Option<Var>) -> Result<Var> {
        match pos {
            Some(p) => t.add(x, p),
            None => Ok(x),
        }
    }

    fn cross_attention(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        a: &AttnIds,
        x: Var,
        pos: Option<Var>,
        tokens: Var,
        keys: Var,
    ) -> Result<Var> {
        // (x Wq)(k Wk)^T is evaluated as ((x Wq) Wk^T) k^T, and
        // attn (tokens Wv) as (attn tokens) Wv: both cheaper for few queries.
        let xp = self.with_pos(t, x, pos)?;
        let q = t.matmul(xp, b.var(a.wq))?;
        let q = t.matmul_nt(q, b.var(a.wk))?;
        let attn = self.scaled_attention(t, q, keys)?;
        let ctx = t.matmul(attn, tokens)?;
        let v = t.matmul(ctx, b.var(a.wv))?;
        let o = t.matmul(v, b.var(a.wo))?;
        let s = t.add(x, o)?;
        self.affine_norm(t, b, s, a.g, a.beta)
    }

    fn self_attention(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        a: &AttnIds,
        x: Var,
        pos: Option<Var>,
    ) -> Result<Var> {
        let xp = self.with_pos(t, x, pos)?;
        let q = t.matmul(xp, b.var(a.wq))?;
        let k = t.matmul(xp, b.var(a.wk))?;
        let v = t.matmul(x, b.var(a.wv))?;
        let attn = self.scaled_attention(t, q, k)?;
        let ctx = t.matmul(attn, v)?;
        let o = t.matmul(ctx, b.var(a.wo))?;
        let s = t.add(x, o)?;
        self.affine_norm(t, b, s, a.g, a.beta)
    }

    fn decoder_layer(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        l: &LayerIds,
        x: Var,
        pos: Option<Var>,
        tokens: Var,
        keys: Var,
    ) -> Result<Var> {
        let x = self.cross_attention(t, b, &l.cross, x, pos, tokens, keys)?;
        let x = self.self_attention(t, b, &l.slf, x, pos)?;
        let h = self.linear(t, b, x, l.w1, l.b1)?;
        let h = t.relu(h)?;
        let o = self.linear(t, b, h, l.w2, l.b2)?;
        let s = t.add(x, o)?;
        self.affine_norm(t, b, s, l.g, l.beta)
    }

    /// The learned query set: content and positions.
    pub fn learned_queries(&self, b: &Bound) -> (Var, Var) {
        (b.var(self.ids.q_content), b.var(self.ids.q_pos))
    }

    /// Audio-decoder layers. `pos` is `None` for prompts (zero positions).
    pub fn decode_audio(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        x: Var,
        pos: Option<Var>,
        audio: &AudioFeatures,
    ) -> Result<Var> {
        let mut x = x;
        for l in &self.ids.audio_layers {
            x = self.decoder_layer(t, b, l, x, pos, audio.tokens, audio.keys)?;
        }
        Ok(x)
    }

    pub fn decode_visual(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        x: Var,
        pos: Option<Var>,
        vis: &VisualFeatures,
    ) -> Result<Var> {
        let mut x = x;
        for l in &self.ids.visual_layers {
            x = self.decoder_layer(t, b, l, x, pos, vis.tokens, vis.keys)?;
        }
        Ok(x)
    }

    /// Mask embeddings q~ from decoder states.
    pub fn embed(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let n = self.affine_norm(t, b, x, self.ids.emb_g, self.ids.emb_beta)?;
        let h = self.linear(t, b, n, self.ids.emb_w1, self.ids.emb_b1)?;
        let h = t.relu(h)?;
        self.linear(t, b, h, self.ids.emb_w2, self.ids.emb_b2)
    }

    /// Log class probabilities, rows x (C+1).
    pub fn classify(&self, t: &mut Tape<T>, b: &Bound, emb: Var, head: Head<'_>) -> Result<Var> {
        match head {
            Head::Softmax => {
                let l = self.linear(t, b, emb, self.ids.cls_w, self.ids.cls_b)?;
                t.log_softmax_rows(l)
            }
            Head::Mixture(g) => log_posterior(t, emb, g),
        }
    }

    /// Mask logits of embeddings against the dense pixel embeddings,
    /// rows x (H*W).
    pub fn pixel_mask_logits(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        emb: Var,
        vis: &VisualFeatures,
    ) -> Result<Var> {
        let coarse = t.matmul_nt(vis.coarse, emb)?;
        let up = t.gather_rows(coarse, &self.pixel_patch)?;
        let w = t.matmul_nt(b.var(self.ids.pix_w2), emb)?;
        let fine = t.matmul(vis.pixel_hidden, w)?;
        let bias = t.matmul_nt(b.var(self.ids.pix_bias), emb)?;
        let s = t.add(up, fine)?;
        let s = t.add_row(s, bias)?;
        t.transpose(s)
    }

    /// Dense pixel embeddings for the given pixel indices, rows x d.
    pub fn pixel_embeddings(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        vis: &VisualFeatures,
        pixels: &[usize],
    ) -> Result<Var> {
        let idx: Vec<usize> = pixels.iter().map(|&p| self.pixel_patch[p]).collect();
        let up = t.gather_rows(vis.coarse, &idx)?;
        let h = t.gather_rows(vis.pixel_hidden, pixels)?;
        let fine = t.matmul(h, b.var(self.ids.pix_w2))?;
        let s = t.add(up, fine)?;
        t.add_row(s, b.var(self.ids.pix_bias))
    }

    /// Audio mask logits of prompts against the dense audio embeddings,
    /// laid out lattice-major: (T*F) x K.
    pub fn audio_mask_logits(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        prompts: Var,
        audio: &AudioFeatures,
    ) -> Result<Var> {
        if t.shape(prompts)[0] == 0 {
            return Err(invalid("audio masks need at least one prompt"));
        }
        let a = t.matmul_nt(audio.coarse, prompts)?;
        let a = t.gather_rows(a, &self.lattice_patch)?;
        let f = t.matmul_nt(b.var(self.ids.freq_embed), prompts)?;
        let f = t.gather_rows(f, &self.lattice_freq)?;
        let e = t.matmul_nt(b.var(self.ids.energy_dir), prompts)?;
        let e = t.matmul(audio.energy, e)?;
        let s = t.add(a, f)?;
        t.add(s, e)
    }

    /// Dense audio embeddings for the given lattice cells, rows x d.
    pub fn audio_embeddings(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        audio: &AudioFeatures,
        cells: &[usize],
    ) -> Result<Var> {
        let idx: Vec<usize> = cells.iter().map(|&c| self.lattice_patch[c]).collect();
        let up = t.gather_rows(audio.coarse, &idx)?;
        let fidx: Vec<usize> = cells.iter().map(|&c| self.lattice_freq[c]).collect();
        let f = t.gather_rows(b.var(self.ids.freq_embed), &fidx)?;
        let g = t.gather_rows(audio.energy, cells)?;
        let g = t.matmul(g, b.var(self.ids.energy_dir))?;
        let s = t.add(up, f)?;
        t.add(s, g)
    }

    /// Mean of the dense audio embedding under each row of `weights`
    /// ((T*F) non-negative entries, not all zero), K x d.
    pub fn audio_mean_pool(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        audio: &AudioFeatures,
        weights: &[Vec<T>],
    ) -> Result<Var> {
        let k = weights.len();
        let cells = FRAMES * BINS;
        let tokens = self.lattice_tokens();
        let energy = t.value(audio.energy).data().to_vec();
        let mut wp = vec![T::zero(); k * tokens];
        let mut wf = vec![T::zero(); k * BINS];
        let mut we = vec![T::zero(); k];
        for (r, w) in weights.iter().enumerate() {
            if w.len() != cells {
                return Err(shape_err(
                    "audio_mean_pool",
                    format!("weights of length {}", w.len()),
                ));
            }
            let total: T = w.iter().copied().sum();
            if total <= T::zero() {
                return Err(invalid("empty pooling weights"));
            }
            for (c, &v) in w.iter().enumerate() {
                if v != T::zero() {
                    let v = v / total;
                    wp[r * tokens + self.lattice_patch[c]] += v;
                    wf[r * BINS + self.lattice_freq[c]] += v;
                    we[r] += v * energy[c];
                }
            }
        }
        let wp = t.constant(Array::new(&[k, tokens], wp)?)?;
        let wf = t.constant(Array::new(&[k, BINS], wf)?)?;
        let we = t.constant(Array::new(&[k, 1], we)?)?;
        let a = t.matmul(wp, audio.coarse)?;
        let f = t.matmul(wf, b.var(self.ids.freq_embed))?;
        let e = t.matmul(we, b.var(self.ids.energy_dir))?;
        let s = t.add(a, f)?;
        t.add(s, e)
    }

    /// Channel-wise max of the dense audio embedding over the selected
    /// cells of each mask, K x d.
    pub fn audio_max_pool(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        audio: &AudioFeatures,
        masks: &[Vec<bool>],
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let coarse = t.value(audio.coarse);
        let freq = t.value(b.var(self.ids.freq_embed));
        let dir = t.value(b.var(self.ids.energy_dir)).data();
        let energy = t.value(audio.energy).data();
        let mut out = Array::zeros(&[masks.len(), d]);
        let mut arg = vec![usize::MAX; masks.len() * d];
        for (r, m) in masks.iter().enumerate() {
            if m.len() != FRAMES * BINS {
                return Err(shape_err(
                    "audio_max_pool",
                    format!("mask of length {}", m.len()),
                ));
            }
            let row = out.row_mut(r);
            for (c, _) in m.iter().enumerate().filter(|(_, &s)| s) {
                let cr = coarse.row(self.lattice_patch[c]);
                let fr = freq.row(self.lattice_freq[c]);
                for j in 0..d {
                    let v = cr[j] + fr[j] + energy[c] * dir[j];
                    if arg[r * d + j] == usize::MAX || v > row[j] {
                        row[j] = v;
                        arg[r * d + j] = c;
                    }
                }
            }
            if arg[r * d] == usize::MAX {
                return Err(invalid("empty pooling mask"));
            }
        }
        let op = MaxPoolOp {
            arg,
            d,
            lattice_patch: self.lattice_patch.clone(),
            energy: energy.iter().map(|v| v.as_f64()).collect(),
        };
        t.custom(
            &[
                audio.coarse,
                b.var(self.ids.freq_embed),
                b.var(self.ids.energy_dir),
            ],
            out,
            Box::new(op),
        )
    }

    /// Class-agnostic forward pass with the learned queries.
    pub fn forward(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        inp: &SceneInputs<T>,
        head: Head<'_>,
    ) -> Result<Forward> {
        let audio = self.encode_audio(t, b, inp)?;
        let visual = self.encode_visual(t, b, inp)?;
        let (q, pos) = self.learned_queries(b);
        self.forward_queries(t, b, q, Some(pos), audio, visual, head)
    }

    /// Forward pass of an arbitrary query set through both decoders.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_queries(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        q: Var,
        pos: Option<Var>,
        audio: AudioFeatures,
        visual: VisualFeatures,
        head: Head<'_>,
    ) -> Result<Forward> {
        let after_audio = self.decode_audio(t, b, q, pos, &audio)?;
        let x = self.decode_visual(t, b, after_audio, pos, &visual)?;
        let embeddings = self.embed(t, b, x)?;
        let masks = self.pixel_mask_logits(t, b, embeddings, &visual)?;
        let log_probs = self.classify(t, b, embeddings, head)?;
        if t.is_checked() && !(t.value(masks).all_finite() && t.value(log_probs).all_finite()) {
            return Err(crate::Error::NonFinite { op: "forward" });
        }
        Ok(Forward {
            masks,
            log_probs,
            embeddings,
            after_audio,
            audio,
            visual,
        })
    }

    /// Inference with the learned queries, no gradients.
    pub fn predict(&self, inp: &SceneInputs<T>, head: Head<'_>) -> Result<PredictionSet<T>> {
        let mut t = Tape::new();
        let b = self.bind_frozen(&mut t)?;
        let f = self.forward(&mut t, &b, inp, head)?;
        Ok(self.prediction_set(&t, &f))
    }

    pub fn prediction_set(&self, t: &Tape<T>, f: &Forward) -> PredictionSet<T> {
        let n = t.shape(f.masks)[0];
        PredictionSet {
            masks: t
                .value(f.masks)
                .clone()
                .reshape(&[n, self.cfg.height, self.cfg.width])
                .expect("mask shape"),
            probs: t.value(f.log_probs).map(|v| v.exp()),
            embeddings: t.value(f.embeddings).clone(),
        }
    }

    /// Class predictions of the head applied to the audio-decoder states.
    pub fn after_audio_classes(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        f: &Forward,
        head: Head<'_>,
    ) -> Result<Vec<u8>> {
        let e = self.embed(t, b, f.after_audio)?;
        let lp = self.classify(t, b, e, head)?;
        let lp = t.value(lp);
        let c = self.cfg.classes;
        let mut out: Vec<u8> = (0..lp.rows())
            .filter_map(|i| {
                let k = argmax(lp.row(i));
                (k < c).then_some(k as u8 + 1)
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

pub(crate) fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

struct MaxPoolOp {
    arg: Vec<usize>,
    d: usize,
    lattice_patch: Vec<usize>,
    energy: Vec<f64>,
}

impl<T: Scalar> CustomOp<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "audio_max_pool"
    }

    fn backward(
        &self,
        inputs: &[&Array<T>],
        _output: &Array<T>,
        grad: &Array<T>,
    ) -> Vec<Option<Array<T>>> {
        let mut gc = Array::zeros(inputs[0].shape());
        let mut gf = Array::zeros(inputs[1].shape());
        let mut ge = Array::zeros(inputs[2].shape());
        let d = self.d;
        for (i, &c) in self.arg.iter().enumerate() {
            let (r, j) = (i / d, i % d);
            let g = grad.row(r)[j];
            gc.row_mut(self.lattice_patch[c])[j] += g;
            gf.row_mut(c % BINS)[j] += g;
            ge.data_mut()[j] += g * T::of(self.energy[c]);
        }
        vec![Some(gc), Some(gf), Some(ge)]
    }
}

/// Per-pixel label map (0 = background). Queries whose most likely class
/// is no-object are dropped; among the rest, those whose mask covers the
/// pixel (sigmoid > 0.5) compete on p(c) * sigmoid(m) and the winner's class
/// is written. Uncovered pixels stay background.
pub fn merge_inference<T: Scalar>(pred: &PredictionSet<T>) -> Vec<u8> {
    let n = pred.masks.shape()[0];
    let hw = if n == 0 { 0 } else { pred.masks.len() / n };
    let c1 = pred.probs.cols();
    let picks: Vec<(usize, usize, T)> = (0..n)
        .filter_map(|i| {
            let row = pred.probs.row(i);
            let k = argmax(row);
            (k + 1 < c1).then_some((i, k, row[k]))
        })
        .collect();
    let masks = pred.masks.data();
    let half = T::of(0.5);
    (0..hw)
        .map(|px| {
            let mut best = T::zero();
            let mut label = 0u8;
            for &(i, k, p) in &picks {
                let s = crate::diffcore::sigmoid(masks[i * hw + px]);
                if s > half && p * s > best {
                    best = p * s;
                    label = k as u8 + 1;
                }
            }
            label
        })
        .collect()
}
