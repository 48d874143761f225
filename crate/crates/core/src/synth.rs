//! Deterministic synthetic audio-visual scenes and the off-screen noise pool.
//!
//! Each class owns a shape, a colour and a harmonic tone whose FFT bins are
//! kept apart from every other class. A scene draws one shape per sounding
//! class, so the visible foreground classes and the audible classes always
//! coincide.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, CLIP_SAMPLES, N_FFT, SAMPLE_RATE};
use crate::diffcore::Array;
use crate::error::{invalid, Error, Result};
use crate::rng::{normal, permutation, stream};

pub const BACKGROUND: u8 = 0;
/// Minimum FFT-bin distance between any two class tone partials.
pub const MIN_TONE_SEPARATION: usize = 2;
const DEFAULT_SPACING: usize = 4;
const MIN_VISIBLE_PIXELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    /// 1-based class id; 0 is background.
    pub id: u8,
    pub shape: ShapeKind,
    pub color: [f32; 3],
    /// Fundamental as a one-sided FFT bin index.
    pub tone_bin: usize,
    /// Amplitude of partial `h + 1` (frequency `(h + 1) * tone_bin`).
    pub harmonics: Vec<f32>,
}

impl ClassSpec {
    pub fn fundamental_hz(&self) -> f64 {
        Waveform::bin_hz(self.tone_bin)
    }

    pub fn partial_bins(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.harmonics.len()).map(move |h| h * self.tone_bin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub scenes: usize,
    /// Maximum sounding classes per scene.
    pub k_max: usize,
    /// Fraction of scenes with more than one source.
    pub multi_source_ratio: f64,
    pub pixel_noise: f32,
    pub noise_pool: usize,
    pub min_extent: usize,
    pub max_extent: usize,
    pub test_fraction: f64,
    /// Explicit class table; derived from `classes` when empty.
    pub class_specs: Vec<ClassSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            height: 32,
            width: 32,
            scenes: 2000,
            k_max: 2,
            multi_source_ratio: 0.5,
            pixel_noise: 0.02,
            noise_pool: 64,
            min_extent: 8,
            max_extent: 14,
            test_fraction: 0.2,
            class_specs: Vec::new(),
        }
    }
}

/// One audio-visual sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub index: usize,
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: Array<f32>,
    /// Per-pixel class id, row-major `H x W`; 0 is background.
    pub labels: Vec<u8>,
    /// Audio multi-label over classes `1..=C` (entry `c - 1`).
    pub audio_labels: Vec<bool>,
    pub waveform: Waveform,
}

impl Scene {
    /// Sounding class ids.
    pub fn sounding(&self) -> Vec<u8> {
        self.audio_labels
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(i, _)| (i + 1) as u8)
            .collect()
    }

    /// One-hot labels `H x W x (C + 1)`, channel 0 background.
    pub fn one_hot(&self) -> Array<f32> {
        let c1 = self.audio_labels.len() + 1;
        let mut out = Array::zeros(&[self.labels.len(), c1]);
        for (p, &l) in self.labels.iter().enumerate() {
            out.data_mut()[p * c1 + l as usize] = 1.0;
        }
        let (h, w) = (self.image.shape()[0], self.image.shape()[1]);
        out.reshape(&[h, w, c1]).expect("one-hot shape")
    }

    /// Binary mask of class `c`.
    pub fn class_mask(&self, c: u8) -> Vec<f32> {
        self.labels
            .iter()
            .map(|&l| if l == c { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Off-screen noise clips.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePool {
    pub clips: Vec<Waveform>,
    /// Tone bins used by the pool, all away from class partials.
    pub tone_bins: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub config: SynthConfig,
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub scenes: Vec<Scene>,
    pub noise: NoisePool,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SyntheticSet {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.30, 0.85],
    [0.15, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.55, 0.55],
];

fn far_from(bin: usize, used: &[usize], spacing: usize) -> bool {
    used.iter().all(|&u| bin.abs_diff(u) >= spacing)
}

/// Class table with tones chosen greedily so that all partials of all
/// classes sit at least four bins apart.
pub fn default_classes(c: usize) -> Result<Vec<ClassSpec>> {
    if c > PALETTE.len() {
        return Err(invalid(format!(
            "at most {} default classes",
            PALETTE.len()
        )));
    }
    let shapes = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle];
    let mut used: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(c);
    let mut bin = 8;
    while out.len() < c {
        let partials = [bin, 2 * bin, 3 * bin];
        if partials
            .iter()
            .all(|&p| p <= 240 && far_from(p, &used, DEFAULT_SPACING))
        {
            used.extend_from_slice(&partials);
            let i = out.len();
            out.push(ClassSpec {
                id: (i + 1) as u8,
                shape: shapes[i % shapes.len()],
                color: PALETTE[i],
                tone_bin: bin,
                harmonics: vec![1.0, 0.6 - 0.1 * (i % 3) as f32, 0.3 + 0.1 * (i % 2) as f32],
            });
        }
        bin += 1;
        if bin > 80 {
            return Err(invalid("could not place class tones"));
        }
    }
    Ok(out)
}

fn validate_classes(classes: &[ClassSpec]) -> Result<()> {
    let mut seen: Vec<(usize, u8)> = Vec::new();
    for (i, spec) in classes.iter().enumerate() {
        if spec.id as usize != i + 1 {
            return Err(invalid(format!(
                "class ids must be 1..=C in order, got {} at {}",
                spec.id, i
            )));
        }
        for p in spec.partial_bins() {
            if p == 0 || p > N_FFT / 2 {
                return Err(invalid(format!(
                    "class {} partial at bin {} out of range",
                    spec.id, p
                )));
            }
            if let Some(&(q, other)) = seen
                .iter()
                .find(|&&(q, _)| q.abs_diff(p) < MIN_TONE_SEPARATION)
            {
                return Err(invalid(format!(
                    "overlapping tone bins: class {} bin {} vs class {} bin {}",
                    spec.id, p, other, q
                )));
            }
        }
        for p in spec.partial_bins() {
            seen.push((p, spec.id));
        }
    }
    Ok(())
}

fn noise_tone_bins(classes: &[ClassSpec]) -> Vec<usize> {
    let used: Vec<usize> = classes.iter().flat_map(|c| c.partial_bins()).collect();
    (12..240)
        .step_by(5)
        .filter(|&b| far_from(b, &used, MIN_TONE_SEPARATION + 1))
        .collect()
}

fn tone(out: &mut [f32], bin: usize, amp: f32, phase: f64, on: usize, off: usize) {
    let w = core::f64::consts::TAU * Waveform::bin_hz(bin) / SAMPLE_RATE as f64;
    let ramp = 160usize;
    for n in on..off {
        let env = ((n - on).min(off - 1 - n) as f32 / ramp as f32).min(1.0);
        out[n] += amp * env * libm::sin(w * n as f64 + phase) as f32;
    }
}

fn scene_audio(classes: &[ClassSpec], sounding: &[u8], rng: &mut impl Rng) -> Waveform {
    let mut s = vec![0.0f32; CLIP_SAMPLES];
    for &k in sounding {
        let spec = &classes[k as usize - 1];
        let gain = rng.gen_range(0.5f32..1.0);
        let on = rng.gen_range(0..CLIP_SAMPLES * 3 / 10);
        let off = rng.gen_range(CLIP_SAMPLES * 7 / 10..=CLIP_SAMPLES);
        for (h, &amp) in spec.harmonics.iter().enumerate() {
            let phase = rng.gen_range(0.0..core::f64::consts::TAU);
            tone(&mut s, (h + 1) * spec.tone_bin, gain * amp, phase, on, off);
        }
    }
    Waveform::new(s)
}

fn noise_clip(tone_bins: &[usize], rng: &mut impl Rng) -> Waveform {
    let mut s = vec![0.0f32; CLIP_SAMPLES];
    let tones = rng.gen_range(1..=2);
    for _ in 0..tones {
        let bin = tone_bins[rng.gen_range(0..tone_bins.len())];
        let on = rng.gen_range(0..CLIP_SAMPLES / 2);
        let off = rng.gen_range(on + CLIP_SAMPLES / 4..=CLIP_SAMPLES);
        tone(
            &mut s,
            bin,
            rng.gen_range(0.3f32..1.0),
            rng.gen_range(0.0..core::f64::consts::TAU),
            on,
            off,
        );
    }
    // broadband burst
    let len = rng.gen_range(CLIP_SAMPLES / 10..CLIP_SAMPLES * 3 / 10);
    let start = rng.gen_range(0..CLIP_SAMPLES - len);
    let amp = rng.gen_range(0.05f32..0.2);
    for v in &mut s[start..start + len] {
        *v += amp * normal(rng) as f32;
    }
    Waveform::new(s)
}

fn inside(kind: ShapeKind, cy: f32, cx: f32, half: f32, y: f32, x: f32) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    match kind {
        ShapeKind::Disc => dy * dy + dx * dx <= half * half,
        ShapeKind::Square => dy.abs() <= half && dx.abs() <= half,
        // apex up, base at cy + half
        ShapeKind::Triangle => dy >= -half && dy <= half && dx.abs() <= (dy + half) * 0.5,
    }
}

fn draw_scene(
    cfg: &SynthConfig,
    classes: &[ClassSpec],
    sounding: &[u8],
    rng: &mut impl Rng,
) -> Result<(Vec<u8>, Vec<[f32; 3]>)> {
    let (h, w) = (cfg.height, cfg.width);
    'attempt: for _ in 0..200 {
        let mut labels = vec![BACKGROUND; h * w];
        for &k in sounding {
            let ext = rng.gen_range(cfg.min_extent..=cfg.max_extent) as f32;
            let half = ext / 2.0;
            let cy = rng.gen_range(half..(h as f32 - half).max(half + 1e-3));
            let cx = rng.gen_range(half..(w as f32 - half).max(half + 1e-3));
            let kind = classes[k as usize - 1].shape;
            for y in 0..h {
                for x in 0..w {
                    if inside(kind, cy, cx, half, y as f32 + 0.5, x as f32 + 0.5) {
                        labels[y * w + x] = k;
                    }
                }
            }
        }
        for &k in sounding {
            if labels.iter().filter(|&&l| l == k).count() < MIN_VISIBLE_PIXELS {
                continue 'attempt;
            }
        }
        let bg = [
            rng.gen_range(0.05f32..0.35),
            rng.gen_range(0.05f32..0.35),
            rng.gen_range(0.05f32..0.35),
        ];
        let mut colors = vec![bg];
        colors.extend(classes.iter().map(|c| c.color));
        return Ok((labels, colors));
    }
    Err(Error::Placement(format!(
        "could not place {} visible shapes on a {}x{} grid",
        sounding.len(),
        h,
        w
    )))
}

fn validate_config(cfg: &SynthConfig) -> Result<()> {
    if cfg.classes < 2 {
        return Err(invalid("need at least two classes"));
    }
    if cfg.height < 16 || cfg.width < 16 {
        return Err(invalid("image must be at least 16x16"));
    }
    if cfg.scenes == 0 {
        return Err(invalid("need at least one scene"));
    }
    if cfg.k_max == 0 || cfg.k_max > cfg.classes {
        return Err(invalid(format!(
            "k_max {} must lie in 1..={}",
            cfg.k_max, cfg.classes
        )));
    }
    if cfg.min_extent == 0
        || cfg.min_extent > cfg.max_extent
        || cfg.max_extent > cfg.height.min(cfg.width)
    {
        return Err(invalid(
            "shape extents must satisfy 0 < min <= max <= image side",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.multi_source_ratio) || !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(invalid("ratios must lie in [0, 1]"));
    }
    // every shape needs room for its visible pixels
    if cfg.k_max * MIN_VISIBLE_PIXELS * 2 > cfg.height * cfg.width
        || cfg.k_max * cfg.min_extent * cfg.min_extent > 2 * cfg.height * cfg.width
    {
        return Err(Error::Placement(format!(
            "{} shapes of extent >= {} do not fit a {}x{} grid",
            cfg.k_max, cfg.min_extent, cfg.height, cfg.width
        )));
    }
    Ok(())
}

/// Generates scene `index` of a dataset; pure in `(config, classes, seed, index)`.
pub fn generate_scene(
    cfg: &SynthConfig,
    classes: &[ClassSpec],
    seed: u64,
    index: usize,
) -> Result<Scene> {
    let mut rng = stream(seed, "scene", index as u64, 0);
    let c = classes.len();
    let multi = cfg.k_max > 1 && rng.gen::<f64>() < cfg.multi_source_ratio;
    let count = if multi {
        rng.gen_range(2..=cfg.k_max)
    } else {
        1
    };
    let order = permutation(&mut rng, c);
    let mut sounding: Vec<u8> = order[..count].iter().map(|&i| (i + 1) as u8).collect();
    sounding.sort_unstable();

    let (labels, colors) = draw_scene(cfg, classes, &sounding, &mut rng)?;
    let (h, w) = (cfg.height, cfg.width);
    let mut img = Vec::with_capacity(h * w * 3);
    for &l in &labels {
        let col = colors[l as usize];
        for ch in col {
            let v = ch + cfg.pixel_noise * normal(&mut rng) as f32;
            img.push(v.clamp(0.0, 1.0));
        }
    }
    let mut audio_labels = vec![false; c];
    for &k in &sounding {
        audio_labels[k as usize - 1] = true;
    }
    let waveform = scene_audio(classes, &sounding, &mut rng);
    Ok(Scene {
        index,
        image: Array::new(&[h, w, 3], img)?,
        labels,
        audio_labels,
        waveform,
    })
}

pub fn generate_noise_pool(classes: &[ClassSpec], size: usize, seed: u64) -> NoisePool {
    let tone_bins = noise_tone_bins(classes);
    let clips = (0..size)
        .map(|i| noise_clip(&tone_bins, &mut stream(seed, "noise-pool", i as u64, 0)))
        .collect();
    NoisePool { clips, tone_bins }
}

/// Seed-stable 80/20-style split of `0..n`.
pub fn split(seed: u64, n: usize, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let perm = permutation(&mut stream(seed, "split", 0, 0), n);
    let n_test = libm::round(n as f64 * test_fraction) as usize;
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

pub fn resolve_classes(cfg: &SynthConfig) -> Result<Vec<ClassSpec>> {
    let classes = if cfg.class_specs.is_empty() {
        default_classes(cfg.classes)?
    } else {
        if cfg.class_specs.len() != cfg.classes {
            return Err(invalid(format!(
                "{} class specs for {} classes",
                cfg.class_specs.len(),
                cfg.classes
            )));
        }
        cfg.class_specs.clone()
    };
    validate_classes(&classes)?;
    Ok(classes)
}

/// Full dataset: scenes, noise pool and split.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SyntheticSet> {
    validate_config(cfg)?;
    let classes = resolve_classes(cfg)?;
    let scenes = (0..cfg.scenes)
        .map(|i| generate_scene(cfg, &classes, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let noise = generate_noise_pool(&classes, cfg.noise_pool.max(1), seed);
    let (train, test) = split(seed, cfg.scenes, cfg.test_fraction);
    Ok(SyntheticSet {
        config: cfg.clone(),
        seed,
        classes,
        scenes,
        noise,
        train,
        test,
    })
}

/// Checks that visible foreground classes equal audible classes.
pub fn check_consistency(scene: &Scene) -> core::result::Result<(), String> {
    let c = scene.audio_labels.len();
    let mut visible = vec![false; c];
    for &l in &scene.labels {
        if l as usize > c {
            return Err(format!("label {} out of range", l));
        }
        if l != BACKGROUND {
            visible[l as usize - 1] = true;
        }
    }
    if visible != scene.audio_labels {
        return Err(format!(
            "scene {}: visible {:?} vs audible {:?}",
            scene.index, visible, scene.audio_labels
        ));
    }
    Ok(())
}
