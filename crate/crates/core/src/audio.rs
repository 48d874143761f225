//! Waveform to magnitude spectrogram, spectrogram mixing, and ratio-mask
//! targets for mix-and-separate training.
//!
//! Framing: no centre padding; frame `t` covers samples `160 t .. 160 t + 400`
//! under a periodic Hann window, zero-padded to 512 points. The first 96
//! frames are kept, and bins 1..=256 of the one-sided spectrum (DC dropped),
//! so a one-second clip at 16 kHz gives exactly 96 x 256.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffcore::Array;
use crate::error::{invalid, shape_err, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SAMPLES: usize = 16_000;
pub const N_FFT: usize = 512;
pub const WIN_LEN: usize = 400;
pub const HOP: usize = 160;
pub const FRAMES: usize = 96;
pub const BINS: usize = 256;

/// Division guard for silent bins in [`ratio_target`].
pub const RATIO_EPS: f32 = 1e-8;

/// Mono clip at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self {
            samples,
            rate: SAMPLE_RATE,
        }
    }

    pub fn silent() -> Self {
        Self::new(vec![0.0; CLIP_SAMPLES])
    }

    /// Frequency of a one-sided FFT bin index (before the DC bin is dropped).
    pub fn bin_hz(bin: usize) -> f64 {
        bin as f64 * SAMPLE_RATE as f64 / N_FFT as f64
    }
}

/// Non-negative `T x F` magnitude grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram(pub Array<f32>);

impl Spectrogram {
    pub fn zeros() -> Self {
        Self(Array::zeros(&[FRAMES, BINS]))
    }

    pub fn from_array(a: Array<f32>) -> Result<Self> {
        if a.shape().len() != 2 {
            return Err(shape_err("Spectrogram", format!("{:?}", a.shape())));
        }
        if a.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(invalid("spectrogram magnitudes must be non-negative"));
        }
        Ok(Self(a))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.rows(), self.0.cols())
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    /// `ln(1 + a)` compression used as the encoder input.
    pub fn log_compressed(&self) -> Array<f32> {
        self.0.map(|v| libm::log1pf(v))
    }
}

/// Element-wise share of a source in a mixture, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioMask(pub Array<f32>);

impl RatioMask {
    pub fn data(&self) -> &[f32] {
        self.0.data()
    }
}

fn hann_periodic() -> [f64; WIN_LEN] {
    let mut w = [0.0; WIN_LEN];
    for (n, v) in w.iter_mut().enumerate() {
        *v = 0.5 - 0.5 * libm::cos(core::f64::consts::TAU * n as f64 / WIN_LEN as f64);
    }
    w
}

/// In-place iterative radix-2 FFT over interleaved `(re, im)` pairs.
pub(crate) fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -core::f64::consts::TAU / len as f64;
        let (wr, wi) = (libm::cos(ang), libm::sin(ang));
        for start in (0..n).step_by(len) {
            let (mut cr, mut ci) = (1.0, 0.0);
            for k in 0..len / 2 {
                let (a, b) = (start + k, start + k + len / 2);
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
        len <<= 1;
    }
}

/// Magnitude STFT of a one-second 16 kHz clip.
pub fn stft_magnitude(w: &Waveform) -> Result<Spectrogram> {
    if w.rate != SAMPLE_RATE {
        return Err(invalid(format!(
            "sample rate {} (expected {})",
            w.rate, SAMPLE_RATE
        )));
    }
    if w.samples.len() != CLIP_SAMPLES {
        return Err(invalid(format!(
            "{} samples (expected {})",
            w.samples.len(),
            CLIP_SAMPLES
        )));
    }
    let win = hann_periodic();
    let mut out = Array::zeros(&[FRAMES, BINS]);
    let mut re = [0.0f64; N_FFT];
    let mut im = [0.0f64; N_FFT];
    for t in 0..FRAMES {
        let start = t * HOP;
        re.iter_mut().for_each(|v| *v = 0.0);
        im.iter_mut().for_each(|v| *v = 0.0);
        for n in 0..WIN_LEN {
            re[n] = w.samples[start + n] as f64 * win[n];
        }
        fft_in_place(&mut re, &mut im);
        let row = out.row_mut(t);
        for (f, v) in row.iter_mut().enumerate() {
            let k = f + 1;
            *v = libm::hypot(re[k], im[k]) as f32;
        }
    }
    Ok(Spectrogram(out))
}

/// Element-wise sum of two magnitude spectrograms.
pub fn mix(a: &Spectrogram, b: &Spectrogram) -> Result<Spectrogram> {
    if a.0.shape() != b.0.shape() {
        return Err(shape_err(
            "mix",
            format!("{:?} vs {:?}", a.0.shape(), b.0.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Spectrogram(Array::new(a.0.shape(), data)?))
}

/// `clamp(a_i / (a_p + eps), 0, 1)` element-wise.
pub fn ratio_target(clean: &Spectrogram, mixture: &Spectrogram) -> Result<RatioMask> {
    if clean.0.shape() != mixture.0.shape() {
        return Err(shape_err(
            "ratio_target",
            format!("{:?} vs {:?}", clean.0.shape(), mixture.0.shape()),
        ));
    }
    let data = clean
        .data()
        .iter()
        .zip(mixture.data())
        .map(|(&c, &p)| (c / (p + RATIO_EPS)).clamp(0.0, 1.0))
        .collect();
    Ok(RatioMask(Array::new(clean.0.shape(), data)?))
}
