//! On-disk synthetic datasets: `manifest.json` plus one `.arr` file per
//! scene and per noise clip, each checksummed.

use std::path::Path;

use cpm_core::audio::Waveform;
use cpm_core::diffcore::{codec, Array};
use cpm_core::synth::{ClassSpec, NoisePool, Scene, SynthConfig, SyntheticSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read, read_json, sha256_hex, write_atomic, write_json};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: SynthConfig,
    pub classes: Vec<ClassSpec>,
    pub sample_rate: u32,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub noise_tone_bins: Vec<usize>,
    /// Each scene file holds image, labels, audio labels and waveform.
    pub scenes: Vec<FileEntry>,
    pub noise: Vec<FileEntry>,
}

fn scene_bytes(scene: &Scene) -> Result<Vec<u8>> {
    let (h, w) = (scene.image.shape()[0], scene.image.shape()[1]);
    let mut out = Vec::new();
    codec::encode_f32(&scene.image, &mut out);
    let labels = scene.labels.iter().map(|&l| l as f32).collect();
    codec::encode_f32(&Array::new(&[h, w], labels)?, &mut out);
    let audio = scene
        .audio_labels
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    codec::encode_f32(&Array::new(&[scene.audio_labels.len()], audio)?, &mut out);
    codec::encode_f32(&waveform_array(&scene.waveform)?, &mut out);
    Ok(out)
}

fn waveform_array(w: &Waveform) -> Result<Array<f32>> {
    Ok(Array::new(&[w.samples.len()], w.samples.clone())?)
}

fn waveform(a: Array<f32>, rate: u32) -> Waveform {
    Waveform {
        samples: a.into_data(),
        rate,
    }
}

fn scene_from_bytes(index: usize, mut buf: &[u8], rate: u32, path: &Path) -> Result<Scene> {
    let bad = |what: &str| Error::Format(format!("{}: {}", path.display(), what));
    let image = codec::decode::<f32>(&mut buf)?;
    let labels = codec::decode::<f32>(&mut buf)?;
    let audio = codec::decode::<f32>(&mut buf)?;
    let wave = codec::decode::<f32>(&mut buf)?;
    if !buf.is_empty() {
        return Err(bad("trailing bytes"));
    }
    if image.shape().len() != 3 || labels.shape() != &image.shape()[..2] {
        return Err(bad("image and label shapes disagree"));
    }
    Ok(Scene {
        index,
        image,
        labels: labels.data().iter().map(|&l| l as u8).collect(),
        audio_labels: audio.data().iter().map(|&v| v > 0.5).collect(),
        waveform: waveform(wave, rate),
    })
}

/// Writes `set` into `dir`, which is created if needed.
pub fn save(set: &SyntheticSet, dir: &Path) -> Result<DatasetManifest> {
    let rate = set
        .scenes
        .first()
        .map_or(cpm_core::audio::SAMPLE_RATE, |s| s.waveform.rate);
    let mut scenes = Vec::with_capacity(set.scenes.len());
    for scene in &set.scenes {
        let name = format!("scene_{:05}.arr", scene.index);
        let bytes = scene_bytes(scene)?;
        write_atomic(&dir.join(&name), &bytes)?;
        scenes.push(FileEntry {
            name,
            sha256: sha256_hex(&bytes),
        });
    }
    let mut noise = Vec::with_capacity(set.noise.clips.len());
    for (i, clip) in set.noise.clips.iter().enumerate() {
        let name = format!("noise_{:03}.arr", i);
        let mut bytes = Vec::new();
        codec::encode_f32(&waveform_array(clip)?, &mut bytes);
        write_atomic(&dir.join(&name), &bytes)?;
        noise.push(FileEntry {
            name,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed: set.seed,
        config: set.config.clone(),
        classes: set.classes.clone(),
        sample_rate: rate,
        train: set.train.clone(),
        test: set.test.clone(),
        noise_tone_bins: set.noise.tone_bins.clone(),
        scenes,
        noise,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn checked(dir: &Path, entry: &FileEntry) -> Result<Vec<u8>> {
    let path = dir.join(&entry.name);
    let bytes = read(&path)?;
    let found = sha256_hex(&bytes);
    if found != entry.sha256 {
        return Err(Error::Checksum {
            path,
            expected: entry.sha256.clone(),
            found,
        });
    }
    Ok(bytes)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let value: serde_json::Value = read_json(&path)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            path,
            found,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|source| Error::Json { path, source })
}

/// Loads and verifies a dataset written by [`save`].
pub fn load(dir: &Path) -> Result<SyntheticSet> {
    let m = load_manifest(dir)?;
    let scenes = m
        .scenes
        .iter()
        .enumerate()
        .map(|(i, e)| scene_from_bytes(i, &checked(dir, e)?, m.sample_rate, &dir.join(&e.name)))
        .collect::<Result<Vec<_>>>()?;
    let clips = m
        .noise
        .iter()
        .map(|e| {
            Ok(waveform(
                codec::decode_exact::<f32>(&checked(dir, e)?)?,
                m.sample_rate,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scenes.len();
    if m.train.iter().chain(&m.test).any(|&i| i >= n) {
        return Err(Error::Format(format!(
            "{}: split index out of range",
            dir.display()
        )));
    }
    Ok(SyntheticSet {
        config: m.config,
        seed: m.seed,
        classes: m.classes,
        scenes,
        noise: NoisePool {
            clips,
            tone_bins: m.noise_tone_bins,
        },
        train: m.train,
        test: m.test,
    })
}
