//! 16-bit PCM mono WAV files.

use std::path::Path;

use cpm_core::audio::Waveform;

use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Parses a RIFF/WAVE buffer holding 16-bit PCM mono audio; samples are
/// scaled to `[-1, 1)`.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    let bad = |m: &str| Error::Format(format!("wav: {}", m));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated chunk"))?;
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(bad("short fmt chunk"));
                }
                let (format, channels, bits) = (
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u16_at(bytes, body + 14),
                );
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(bad(&format!("need PCM mono 16-bit, got format {format}, {channels} channels, {bits} bits")));
                }
                rate = Some(u32_at(bytes, body + 4));
            }
            b"data" => {
                let rate = rate.ok_or_else(|| bad("data before fmt"))?;
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect();
                return Ok(Waveform { samples, rate });
            }
            _ => {}
        }
        pos = end + (len & 1);
    }
    Err(bad("no data chunk"))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    parse_wav(&read(path)?).map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.rate.to_le_bytes());
    out.extend_from_slice(&(w.rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    write_atomic(path, &encode_wav(w))
}
