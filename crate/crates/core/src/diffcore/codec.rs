//! Binary array encoding shared by dataset files and checkpoints.
//!
//! Layout (all little-endian): `u32 rank`, `rank x u64` extents, then the
//! values as `f32`. Setting the top bit of the rank word marks an `f64`
//! payload, which checkpoints use for mixture statistics.

use alloc::format;
use alloc::vec::Vec;

use super::{Array, Scalar};
use crate::error::{Error, Result};

const WIDE_FLAG: u32 = 0x8000_0000;

pub fn encode_f32<T: Scalar>(a: &Array<T>, out: &mut Vec<u8>) {
    write_header(a.shape(), false, out);
    out.reserve(a.len() * 4);
    for &v in a.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

pub fn encode_f64(a: &Array<f64>, out: &mut Vec<u8>) {
    write_header(a.shape(), true, out);
    out.reserve(a.len() * 8);
    for &v in a.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_header(shape: &[usize], wide: bool, out: &mut Vec<u8>) {
    let mut rank = shape.len() as u32;
    if wide {
        rank |= WIDE_FLAG;
    }
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Codec(format!(
            "need {} bytes, {} left",
            n,
            buf.len()
        )));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

/// Decodes one array from the front of `buf`, advancing it.
pub fn decode<T: Scalar>(buf: &mut &[u8]) -> Result<Array<T>> {
    let word = u32::from_le_bytes(take(buf, 4)?.try_into().unwrap());
    let wide = word & WIDE_FLAG != 0;
    let rank = (word & !WIDE_FLAG) as usize;
    if rank > 16 {
        return Err(Error::Codec(format!("implausible rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(buf, 8)?.try_into().unwrap());
        shape
            .push(usize::try_from(d).map_err(|_| Error::Codec(format!("extent {} too large", d)))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Codec("element count overflows".into()))?;
    let width = if wide { 8 } else { 4 };
    let bytes = take(
        buf,
        n.checked_mul(width)
            .ok_or_else(|| Error::Codec("size overflows".into()))?,
    )?;
    let data = if wide {
        bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()
    } else {
        bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    };
    Array::new(&shape, data)
}

/// Decodes a buffer holding exactly one array.
pub fn decode_exact<T: Scalar>(mut buf: &[u8]) -> Result<Array<T>> {
    let a = decode(&mut buf)?;
    if !buf.is_empty() {
        return Err(Error::Codec(format!("{} trailing bytes", buf.len())));
    }
    Ok(a)
}
