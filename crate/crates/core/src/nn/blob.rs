//! Minimal container: magic, JSON header, then shaped little-endian f32
//! tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn encode(magic: &[u8; 8], header: &serde_json::Value, tensors: &[&Tensor]) -> Vec<u8> {
    let header = header.to_string();
    let mut out = magic.to_vec();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<(serde_json::Value, Vec<Tensor>)> {
    let bad = |m: &str| Error::Invalid(format!("malformed model file: {m}"));
    if bytes.get(..8) != Some(magic.as_slice()) {
        return Err(bad("magic"));
    }
    let mut pos = 8;
    let u32_at = |pos: &mut usize| -> Result<usize> {
        let s = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated"))?;
        *pos += 4;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize)
    };
    let hl = u32_at(&mut pos)?;
    let header = serde_json::from_slice(bytes.get(pos..pos + hl).ok_or_else(|| bad("header"))?)
        .map_err(|e| bad(&e.to_string()))?;
    pos += hl;
    let count = u32_at(&mut pos)?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = u32_at(&mut pos)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut pos)?);
        }
        let len: usize = shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * len).ok_or_else(|| bad("tensor data"))?;
        pos += 4 * len;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(shape, data));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, tensors))
}
