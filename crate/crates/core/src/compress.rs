//! Adaptive compression of gradient shards into compact differential
//! payloads, and exact decompression for replay.
//!
//! Small tensors go through dense symmetric INT8 quantization; large tensors
//! are sparsified by a sampled magnitude threshold in a single pass, keeping
//! FP16 values and INT32 indices. Tensors longer than the chunk limit are
//! split before compression and rebased on reassembly so indices never
//! overflow 32 bits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::f16::{f16_bits_to_f32, f32_to_f16_bits};
use crate::rng::SplitMix64;
use crate::state::Reader;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("corrupt payload: {0}")]
    Corrupt(String),
}

/// Compression knobs. `small_threshold` and `k` follow the system defaults;
/// the sample size is large enough to keep the kept-entry count inside a
/// tight band around `k * n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressConfig {
    /// Tensors shorter than this are quantized densely instead of sparsified.
    pub small_threshold: usize,
    /// Target sparsification ratio for large tensors.
    pub k: f64,
    /// Number of uniform samples used to estimate the magnitude threshold.
    pub sample_size: usize,
    /// Maximum elements per chunk; must fit in an i32 index.
    pub chunk_limit: usize,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            small_threshold: 100_000,
            k: 0.01,
            sample_size: 32_768,
            chunk_limit: i32::MAX as usize,
        }
    }
}

impl CompressConfig {
    pub fn validate(&self) -> Result<(), crate::error::ConfigError> {
        use crate::error::ConfigError;
        if self.small_threshold == 0 {
            return Err(ConfigError::new("compression.small_threshold", "must be > 0"));
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(ConfigError::new("compression.k", "must be in (0, 1]"));
        }
        if self.sample_size == 0 {
            return Err(ConfigError::new("compression.sample_size", "must be >= 1"));
        }
        if self.chunk_limit == 0 || self.chunk_limit > i32::MAX as usize {
            return Err(ConfigError::new(
                "compression.chunk_limit",
                "must be in [1, 2^31 - 1]",
            ));
        }
        Ok(())
    }
}

/// One chunk of a sparsified tensor. Indices are local to the chunk and
/// rebased by `base_offset` on decompression.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseChunk {
    pub base_offset: u64,
    /// Raw binary16 encodings of the kept values.
    pub values: Vec<u16>,
    pub indices: Vec<i32>,
}

/// A compressed gradient payload.
#[derive(Debug, Clone, PartialEq)]
pub enum CompressedPayload {
    /// Dense symmetric INT8 quantization: `value = scale * q`.
    QuantizedDense {
        q: Vec<i8>,
        scale: f64,
        length: u64,
    },
    /// Threshold-sparsified FP16 values with INT32 indices, chunked.
    SparseChunks {
        chunks: Vec<SparseChunk>,
        original_length: u64,
        threshold: f64,
        /// Ratio the encoder targeted. Not part of the wire format; decoded
        /// payloads carry 0.
        k_target: f64,
    },
    /// Uncompressed f32 passthrough used when compression is disabled.
    RawDense { values: Vec<f32> },
}

const TAG_QUANTIZED: u8 = 1;
const TAG_SPARSE: u8 = 2;
const TAG_RAW: u8 = 3;

/// Compresses one gradient shard. Deterministic given `(values, seed, cfg)`.
pub fn compress(values: &[f32], seed: u64, cfg: &CompressConfig) -> CompressedPayload {
    if values.len() < cfg.small_threshold {
        quantize_dense(values)
    } else {
        sparsify(values, seed, cfg)
    }
}

fn quantize_dense(values: &[f32]) -> CompressedPayload {
    let max_abs = values.iter().fold(0.0f32, |acc, &x| acc.max(x.abs()));
    let scale = if max_abs == 0.0 {
        1.0
    } else {
        max_abs as f64 / 127.0
    };
    let q = values
        .iter()
        .map(|&x| ((x as f64 / scale).round()).clamp(-127.0, 127.0) as i8)
        .collect();
    CompressedPayload::QuantizedDense {
        q,
        scale,
        length: values.len() as u64,
    }
}

fn sparsify(values: &[f32], seed: u64, cfg: &CompressConfig) -> CompressedPayload {
    let n = values.len();
    let threshold = estimate_threshold(values, seed, cfg);
    let mut chunks = Vec::with_capacity(n.div_ceil(cfg.chunk_limit).max(1));
    let mut start = 0usize;
    while start < n {
        let end = (start + cfg.chunk_limit).min(n);
        let mut chunk = SparseChunk {
            base_offset: start as u64,
            values: Vec::new(),
            indices: Vec::new(),
        };
        for (local, &x) in values[start..end].iter().enumerate() {
            let mag = x.abs();
            if mag >= threshold && mag > 0.0 {
                chunk.values.push(f32_to_f16_bits(x));
                chunk.indices.push(local as i32);
            }
        }
        chunks.push(chunk);
        start = end;
    }
    CompressedPayload::SparseChunks {
        chunks,
        original_length: n as u64,
        threshold: threshold as f64,
        k_target: cfg.k,
    }
}

/// Estimates the `(1 - k)` magnitude quantile from a seeded uniform sample.
/// Ties at the threshold are kept by the `>=` comparison in the scan.
fn estimate_threshold(values: &[f32], seed: u64, cfg: &CompressConfig) -> f32 {
    let n = values.len();
    let sample_size = cfg.sample_size.min(n).max(1);
    let mut rng = SplitMix64::new(seed);
    let mut sample: Vec<f32> = (0..sample_size)
        .map(|_| values[rng.next_index(n)].abs())
        .collect();
    sample.sort_by(f32::total_cmp);
    let one_based = ((1.0 - cfg.k) * sample_size as f64).ceil() as usize;
    let idx = one_based.saturating_sub(1).min(sample_size - 1);
    sample[idx]
}

/// Reconstructs the dense tensor. Quantized payloads dequantize from their
/// stored scale; sparse payloads fuse chunks into zeros with the half
/// precision values widened back to f32.
pub fn decompress(payload: &CompressedPayload) -> Result<Vec<f32>, CodecError> {
    match payload {
        CompressedPayload::QuantizedDense { q, scale, length } => {
            if q.len() as u64 != *length {
                return Err(CodecError::Corrupt(format!(
                    "quantized length {} != declared {length}",
                    q.len()
                )));
            }
            Ok(q.iter().map(|&qi| (scale * qi as f64) as f32).collect())
        }
        CompressedPayload::SparseChunks {
            chunks,
            original_length,
            ..
        } => {
            let n = *original_length as usize;
            let mut out = vec![0.0f32; n];
            if n == 0 {
                if !chunks.is_empty() {
                    return Err(CodecError::Corrupt("chunks on empty tensor".into()));
                }
                return Ok(out);
            }
            if chunks.is_empty() || chunks[0].base_offset != 0 {
                return Err(CodecError::Corrupt(
                    "chunks must tile the tensor starting at offset 0".into(),
                ));
            }
            for (ci, chunk) in chunks.iter().enumerate() {
                let next_base = chunks
                    .get(ci + 1)
                    .map(|c| c.base_offset)
                    .unwrap_or(*original_length);
                if next_base <= chunk.base_offset || next_base > *original_length {
                    return Err(CodecError::Corrupt(format!(
                        "chunk {ci}: base offsets not strictly increasing"
                    )));
                }
                let span = (next_base - chunk.base_offset) as usize;
                if chunk.values.len() != chunk.indices.len() {
                    return Err(CodecError::Corrupt(format!(
                        "chunk {ci}: {} values vs {} indices",
                        chunk.values.len(),
                        chunk.indices.len()
                    )));
                }
                let mut prev: i64 = -1;
                for (&bits, &idx) in chunk.values.iter().zip(&chunk.indices) {
                    if idx < 0 || idx as usize >= span {
                        return Err(CodecError::Corrupt(format!(
                            "chunk {ci}: index {idx} out of span {span}"
                        )));
                    }
                    if idx as i64 <= prev {
                        return Err(CodecError::Corrupt(format!(
                            "chunk {ci}: duplicate or unordered index {idx}"
                        )));
                    }
                    prev = idx as i64;
                    out[chunk.base_offset as usize + idx as usize] = f16_bits_to_f32(bits);
                }
            }
            Ok(out)
        }
        CompressedPayload::RawDense { values } => Ok(values.clone()),
    }
}

/// Exact serialized byte count of the payload's wire encoding.
pub fn payload_size(payload: &CompressedPayload) -> u64 {
    match payload {
        CompressedPayload::QuantizedDense { q, .. } => 1 + 8 + 8 + q.len() as u64,
        CompressedPayload::SparseChunks { chunks, .. } => {
            let per_chunk: u64 = chunks
                .iter()
                .map(|c| 8 + 4 + 6 * c.values.len() as u64)
                .sum();
            1 + 8 + 8 + 4 + per_chunk
        }
        CompressedPayload::RawDense { values } => 1 + 8 + 4 * values.len() as u64,
    }
}

/// Little-endian wire encoding.
pub fn encode(payload: &CompressedPayload) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload_size(payload) as usize);
    match payload {
        CompressedPayload::QuantizedDense { q, scale, length } => {
            out.push(TAG_QUANTIZED);
            out.extend_from_slice(&length.to_le_bytes());
            out.extend_from_slice(&scale.to_le_bytes());
            out.extend(q.iter().map(|&x| x as u8));
        }
        CompressedPayload::SparseChunks {
            chunks,
            original_length,
            threshold,
            ..
        } => {
            out.push(TAG_SPARSE);
            out.extend_from_slice(&original_length.to_le_bytes());
            out.extend_from_slice(&threshold.to_le_bytes());
            out.extend_from_slice(&(chunks.len() as u32).to_le_bytes());
            for c in chunks {
                out.extend_from_slice(&c.base_offset.to_le_bytes());
                out.extend_from_slice(&(c.values.len() as u32).to_le_bytes());
                for v in &c.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for i in &c.indices {
                    out.extend_from_slice(&i.to_le_bytes());
                }
            }
        }
        CompressedPayload::RawDense { values } => {
            out.push(TAG_RAW);
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    debug_assert_eq!(out.len() as u64, payload_size(payload));
    out
}

pub fn decode(bytes: &[u8]) -> Result<CompressedPayload, CodecError> {
    let corrupt = |m: String| CodecError::Corrupt(m);
    let mut r = Reader::new(bytes);
    let tag = r.u8().map_err(corrupt)?;
    let payload = match tag {
        TAG_QUANTIZED => {
            let length = r.u64().map_err(corrupt)?;
            let scale = r.f64().map_err(corrupt)?;
            let raw = r.take(length as usize).map_err(corrupt)?;
            CompressedPayload::QuantizedDense {
                q: raw.iter().map(|&b| b as i8).collect(),
                scale,
                length,
            }
        }
        TAG_SPARSE => {
            let original_length = r.u64().map_err(corrupt)?;
            let threshold = r.f64().map_err(corrupt)?;
            let chunk_count = r.u32().map_err(corrupt)?;
            let mut chunks = Vec::with_capacity(chunk_count as usize);
            for _ in 0..chunk_count {
                let base_offset = r.u64().map_err(corrupt)?;
                let entry_count = r.u32().map_err(corrupt)? as usize;
                let mut values = Vec::with_capacity(entry_count);
                for _ in 0..entry_count {
                    values.push(r.u16().map_err(corrupt)?);
                }
                let mut indices = Vec::with_capacity(entry_count);
                for _ in 0..entry_count {
                    indices.push(r.i32().map_err(corrupt)?);
                }
                chunks.push(SparseChunk {
                    base_offset,
                    values,
                    indices,
                });
            }
            CompressedPayload::SparseChunks {
                chunks,
                original_length,
                threshold,
                k_target: 0.0,
            }
        }
        TAG_RAW => {
            let length = r.u64().map_err(corrupt)? as usize;
            let mut values = Vec::with_capacity(length);
            for _ in 0..length {
                values.push(f32::from_bits(r.u32().map_err(corrupt)?));
            }
            CompressedPayload::RawDense { values }
        }
        t => return Err(CodecError::Corrupt(format!("unknown payload tag {t}"))),
    };
    r.finish().map_err(corrupt)?;
    Ok(payload)
}

/// Number of kept entries in a payload.
pub fn kept_entries(payload: &CompressedPayload) -> usize {
    match payload {
        CompressedPayload::QuantizedDense { q, .. } => q.len(),
        CompressedPayload::SparseChunks { chunks, .. } => {
            chunks.iter().map(|c| c.values.len()).sum()
        }
        CompressedPayload::RawDense { values } => values.len(),
    }
}

/// Decoded length of the payload.
pub fn original_length(payload: &CompressedPayload) -> usize {
    match payload {
        CompressedPayload::QuantizedDense { length, .. } => *length as usize,
        CompressedPayload::SparseChunks {
            original_length, ..
        } => *original_length as usize,
        CompressedPayload::RawDense { values } => values.len(),
    }
}
