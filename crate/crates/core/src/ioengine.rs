//! Executes a selection against a weights file and measures it.
//!
//! Each chunk becomes exactly one read request; the engine never merges or
//! splits what the planner chose.

use serde::{Deserialize, Serialize};

use crate::device::{run_batch, ReadDevice, ReadRequest};
use crate::error::{Error, Result};
use crate::latency::{calibrate_scale, estimate_mask_latency, LatencyTable};
use crate::mask::{Chunk, SelectionMask, WeightLayout};

pub const DEFAULT_WORKERS: usize = 6;

#[derive(Debug, Clone)]
pub struct ChunkRead {
    /// Bytes of each chunk, in input order, alignment padding removed.
    pub buffers: Vec<Vec<u8>>,
    pub measured_latency_us: f64,
}

/// Reads every chunk with a pool of `workers` concurrent readers.
pub fn read_chunks(
    device: &dyn ReadDevice,
    layout: WeightLayout,
    chunks: &[Chunk],
    workers: usize,
) -> Result<ChunkRead> {
    let mut requests = Vec::with_capacity(chunks.len());
    for &chunk in chunks {
        if chunk.len == 0 || chunk.end() > layout.n_rows {
            return Err(Error::Bounds {
                chunk,
                n_rows: layout.n_rows,
            });
        }
        let offset = layout.chunk_offset(chunk);
        let len = layout.chunk_bytes(chunk);
        if offset + len > device.len() {
            return Err(Error::Read {
                chunk,
                message: format!(
                    "bytes {}..{} beyond end of file ({} bytes)",
                    offset,
                    offset + len,
                    device.len()
                ),
            });
        }
        requests.push(ReadRequest { offset, len });
    }
    let out = run_batch(device, &requests, workers, true).map_err(|(i, e)| Error::Read {
        chunk: chunks[i],
        message: e.to_string(),
    })?;
    Ok(ChunkRead {
        buffers: out.buffers,
        measured_latency_us: out.elapsed_us,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyPair {
    pub estimated_us: f64,
    pub measured_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pairs: Vec<LatencyPair>,
    /// `None` when fewer than two non-empty masks or zero variance.
    pub correlation: Option<f64>,
    pub scale_factor: f64,
}

/// Estimates and measures each mask, then fits `measured ≈ k · estimated`.
pub fn validate_estimator(
    device: &dyn ReadDevice,
    layout: WeightLayout,
    table: &LatencyTable,
    masks: &[SelectionMask],
    workers: usize,
) -> Result<ValidationReport> {
    if masks.is_empty() {
        return Err(Error::Input(
            "estimator validation needs at least one mask".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(masks.len());
    for mask in masks {
        let estimated_us = estimate_mask_latency(mask, layout, table)?;
        let read = read_chunks(device, layout, &mask.chunks(), workers)?;
        pairs.push(LatencyPair {
            estimated_us,
            measured_us: read.measured_latency_us,
        });
    }
    let (est, meas): (Vec<f64>, Vec<f64>) = pairs
        .iter()
        .filter(|p| p.estimated_us > 0.0 && p.measured_us > 0.0)
        .map(|p| (p.estimated_us, p.measured_us))
        .unzip();
    if est.is_empty() {
        return Err(Error::Input(
            "all masks are empty; nothing to calibrate".into(),
        ));
    }
    let cal = calibrate_scale(&est, &meas)?;
    Ok(ValidationReport {
        pairs,
        correlation: cal.correlation,
        scale_factor: cal.scale_factor,
    })
}
