//! Cost of moving chunks from the caller's token layout into the scheduled
//! placement (and back afterwards).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::costmodel::{unit_efficiency, EfficiencyCurve, HardwareConfig, ModelConfig};
use crate::distributor::Placement;
use crate::error::{Error, Result};
use crate::sharding::ChunkId;

pub type Layout = HashMap<ChunkId, usize>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialLayout {
    /// Sequences concatenated and cut into equal token ranges per worker.
    #[default]
    Contiguous,
    /// Chunks dealt to workers in turn.
    RoundRobin,
}

fn ordered_chunks(placement: &Placement) -> Vec<(ChunkId, u64)> {
    placement
        .deps
        .chunks()
        .map(|c| (c.id(), c.tokens))
        .collect()
}

pub fn contiguous_layout(placement: &Placement) -> Layout {
    let n = placement.n_workers() as u128;
    let chunks = ordered_chunks(placement);
    let total: u128 = chunks
        .iter()
        .map(|&(_, t)| u128::from(t))
        .sum::<u128>()
        .max(1);
    let mut offset = 0u128;
    chunks
        .into_iter()
        .map(|(id, t)| {
            let w = (offset * n / total).min(n - 1) as usize;
            offset += u128::from(t);
            (id, w)
        })
        .collect()
}

pub fn round_robin_layout(placement: &Placement) -> Layout {
    let n = placement.n_workers();
    ordered_chunks(placement)
        .into_iter()
        .enumerate()
        .map(|(i, (id, _))| (id, i % n))
        .collect()
}

pub fn initial_layout(kind: InitialLayout, placement: &Placement) -> Layout {
    match kind {
        InitialLayout::Contiguous => contiguous_layout(placement),
        InitialLayout::RoundRobin => round_robin_layout(placement),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReshuffleReport {
    pub bytes_out: Vec<u64>,
    pub bytes_in: Vec<u64>,
    pub total_bytes: u64,
    /// Seconds for the busiest port.
    pub time: f64,
    /// Share of `time` that the least-covered worker can hide behind its
    /// purely local compute.
    pub hideable_fraction: f64,
}

/// Seconds of compute each worker can do without any remote KV.
pub fn local_compute_times(
    placement: &Placement,
    hw: &HardwareConfig,
    cfg: &ModelConfig,
    curve: &EfficiencyCurve,
) -> Vec<f64> {
    let owners = placement.chunk_owners();
    let mut out = vec![0.0; placement.n_workers()];
    for unit in &placement.units {
        let w = placement.worker_of_unit(unit.id);
        let eff = unit_efficiency(unit, curve);
        for q in &unit.members {
            let pairs: u64 = placement
                .deps
                .producers(q.id())
                .filter(|kv| owners[kv] == w)
                .map(|kv| placement.deps.tile_pairs(q.id(), kv))
                .sum();
            out[w] += cfg.flops_per_pair() * pairs as f64 / (hw.peak_flops * eff);
        }
    }
    out
}

/// Moves Q, K and V of every chunk whose worker differs between `initial`
/// and the placement.
pub fn reshuffle_cost(
    initial: &Layout,
    placement: &Placement,
    hw: &HardwareConfig,
    cfg: &ModelConfig,
    curve: &EfficiencyCurve,
) -> Result<ReshuffleReport> {
    let target = placement.chunk_owners();
    if initial.len() != target.len() {
        return Err(Error::Consistency(format!(
            "initial layout covers {} chunks, placement {}",
            initial.len(),
            target.len()
        )));
    }
    let n = placement.n_workers();
    let mut bytes_out = vec![0u64; n];
    let mut bytes_in = vec![0u64; n];
    for chunk in placement.deps.chunks() {
        let from = *initial.get(&chunk.id()).ok_or_else(|| {
            Error::Consistency(format!("initial layout lacks chunk {}", chunk.id()))
        })?;
        if from >= n {
            return Err(Error::Consistency(format!(
                "chunk {} on worker {from} of {n}",
                chunk.id()
            )));
        }
        let to = target[&chunk.id()];
        if from != to {
            let b = chunk.tokens * cfg.qkv_bytes_per_token();
            bytes_out[from] += b;
            bytes_in[to] += b;
        }
    }
    let total_bytes = bytes_out.iter().sum();
    let time = bytes_out
        .iter()
        .zip(&bytes_in)
        .map(|(&o, &i)| o.max(i) as f64 / hw.nic_bandwidth)
        .fold(0.0, f64::max);
    let hideable_fraction = if time > 0.0 {
        let local = local_compute_times(placement, hw, cfg, curve);
        (local.into_iter().fold(f64::INFINITY, f64::min) / time).min(1.0)
    } else {
        1.0
    };
    Ok(ReshuffleReport {
        bytes_out,
        bytes_in,
        total_bytes,
        time,
        hideable_fraction,
    })
}
