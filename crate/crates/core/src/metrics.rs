//! Imbalance, utilization and weak-scaling sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{EfficiencyCurve, HardwareConfig};
use crate::error::{Error, Result};
use crate::scheduler::{schedule, ScheduleConfig, SchedulerKind};
use crate::simulator::SimReport;
use crate::workload::{build_batches, generate_trace, Batch, DistributionSpec, SequenceTrace};

/// `(max - mean) / max`, or exactly 0 when every load is equal.
pub fn imbalance_ratio(loads: &[f64]) -> Result<f64> {
    if loads.is_empty() {
        return Err(Error::Parameter("imbalance of an empty load list".into()));
    }
    if loads.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Parameter("loads must be non-negative".into()));
    }
    let max = loads.iter().copied().fold(0.0, f64::max);
    // The mean of equal values need not round back to the value itself.
    if loads.iter().all(|&l| l == max) {
        return Ok(0.0);
    }
    let mean = loads.iter().sum::<f64>() / loads.len() as f64;
    Ok(((max - mean) / max).max(0.0))
}

/// Achieved over peak attention FLOP rate across all workers.
pub fn raw_mfu(report: &SimReport, hw: &HardwareConfig, n_workers: usize) -> Result<f64> {
    if !(report.total_time > 0.0) {
        return Err(Error::Parameter("MFU of a run with zero duration".into()));
    }
    if n_workers == 0 {
        return Err(Error::Parameter("MFU needs at least one worker".into()));
    }
    Ok(report.total_flops / (n_workers as f64 * hw.peak_flops * report.total_time))
}

/// Raw MFU relative to the kernel's saturated efficiency, so that a
/// balanced, fully overlapped run of large blocks scores 1.
pub fn attention_mfu(
    report: &SimReport,
    hw: &HardwareConfig,
    curve: &EfficiencyCurve,
    n_workers: usize,
) -> Result<f64> {
    Ok(raw_mfu(report, hw, n_workers)? / curve.saturation())
}

/// Compute and communication imbalance of a simulated run.
pub fn report_imbalance(report: &SimReport) -> Result<(f64, f64)> {
    let compute: Vec<f64> = report.per_worker.iter().map(|w| w.compute_time).collect();
    let comm: Vec<f64> = report
        .per_worker
        .iter()
        .map(|w| (w.send_bytes + w.recv_bytes) as f64)
        .collect();
    Ok((imbalance_ratio(&compute)?, imbalance_ratio(&comm)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub worker_counts: Vec<usize>,
    pub tokens_per_worker: u64,
    pub block_sizes: Vec<u64>,
    pub schedulers: Vec<SchedulerKind>,
    pub trials: usize,
    /// Trial `i` uses seed `base_seed + i`.
    #[serde(default)]
    pub base_seed: u64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.worker_counts.is_empty()
            || self.block_sizes.is_empty()
            || self.schedulers.is_empty()
        {
            return Err(Error::Parameter("sweep lists must be non-empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::Parameter("sweep needs at least one trial".into()));
        }
        if self.tokens_per_worker == 0 || self.worker_counts.contains(&0) {
            return Err(Error::Parameter(
                "worker counts and token budget must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.trials as u64).map(|i| self.base_seed.wrapping_add(i))
    }
}

/// Source of sequences for a sweep.
#[derive(Clone, Debug)]
pub enum SweepWorkload {
    Generated(DistributionSpec),
    Trace(SequenceTrace),
}

impl SweepWorkload {
    /// First full batch for `n_workers`. Generated traces grow until one
    /// batch has been closed, so the returned batch is as full as first-fit
    /// makes it.
    pub fn first_batch(
        &self,
        n_workers: usize,
        tokens_per_worker: u64,
        seed: u64,
    ) -> Result<Batch> {
        match self {
            SweepWorkload::Trace(trace) => build_batches(trace, n_workers, tokens_per_worker)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Parameter("trace is empty".into())),
            SweepWorkload::Generated(spec) => {
                let budget = n_workers as f64 * tokens_per_worker as f64;
                let mean = spec.mean_length().max(1.0);
                let mut count = (2.0 * budget / mean).ceil() as usize + 64;
                loop {
                    let trace = generate_trace(spec, seed, count)?;
                    let mut batches = build_batches(&trace, n_workers, tokens_per_worker)?;
                    if batches.len() > 1 {
                        return Ok(batches.swap_remove(0));
                    }
                    count *= 2;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_workers: usize,
    pub block_size: u64,
    pub scheduler: SchedulerKind,
    pub seed: u64,
    pub comp_imbalance: f64,
    pub comm_imbalance: f64,
    pub mfu: f64,
    pub total_time_s: f64,
    pub status: RowStatus,
}

/// Runs one scheduler on one batch and measures it.
pub fn measure(
    kind: SchedulerKind,
    batch: &Batch,
    cfg: &ScheduleConfig,
    seed: u64,
) -> Result<SweepRow> {
    let row = |status, ci, mi, mfu, t| SweepRow {
        n_workers: cfg.n_workers,
        block_size: cfg.sharding.block_size,
        scheduler: kind,
        seed,
        comp_imbalance: ci,
        comm_imbalance: mi,
        mfu,
        total_time_s: t,
        status,
    };
    let sched = match schedule(kind, batch, cfg) {
        Ok(s) => s,
        Err(e) if e.is_infeasible() => {
            return Ok(row(
                RowStatus::Infeasible,
                f64::NAN,
                f64::NAN,
                f64::NAN,
                f64::NAN,
            ))
        }
        Err(e) => return Err(e),
    };
    let report = sched.simulate(cfg)?;
    let (ci, mi) = report_imbalance(&report)?;
    let mfu = attention_mfu(&report, &cfg.hardware, &cfg.efficiency, cfg.n_workers)?;
    Ok(row(RowStatus::Ok, ci, mi, mfu, report.total_time))
}

/// One row per (worker count, block size, scheduler, seed), in that nesting
/// order. Every scheduler and block size at a given (N, seed) sees the same
/// batch.
pub fn weak_scaling_sweep(
    sweep: &SweepConfig,
    workload: &SweepWorkload,
    base: &ScheduleConfig,
) -> Result<Vec<SweepRow>> {
    sweep.validate()?;
    let mut points = Vec::new();
    for &n in &sweep.worker_counts {
        for &block in &sweep.block_sizes {
            for &kind in &sweep.schedulers {
                for seed in sweep.seeds() {
                    points.push((n, block, kind, seed));
                }
            }
        }
    }
    let batch_keys: Vec<(usize, u64)> = sweep
        .worker_counts
        .iter()
        .flat_map(|&n| sweep.seeds().map(move |s| (n, s)))
        .collect();
    let batches: Vec<((usize, u64), Batch)> = batch_keys
        .into_par_iter()
        .map(|(n, s)| Ok(((n, s), workload.first_batch(n, sweep.tokens_per_worker, s)?)))
        .collect::<Result<_>>()?;
    let batch_for =
        |n: usize, s: u64| &batches.iter().find(|(k, _)| *k == (n, s)).expect("batch").1;

    points
        .into_par_iter()
        .map(|(n, block, kind, seed)| {
            let mut cfg = base.clone();
            cfg.n_workers = n;
            cfg.tokens_per_worker = sweep.tokens_per_worker;
            cfg.assign.mem_limit = sweep.tokens_per_worker as f64;
            cfg.sharding.block_size = block;
            measure(kind, batch_for(n, seed), &cfg, seed)
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Logic(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Logic(e.to_string()))
}
