//! Shared fixtures for the benchmarks.

use blockcp_core::distributor::{unit_loads, Placement, UnitLoad};
use blockcp_core::metrics::SweepWorkload;
use blockcp_core::sharding::{kv_dependencies, shard_batch};
use blockcp_core::{schedule, Batch, DistributionSpec, Schedule, ScheduleConfig, SchedulerKind};

pub const TOKENS_PER_WORKER: u64 = 32 * 1024;

/// First full batch of the default lognormal workload for `n` workers.
pub fn lognormal_batch(n: usize) -> Batch {
    SweepWorkload::Generated(DistributionSpec::lognormal(0.7, 16384.0))
        .first_batch(n, TOKENS_PER_WORKER, 0)
        .expect("default workload batches")
}

pub fn config(n: usize) -> ScheduleConfig {
    ScheduleConfig::new(n, TOKENS_PER_WORKER)
}

/// Distributor inputs for the lognormal batch.
pub fn unit_demands(n: usize) -> Vec<UnitLoad> {
    let cfg = config(n);
    let units = shard_batch(&lognormal_batch(n), &cfg.sharding).expect("shardable");
    let deps = kv_dependencies(&units, cfg.sharding.mask);
    unit_loads(&units, &deps, &cfg.model, &cfg.efficiency)
}

pub fn scheduled(kind: SchedulerKind, n: usize) -> Schedule {
    schedule(kind, &lognormal_batch(n), &config(n)).expect("feasible")
}

pub fn fcp_placement(n: usize) -> Placement {
    scheduled(SchedulerKind::Fcp, n).placement
}
