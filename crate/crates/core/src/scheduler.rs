//! End-to-end scheduling of one batch under a named policy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{bytescale_schedule, ring_schedule, wlb_oracle};
use crate::costmodel::{EfficiencyCurve, HardwareConfig, ModelConfig};
use crate::distributor::{assign, unit_loads, AssignParams, Placement};
use crate::error::{Error, Result};
use crate::planner::{coalesce, plan_placement, CoalescedPlan, DEFAULT_COALESCE};
use crate::sharding::{kv_dependencies, shard_batch, ShardingConfig};
use crate::simulator::{simulate, SimOptions, SimReport};
use crate::workload::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchedulerKind {
    #[serde(rename = "fcp")]
    Fcp,
    #[serde(rename = "ring")]
    Ring,
    #[serde(rename = "bytescale")]
    ByteScale,
    #[serde(rename = "wlb_oracle")]
    WlbOracle,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::Fcp,
        SchedulerKind::Ring,
        SchedulerKind::ByteScale,
        SchedulerKind::WlbOracle,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SchedulerKind::Fcp => "fcp",
            SchedulerKind::Ring => "ring",
            SchedulerKind::ByteScale => "bytescale",
            SchedulerKind::WlbOracle => "wlb_oracle",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown scheduler {s:?}")))
    }
}

/// Everything needed to turn a batch into a simulated run.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub n_workers: usize,
    pub tokens_per_worker: u64,
    pub sharding: ShardingConfig,
    pub assign: AssignParams,
    pub coalesce: usize,
    pub model: ModelConfig,
    pub hardware: HardwareConfig,
    pub efficiency: EfficiencyCurve,
    pub sim: SimOptions,
}

impl ScheduleConfig {
    pub fn new(n_workers: usize, tokens_per_worker: u64) -> Self {
        ScheduleConfig {
            n_workers,
            tokens_per_worker,
            sharding: ShardingConfig::default(),
            assign: AssignParams::new(tokens_per_worker as f64),
            coalesce: DEFAULT_COALESCE,
            model: ModelConfig::default(),
            hardware: HardwareConfig::default(),
            efficiency: EfficiencyCurve::default(),
            sim: SimOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 || self.tokens_per_worker == 0 {
            return Err(Error::Parameter(
                "worker count and token budget must be positive".into(),
            ));
        }
        if self.coalesce == 0 {
            return Err(Error::Parameter(
                "coalesce degree must be at least 1".into(),
            ));
        }
        self.sharding.validate()?;
        self.assign.validate()?;
        self.model.validate()?;
        self.hardware.validate()?;
        self.sim.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Schedule {
    pub scheduler: SchedulerKind,
    /// The policy that produced the placement; differs from `scheduler`
    /// only for the oracle.
    pub chosen: SchedulerKind,
    pub placement: Placement,
    pub plan: CoalescedPlan,
}

impl Schedule {
    pub fn simulate(&self, cfg: &ScheduleConfig) -> Result<SimReport> {
        simulate(
            &self.placement,
            &self.plan,
            &cfg.hardware,
            &cfg.model,
            &cfg.efficiency,
            &cfg.sim,
        )
    }
}

pub fn fcp_schedule(batch: &Batch, cfg: &ScheduleConfig) -> Result<(Placement, CoalescedPlan)> {
    let units = shard_batch(batch, &cfg.sharding)?;
    let deps = kv_dependencies(&units, cfg.sharding.mask);
    let loads = unit_loads(&units, &deps, &cfg.model, &cfg.efficiency);
    let assignment = assign(&loads, cfg.n_workers, &cfg.assign)?;
    let placement = Placement::new(units, cfg.sharding.mask, assignment)?;
    let plan = plan_placement(&placement, cfg.coalesce)?;
    Ok((placement, plan))
}

pub fn schedule(kind: SchedulerKind, batch: &Batch, cfg: &ScheduleConfig) -> Result<Schedule> {
    cfg.validate()?;
    if batch.n_workers != cfg.n_workers {
        return Err(Error::Parameter(format!(
            "batch built for {} workers, config has {}",
            batch.n_workers, cfg.n_workers
        )));
    }
    let (chosen, placement, plan) = match kind {
        SchedulerKind::Fcp => {
            let (p, plan) = fcp_schedule(batch, cfg)?;
            (kind, p, plan)
        }
        SchedulerKind::Ring => {
            let (p, plan) = ring_schedule(batch, cfg)?;
            (kind, p, coalesce(&plan, 1)?)
        }
        SchedulerKind::ByteScale => {
            let (p, plan) = bytescale_schedule(batch, cfg)?;
            (kind, p, coalesce(&plan, 1)?)
        }
        SchedulerKind::WlbOracle => {
            let (p, plan, chosen) = wlb_oracle(batch, cfg)?;
            (chosen, p, plan)
        }
    };
    Ok(Schedule {
        scheduler: kind,
        chosen,
        placement,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for k in SchedulerKind::ALL {
            assert_eq!(k.label().parse::<SchedulerKind>().unwrap(), k);
            assert_eq!(
                serde_json::to_string(&k).unwrap(),
                format!("\"{}\"", k.label())
            );
        }
        assert!("zigzag".parse::<SchedulerKind>().is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let batch = Batch::new(vec![], 2, 1024).unwrap();
        let mut cfg = ScheduleConfig::new(2, 1024);
        cfg.coalesce = 0;
        assert!(schedule(SchedulerKind::Fcp, &batch, &cfg).is_err());
        let cfg = ScheduleConfig::new(4, 1024);
        assert!(schedule(SchedulerKind::Fcp, &batch, &cfg).is_err());
    }
}
