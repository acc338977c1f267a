//! Block-level context-parallel attention scheduling.
//!
//! The pipeline runs: generate or load a trace, batch it, shard each batch
//! into schedule units, assign units to workers, plan the KV transfers as a
//! sequence of matchings, then simulate the overlapped execution.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod costmodel;
pub mod distributor;
pub mod error;
pub mod matching;
pub mod metrics;
pub mod planner;
pub mod reshuffle;
pub mod scheduler;
pub mod sharding;
pub mod simulator;
pub mod workload;

pub use costmodel::{CostVector, EfficiencyCurve, HardwareConfig, ModelConfig};
pub use distributor::{AssignParams, Assignment, LoadVector, Placement};
pub use error::{Error, Result};
pub use metrics::{RowStatus, SweepConfig, SweepRow, SweepWorkload};
pub use planner::{BipartiteMultigraph, CoalescedPlan, CommPlan, Edge};
pub use scheduler::{schedule, Schedule, ScheduleConfig, SchedulerKind};
pub use sharding::{Chunk, ChunkId, Mask, ScheduleUnit, ShardingConfig, UnitKind};
pub use simulator::{CongestionMode, SimOptions, SimReport};
pub use workload::{Batch, DistributionSpec, Sequence, SequenceTrace};
