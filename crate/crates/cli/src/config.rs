//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use blockcp_core::costmodel::{EfficiencyCurve, HardwareConfig, ModelConfig};
use blockcp_core::distributor::AssignParams;
use blockcp_core::metrics::{SweepConfig, SweepWorkload};
use blockcp_core::planner::DEFAULT_COALESCE;
use blockcp_core::sharding::ShardingConfig;
use blockcp_core::simulator::SimOptions;
use blockcp_core::workload::{
    load_trace, DistributionSpec, LengthDistribution, LognormalComponent, DEFAULT_MAX_LENGTH,
    DEFAULT_MIN_LENGTH,
};
use blockcp_core::{ScheduleConfig, SchedulerKind};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_TOKENS_PER_WORKER: u64 = 32 * 1024;
pub const DEFAULT_WORKERS: usize = 16;
pub const DEFAULT_TRACE_COUNT: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scheduler: SchedulerKind,
    pub output: PathBuf,
    pub workload: WorkloadConfig,
    pub cluster: ClusterConfig,
    pub model: ModelConfig,
    pub efficiency: EfficiencySection,
    pub sharding: ShardingConfig,
    pub assign: AssignSection,
    pub planner: PlannerSection,
    pub sim: SimOptions,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            scheduler: SchedulerKind::Fcp,
            output: PathBuf::from("out"),
            workload: WorkloadConfig::default(),
            cluster: ClusterConfig::default(),
            model: ModelConfig::default(),
            efficiency: EfficiencySection::default(),
            sharding: ShardingConfig::default(),
            assign: AssignSection::default(),
            planner: PlannerSection::default(),
            sim: SimOptions::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WorkloadConfig {
    Lognormal {
        sigma: f64,
        mean: f64,
        #[serde(default = "default_min")]
        min_length: u64,
        #[serde(default = "default_max")]
        max_length: u64,
        #[serde(default = "default_count")]
        count: usize,
    },
    /// Equal-weight mixture of two lognormals, each given as `[sigma, mean]`.
    Bimodal {
        first: (f64, f64),
        second: (f64, f64),
        #[serde(default = "default_min")]
        min_length: u64,
        #[serde(default = "default_max")]
        max_length: u64,
        #[serde(default = "default_count")]
        count: usize,
    },
    Mixture {
        components: Vec<LognormalComponent>,
        #[serde(default = "default_min")]
        min_length: u64,
        #[serde(default = "default_max")]
        max_length: u64,
        #[serde(default = "default_count")]
        count: usize,
    },
    File {
        path: PathBuf,
    },
}

pub fn default_min() -> u64 {
    DEFAULT_MIN_LENGTH
}

pub fn default_max() -> u64 {
    DEFAULT_MAX_LENGTH
}

fn default_count() -> usize {
    DEFAULT_TRACE_COUNT
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig::Lognormal {
            sigma: 0.7,
            mean: 16384.0,
            min_length: DEFAULT_MIN_LENGTH,
            max_length: DEFAULT_MAX_LENGTH,
            count: DEFAULT_TRACE_COUNT,
        }
    }
}

impl WorkloadConfig {
    /// The length distribution, or `None` for a trace file.
    pub fn spec(&self) -> Option<DistributionSpec> {
        let (distribution, min_length, max_length) = match self {
            WorkloadConfig::Lognormal {
                sigma,
                mean,
                min_length,
                max_length,
                ..
            } => (
                LengthDistribution::Lognormal {
                    sigma: *sigma,
                    mean: *mean,
                },
                *min_length,
                *max_length,
            ),
            WorkloadConfig::Bimodal {
                first,
                second,
                min_length,
                max_length,
                ..
            } => (
                DistributionSpec::bimodal(*first, *second).distribution,
                *min_length,
                *max_length,
            ),
            WorkloadConfig::Mixture {
                components,
                min_length,
                max_length,
                ..
            } => (
                LengthDistribution::Mixture {
                    components: components.clone(),
                },
                *min_length,
                *max_length,
            ),
            WorkloadConfig::File { .. } => return None,
        };
        Some(DistributionSpec {
            distribution,
            min_length,
            max_length,
        })
    }

    pub fn count(&self) -> Option<usize> {
        match self {
            WorkloadConfig::Lognormal { count, .. }
            | WorkloadConfig::Bimodal { count, .. }
            | WorkloadConfig::Mixture { count, .. } => Some(*count),
            WorkloadConfig::File { .. } => None,
        }
    }

    pub fn set_count(&mut self, n: usize) {
        match self {
            WorkloadConfig::Lognormal { count, .. }
            | WorkloadConfig::Bimodal { count, .. }
            | WorkloadConfig::Mixture { count, .. } => *count = n,
            WorkloadConfig::File { .. } => {}
        }
    }

    /// Resolves the workload into something a batch can be drawn from.
    pub fn resolve(&self, base_dir: &Path) -> Result<SweepWorkload, CliError> {
        match self {
            WorkloadConfig::File { path } => {
                let path = base_dir.join(path);
                Ok(SweepWorkload::Trace(load_trace(path)?))
            }
            _ => {
                let spec = self.spec().expect("generated workload");
                spec.validate()?;
                Ok(SweepWorkload::Generated(spec))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub n_workers: usize,
    pub tokens_per_worker: u64,
    pub peak_flops: f64,
    pub mem_bandwidth: f64,
    pub nic_bandwidth: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let hw = HardwareConfig::default();
        ClusterConfig {
            n_workers: DEFAULT_WORKERS,
            tokens_per_worker: DEFAULT_TOKENS_PER_WORKER,
            peak_flops: hw.peak_flops,
            mem_bandwidth: hw.mem_bandwidth,
            nic_bandwidth: hw.nic_bandwidth,
        }
    }
}

impl ClusterConfig {
    pub fn hardware(&self) -> HardwareConfig {
        HardwareConfig {
            peak_flops: self.peak_flops,
            mem_bandwidth: self.mem_bandwidth,
            nic_bandwidth: self.nic_bandwidth,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EfficiencySection {
    /// `[tokens, fraction]` pairs; empty means the built-in curve.
    pub anchors: Vec<(u64, f64)>,
}

impl EfficiencySection {
    pub fn curve(&self) -> Result<EfficiencyCurve, CliError> {
        if self.anchors.is_empty() {
            Ok(EfficiencyCurve::default())
        } else {
            Ok(EfficiencyCurve::new(self.anchors.clone())?)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignSection {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    /// Per-worker memory cap in tokens; defaults to the token budget.
    pub mem_limit: Option<f64>,
}

impl Default for AssignSection {
    fn default() -> Self {
        let p = AssignParams::new(1.0);
        AssignSection {
            alpha: p.alpha,
            beta: p.beta,
            delta: p.delta,
            mem_limit: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    pub coalesce: usize,
}

impl Default for PlannerSection {
    fn default() -> Self {
        PlannerSection {
            coalesce: DEFAULT_COALESCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub worker_counts: Vec<usize>,
    pub block_sizes: Vec<u64>,
    pub schedulers: Vec<SchedulerKind>,
    pub trials: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            worker_counts: vec![16, 32, 64, 128],
            block_sizes: vec![ShardingConfig::default().block_size],
            schedulers: vec![
                SchedulerKind::Fcp,
                SchedulerKind::Ring,
                SchedulerKind::ByteScale,
            ],
            trials: 1,
        }
    }
}

/// Independent seed streams derived from the top-level seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedUse {
    Workload = 1,
    Simulator = 2,
}

pub fn derive_seed(seed: u64, component: SeedUse) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component as u64);
    rng.next_u64()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn workload_seed(&self) -> u64 {
        derive_seed(self.seed, SeedUse::Workload)
    }

    pub fn schedule_config(&self) -> Result<ScheduleConfig, CliError> {
        let c = &self.cluster;
        let mut cfg = ScheduleConfig::new(c.n_workers, c.tokens_per_worker);
        cfg.sharding = self.sharding;
        cfg.assign = AssignParams {
            alpha: self.assign.alpha,
            beta: self.assign.beta,
            delta: self.assign.delta,
            mem_limit: self.assign.mem_limit.unwrap_or(c.tokens_per_worker as f64),
        };
        cfg.coalesce = self.planner.coalesce;
        cfg.model = self.model;
        cfg.hardware = c.hardware();
        cfg.efficiency = self.efficiency.curve()?;
        cfg.sim = self.sim;
        cfg.sim.random_seed = derive_seed(self.seed, SeedUse::Simulator);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sweep_config(&self) -> Result<SweepConfig, CliError> {
        let sweep = SweepConfig {
            worker_counts: self.sweep.worker_counts.clone(),
            tokens_per_worker: self.cluster.tokens_per_worker,
            block_sizes: self.sweep.block_sizes.clone(),
            schedulers: self.sweep.schedulers.clone(),
            trials: self.sweep.trials,
            base_seed: self.workload_seed(),
        };
        sweep.validate()?;
        Ok(sweep)
    }
}
