//! Files written by the commands, and atomic output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use blockcp_core::distributor::{unit_loads, worker_loads};
use blockcp_core::{CoalescedPlan, LoadVector, Mask, ScheduleConfig, ScheduleUnit, SchedulerKind};
use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::CliError;

/// One line of the schedule file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledUnit {
    pub unit_id: usize,
    pub worker: usize,
    /// Memory demand in tokens.
    pub m_i: f64,
    /// Efficiency-adjusted compute demand.
    pub c_i: f64,
    pub unit: ScheduleUnit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub scheduler: SchedulerKind,
    pub chosen: SchedulerKind,
    pub n_workers: usize,
    pub mask: Mask,
    pub units: Vec<ScheduledUnit>,
    pub loads: Vec<LoadVector>,
}

impl ScheduleFile {
    pub fn new(schedule: &blockcp_core::Schedule, cfg: &ScheduleConfig) -> Self {
        let p = &schedule.placement;
        let loads = unit_loads(&p.units, &p.deps, &cfg.model, &cfg.efficiency);
        let units = p
            .units
            .iter()
            .zip(&loads)
            .map(|(u, l)| ScheduledUnit {
                unit_id: u.id,
                worker: p.worker_of_unit(u.id),
                m_i: l.memory,
                c_i: l.compute,
                unit: u.clone(),
            })
            .collect();
        ScheduleFile {
            scheduler: schedule.scheduler,
            chosen: schedule.chosen,
            n_workers: p.n_workers(),
            mask: p.deps.mask(),
            units,
            loads: worker_loads(p, &cfg.model, &cfg.efficiency),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub scheduler: SchedulerKind,
    pub chosen: SchedulerKind,
    pub plan: CoalescedPlan,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

/// Writes `contents` to a temporary file next to `path` and renames it into
/// place, so a failed run never leaves a partial file behind.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<PathBuf, CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut tmp = NamedTempFile::new_in(&dir).map_err(|e| CliError::io(&dir, e))?;
    tmp.write_all(contents).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    log::info!("wrote {}", path.display());
    Ok(path.to_path_buf())
}
