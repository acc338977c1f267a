//! Reference schedulers: ring attention over all workers, length-proportional
//! ring groups, and an oracle that picks the faster of the two.

use std::collections::BTreeMap;

use crate::distributor::{unit_loads, Assignment, Placement};
use crate::error::{Error, Result};
use crate::planner::{coalesce, CoalescedPlan, CommPlan, Edge};
use crate::scheduler::{ScheduleConfig, SchedulerKind};
use crate::sharding::{kv_dependencies, split_evenly, Chunk, ScheduleUnit, UnitKind};
use crate::simulator::simulate;
use crate::workload::{Batch, Sequence};

/// Units, owners and ring rounds built so far.
#[derive(Default)]
struct RingBuilder {
    units: Vec<ScheduleUnit>,
    worker_of: Vec<usize>,
}

impl RingBuilder {
    /// Splits each sequence into `2g` chunks over `workers`, giving the
    /// worker at position `i` chunks `i` and `2g - 1 - i`, and returns the
    /// `g - 1` ring rounds. Empty chunks of very short sequences are dropped.
    fn ring(&mut self, workers: &[usize], seqs: &[&Sequence]) -> Vec<Vec<Edge>> {
        let g = workers.len();
        let mut origin: Vec<Vec<Chunk>> = vec![Vec::new(); g];
        for s in seqs {
            let sizes = split_evenly(s.length, 2 * g);
            for (i, held) in origin.iter_mut().enumerate() {
                let members: Vec<Chunk> = [i, 2 * g - 1 - i]
                    .into_iter()
                    .filter(|&c| sizes[c] > 0)
                    .map(|c| Chunk {
                        seq_id: s.id,
                        index: c as u32,
                        tokens: sizes[c],
                    })
                    .collect();
                if members.is_empty() {
                    continue;
                }
                held.extend(members.iter().copied());
                self.units.push(ScheduleUnit {
                    id: self.units.len(),
                    kind: UnitKind::ZigzagPair,
                    members,
                });
                self.worker_of.push(workers[i]);
            }
        }
        // Round r forwards the chunks that originated r - 1 hops upstream.
        (1..g)
            .map(|r| {
                (0..g)
                    .filter_map(|p| {
                        let o = (p + g + 1 - r) % g;
                        (!origin[o].is_empty()).then(|| {
                            Edge::new(
                                workers[p],
                                workers[(p + 1) % g],
                                origin[o].iter().map(Chunk::id).collect(),
                            )
                        })
                    })
                    .collect()
            })
            .collect()
    }

    fn finish(self, n_workers: usize, cfg: &ScheduleConfig) -> Result<Placement> {
        let mask = cfg.sharding.mask;
        let deps = kv_dependencies(&self.units, mask);
        let loads = unit_loads(&self.units, &deps, &cfg.model, &cfg.efficiency);
        let assignment = Assignment::from_mapping(n_workers, self.worker_of, &loads)?;
        Placement::new(self.units, mask, assignment)
    }
}

/// Every sequence is split across all workers.
pub fn ring_schedule(batch: &Batch, cfg: &ScheduleConfig) -> Result<(Placement, CommPlan)> {
    let n = cfg.n_workers;
    let workers: Vec<usize> = (0..n).collect();
    let seqs: Vec<&Sequence> = batch.sequences.iter().collect();
    let mut b = RingBuilder::default();
    let rounds = b.ring(&workers, &seqs);
    Ok((b.finish(n, cfg)?, CommPlan::new(n, rounds)))
}

/// Ring group size for a sequence: enough workers to hold it, rounded up to a
/// power of two.
pub fn group_size(length: u64, tokens_per_worker: u64) -> usize {
    (length.div_ceil(tokens_per_worker).max(1) as usize).next_power_of_two()
}

/// Each sequence gets an aligned group of `group_size` workers; sequences
/// sharing a group run one ring. Longest sequences are placed first, each at
/// the first aligned group with room for its share, or else at the least
/// loaded aligned group.
pub fn bytescale_schedule(batch: &Batch, cfg: &ScheduleConfig) -> Result<(Placement, CommPlan)> {
    let n = cfg.n_workers;
    let tpw = cfg.tokens_per_worker;
    let mut order: Vec<&Sequence> = batch.sequences.iter().collect();
    order.sort_by_key(|s| std::cmp::Reverse(s.length));

    let mut used = vec![0u64; n];
    let mut groups: BTreeMap<(usize, usize), Vec<&Sequence>> = BTreeMap::new();
    for s in order {
        let g = group_size(s.length, tpw);
        if g > n {
            return Err(Error::Infeasible(format!(
                "sequence {} of {} tokens needs {g} workers, only {n} available",
                s.id, s.length
            )));
        }
        let share = s.length.div_ceil(g as u64);
        let peak = |p: usize| used[p..p + g].iter().copied().max().unwrap_or(0);
        let start = (0..n)
            .step_by(g)
            .filter(|p| p + g <= n)
            .find(|&p| peak(p) + share <= tpw)
            .or_else(|| {
                (0..n)
                    .step_by(g)
                    .filter(|p| p + g <= n)
                    .min_by_key(|&p| (peak(p), p))
            })
            .ok_or_else(|| Error::Logic("no aligned group".into()))?;
        used[start..start + g].iter_mut().for_each(|u| *u += share);
        groups.entry((start, g)).or_default().push(s);
    }

    let mut b = RingBuilder::default();
    let mut merged: Vec<BTreeMap<(usize, usize), Vec<_>>> = Vec::new();
    for ((start, g), mut seqs) in groups {
        seqs.sort_by_key(|s| s.id);
        let workers: Vec<usize> = (start..start + g).collect();
        for (r, round) in b.ring(&workers, &seqs).into_iter().enumerate() {
            if merged.len() <= r {
                merged.push(BTreeMap::new());
            }
            for e in round {
                merged[r]
                    .entry((e.src, e.dst))
                    .or_default()
                    .extend(e.payload);
            }
        }
    }
    let rounds = merged
        .into_iter()
        .map(|m| {
            m.into_iter()
                .map(|((s, d), p)| Edge::new(s, d, p))
                .collect()
        })
        .collect();
    Ok((b.finish(n, cfg)?, CommPlan::new(n, rounds)))
}

/// Simulates ring and length-proportional groups and keeps the faster. Ties
/// go to the grouped schedule.
pub fn wlb_oracle(
    batch: &Batch,
    cfg: &ScheduleConfig,
) -> Result<(Placement, CoalescedPlan, SchedulerKind)> {
    let run = |kind: SchedulerKind| -> Result<(Placement, CoalescedPlan, f64)> {
        let (p, plan) = match kind {
            SchedulerKind::Ring => ring_schedule(batch, cfg)?,
            _ => bytescale_schedule(batch, cfg)?,
        };
        let plan = coalesce(&plan, 1)?;
        let r = simulate(
            &p,
            &plan,
            &cfg.hardware,
            &cfg.model,
            &cfg.efficiency,
            &cfg.sim,
        )?;
        Ok((p, plan, r.total_time))
    };
    match (run(SchedulerKind::ByteScale), run(SchedulerKind::Ring)) {
        (Ok(b), Ok(r)) => Ok(if r.2 < b.2 {
            (r.0, r.1, SchedulerKind::Ring)
        } else {
            (b.0, b.1, SchedulerKind::ByteScale)
        }),
        (Ok(b), Err(_)) => Ok((b.0, b.1, SchedulerKind::ByteScale)),
        (Err(_), Ok(r)) => Ok((r.0, r.1, SchedulerKind::Ring)),
        (Err(e), Err(_)) => Err(e),
    }
}
