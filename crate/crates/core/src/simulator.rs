//! Stage-level simulation of overlapped attention compute and KV transfer.
//!
//! The network runs the plan's stages one after another. Stage `t` may start
//! once the previous stage has finished and, when `t >= pipeline_depth`, once
//! every worker has consumed the data of stage `t - pipeline_depth` (its
//! buffer is then free). Each worker computes its purely local tiles first,
//! then the tiles unlocked by each stage in stage order, each batch starting
//! when both the worker and the stage's data are ready.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{unit_efficiency, EfficiencyCurve, HardwareConfig, ModelConfig};
use crate::distributor::Placement;
use crate::error::{Error, Result};
use crate::planner::{build_comm_graph, coalesce, CoalescedPlan, CommPlan, Edge};
use crate::reshuffle::{initial_layout, reshuffle_cost, InitialLayout, ReshuffleReport};
use crate::sharding::{tile_pairs, ChunkId, Mask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CongestionMode {
    #[default]
    Planned,
    RandomOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    pub pipeline_depth: usize,
    pub model_reshuffle: bool,
    pub initial_layout: InitialLayout,
    pub congestion_mode: CongestionMode,
    pub backward: bool,
    pub random_seed: u64,
    /// Extra cost per additional flow sharing a NIC port within one round,
    /// as a fraction of the serialized transfer time.
    pub congestion_overhead: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            pipeline_depth: 3,
            model_reshuffle: false,
            initial_layout: InitialLayout::Contiguous,
            congestion_mode: CongestionMode::Planned,
            backward: false,
            random_seed: 0,
            congestion_overhead: 0.1,
        }
    }
}

impl SimOptions {
    pub fn validate(&self) -> Result<()> {
        if self.pipeline_depth == 0 {
            return Err(Error::Parameter("pipeline depth must be at least 1".into()));
        }
        if !(self.congestion_overhead >= 0.0 && self.congestion_overhead.is_finite()) {
            return Err(Error::Parameter(
                "congestion overhead must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binding {
    Compute,
    Comm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub compute_time: f64,
    pub send_time: f64,
    pub recv_time: f64,
    pub idle_time: f64,
    pub finish_time: f64,
    pub eta: f64,
    pub flops: f64,
    pub send_bytes: u64,
    pub recv_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub sub_stages: usize,
    pub comm_start: f64,
    pub comm_end: f64,
    /// Largest per-worker compute unlocked by this stage.
    pub compute_time: f64,
    pub end: f64,
    pub duration: f64,
    pub binding: Binding,
}

/// One row of the per-stage, per-worker timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub stage: usize,
    pub worker: usize,
    pub send_time: f64,
    pub recv_time: f64,
    pub compute_start: f64,
    pub compute_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub total_time: f64,
    pub prologue_end: f64,
    pub per_worker: Vec<WorkerReport>,
    pub stages: Vec<StageRecord>,
    pub timeline: Vec<TimelineRow>,
    pub total_flops: f64,
    pub bytes_moved: u64,
    pub reshuffle: Option<ReshuffleReport>,
}

impl SimReport {
    pub fn max_compute_time(&self) -> f64 {
        self.per_worker
            .iter()
            .map(|w| w.compute_time)
            .fold(0.0, f64::max)
    }

    pub fn timeline_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.timeline {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Logic(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Logic(e.to_string()))
    }
}

struct Port {
    send: Vec<f64>,
    recv: Vec<f64>,
}

/// Per-worker send and receive port time for one stage. `bytes` mirrors the
/// shape of `sub_stages`.
fn stage_port_times(
    sub_stages: &[Vec<Edge>],
    bytes: &[Vec<u64>],
    n: usize,
    bw: f64,
    overhead: f64,
) -> Port {
    let mut port = Port {
        send: vec![0.0; n],
        recv: vec![0.0; n],
    };
    for (sub, sub_bytes) in sub_stages.iter().zip(bytes) {
        let mut fan_out = vec![0usize; n];
        let mut fan_in = vec![0usize; n];
        for e in sub {
            fan_out[e.src] += 1;
            fan_in[e.dst] += 1;
        }
        for (e, &b) in sub.iter().zip(sub_bytes) {
            let t = b as f64 / bw;
            port.send[e.src] += t * (1.0 + overhead * (fan_out[e.src] - 1) as f64);
            port.recv[e.dst] += t * (1.0 + overhead * (fan_in[e.dst] - 1) as f64);
        }
    }
    port
}

/// Simulates `plan` on `placement`. In random-order mode the plan only
/// contributes its coalesce degree; transfers are re-sequenced by
/// [`random_order_plan`].
pub fn simulate(
    placement: &Placement,
    plan: &CoalescedPlan,
    hw: &HardwareConfig,
    cfg: &ModelConfig,
    curve: &EfficiencyCurve,
    opts: &SimOptions,
) -> Result<SimReport> {
    match opts.congestion_mode {
        CongestionMode::Planned => run(placement, plan, hw, cfg, curve, opts),
        CongestionMode::RandomOrder => {
            simulate_random_order(placement, hw, cfg, curve, opts, plan.degree)
        }
    }
}

/// Every receiver pulls its blocks in a seeded random order, one per round,
/// with no coordination between receivers, so several may hit one sender.
pub fn random_order_plan(placement: &Placement, seed: u64) -> CommPlan {
    let g = build_comm_graph(placement);
    let n = g.n_workers();
    let mut inbound: Vec<Vec<Edge>> = vec![Vec::new(); n];
    for e in g.edges() {
        inbound[e.dst].push(e.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for list in &mut inbound {
        list.shuffle(&mut rng);
    }
    let rounds = inbound.iter().map(Vec::len).max().unwrap_or(0);
    let sub_stages = (0..rounds)
        .map(|r| inbound.iter().filter_map(|l| l.get(r).cloned()).collect())
        .collect();
    CommPlan::new(n, sub_stages)
}

pub fn simulate_random_order(
    placement: &Placement,
    hw: &HardwareConfig,
    cfg: &ModelConfig,
    curve: &EfficiencyCurve,
    opts: &SimOptions,
    coalesce_degree: usize,
) -> Result<SimReport> {
    let plan = coalesce(
        &random_order_plan(placement, opts.random_seed),
        coalesce_degree,
    )?;
    run(placement, &plan, hw, cfg, curve, opts)
}

fn run(
    placement: &Placement,
    plan: &CoalescedPlan,
    hw: &HardwareConfig,
    cfg: &ModelConfig,
    curve: &EfficiencyCurve,
    opts: &SimOptions,
) -> Result<SimReport> {
    opts.validate()?;
    hw.validate()?;
    cfg.validate()?;
    let n = placement.n_workers();
    if plan.n_workers != n {
        return Err(Error::Consistency(format!(
            "plan spans {} workers, placement {}",
            plan.n_workers, n
        )));
    }
    let deps = &placement.deps;
    let mask = deps.mask();

    // Chunks are addressed densely as `base[seq] + index`.
    let mut base: HashMap<u64, (usize, usize)> = HashMap::new();
    let mut sizes: Vec<u64> = Vec::new();
    for (seq, s) in deps.sequences() {
        base.insert(seq, (sizes.len(), s.len()));
        sizes.extend_from_slice(s);
    }
    let dense = |c: &ChunkId| -> Result<usize> {
        match base.get(&c.seq_id) {
            Some(&(b, len)) if (c.index as usize) < len => Ok(b + c.index as usize),
            _ => Err(Error::UnknownChunk(*c)),
        }
    };
    let mut owner = vec![usize::MAX; sizes.len()];
    for unit in &placement.units {
        for c in &unit.members {
            owner[dense(&c.id())?] = placement.worker_of_unit(unit.id);
        }
    }

    // Replay transfers in round order, checking every payload is present at
    // its sender, and record the round in which each chunk first reaches
    // each worker.
    const NEVER: u32 = u32::MAX;
    let mut arrival = vec![NEVER; sizes.len() * n];
    let mut stage_of_round: Vec<usize> = Vec::new();
    let mut bytes_of: Vec<Vec<Vec<u64>>> = Vec::with_capacity(plan.stage_count());
    for (t, stage) in plan.stages.iter().enumerate() {
        let mut stage_bytes = Vec::with_capacity(stage.len());
        for sub in stage {
            let round = stage_of_round.len() as u32;
            let mut landed = Vec::new();
            let mut sub_bytes = Vec::with_capacity(sub.len());
            for e in sub {
                if e.src >= n || e.dst >= n {
                    return Err(Error::Consistency(format!(
                        "edge {}->{} outside {n} workers",
                        e.src, e.dst
                    )));
                }
                let mut bytes = 0;
                for c in &e.payload {
                    let i = dense(c)?;
                    let at_src = arrival[i * n + e.src];
                    if owner[i] != e.src && (at_src == NEVER || at_src >= round) {
                        return Err(Error::Consistency(format!(
                            "worker {} sends chunk {c} it does not hold in round {round}",
                            e.src
                        )));
                    }
                    bytes += cfg.kv_bytes(sizes[i]);
                    landed.push(i * n + e.dst);
                }
                sub_bytes.push(bytes);
            }
            for slot in landed {
                if arrival[slot] == NEVER {
                    arrival[slot] = round;
                }
            }
            stage_bytes.push(sub_bytes);
            stage_of_round.push(t);
        }
        bytes_of.push(stage_bytes);
    }

    let mult = if opts.backward {
        cfg.backward_multiplier
    } else {
        1.0
    };
    let n_stages = plan.stage_count();
    let mut local = vec![0.0; n];
    let mut remote = vec![vec![0.0; n_stages]; n];
    let mut flops = vec![0.0; n];
    for unit in &placement.units {
        let w = placement.worker_of_unit(unit.id);
        let scale = cfg.flops_per_pair() * mult;
        let rate = hw.peak_flops * unit_efficiency(unit, curve);
        for q in &unit.members {
            let (b, _) = base[&q.seq_id];
            let count = deps.chunk_count(q.seq_id) as u32;
            let last = match mask {
                Mask::Causal => q.index.min(count - 1),
                Mask::Full => count - 1,
            };
            for r in 0..=last {
                let i = b + r as usize;
                let pairs = tile_pairs(mask, q.index, q.tokens, r, sizes[i]);
                if pairs == 0 {
                    continue;
                }
                let f = scale * pairs as f64;
                flops[w] += f;
                if owner[i] == w {
                    local[w] += f / rate;
                } else {
                    let round = arrival[i * n + w];
                    if round == NEVER {
                        return Err(Error::Consistency(format!(
                            "chunk {} never reaches worker {w} for {}",
                            ChunkId::new(q.seq_id, r),
                            q.id()
                        )));
                    }
                    remote[w][stage_of_round[round as usize]] += f / rate;
                }
            }
        }
    }

    let bw = hw.nic_bandwidth;
    let reshuffle = if opts.model_reshuffle {
        let layout = initial_layout(opts.initial_layout, placement);
        Some(reshuffle_cost(&layout, placement, hw, cfg, curve)?)
    } else {
        None
    };
    let reshuffle_time = reshuffle.as_ref().map_or(0.0, |r| r.time);
    // Restoring the original layout costs the same as the forward shuffle;
    // local work is split so each half hides one of them.
    let (prologue, epilogue): (Vec<f64>, Vec<f64>) = if reshuffle_time > 0.0 {
        local.iter().map(|&l| (0.5 * l, 0.5 * l)).unzip()
    } else {
        (local.clone(), vec![0.0; n])
    };

    let mut compute_end = prologue.clone();
    let prologue_end = prologue.iter().copied().fold(0.0, f64::max);
    let mut net_free = reshuffle_time;
    let mut done = vec![vec![0.0; n_stages]; n];
    let mut stages = Vec::with_capacity(n_stages);
    let mut timeline = Vec::with_capacity(n_stages * n);
    let mut send_time = vec![0.0; n];
    let mut recv_time = vec![0.0; n];
    let mut send_bytes = vec![0u64; n];
    let mut recv_bytes = vec![0u64; n];
    for (t, stage) in plan.stages.iter().enumerate() {
        let port = stage_port_times(stage, &bytes_of[t], n, bw, opts.congestion_overhead);
        for (e, &b) in stage.iter().flatten().zip(bytes_of[t].iter().flatten()) {
            send_bytes[e.src] += b;
            recv_bytes[e.dst] += b;
        }
        let comm = (0..n)
            .map(|w| port.send[w].max(port.recv[w]))
            .fold(0.0, f64::max);
        let mut start = net_free;
        if t >= opts.pipeline_depth {
            start = (0..n)
                .map(|w| done[w][t - opts.pipeline_depth])
                .fold(start, f64::max);
        }
        let comm_end = start + comm;
        net_free = comm_end;
        let mut end = comm_end;
        let mut max_work = 0.0f64;
        for w in 0..n {
            send_time[w] += port.send[w];
            recv_time[w] += port.recv[w];
            let work = remote[w][t];
            let (c_start, c_end) = if work > 0.0 {
                let s = compute_end[w].max(comm_end);
                compute_end[w] = s + work;
                (s, s + work)
            } else {
                (comm_end, comm_end)
            };
            done[w][t] = c_end;
            end = end.max(c_end);
            max_work = max_work.max(work);
            timeline.push(TimelineRow {
                stage: t,
                worker: w,
                send_time: port.send[w],
                recv_time: port.recv[w],
                compute_start: c_start,
                compute_end: c_end,
            });
        }
        stages.push(StageRecord {
            index: t,
            sub_stages: stage.len(),
            comm_start: start,
            comm_end,
            compute_time: max_work,
            end,
            duration: end - start,
            binding: if comm >= max_work {
                Binding::Comm
            } else {
                Binding::Compute
            },
        });
    }
    let remote_done = compute_end.iter().copied().fold(0.0, f64::max);
    for w in 0..n {
        compute_end[w] += epilogue[w];
    }
    let mut total_time = compute_end.iter().copied().fold(net_free, f64::max);
    if reshuffle_time > 0.0 {
        total_time = total_time.max(remote_done.max(net_free) + reshuffle_time);
    }

    let per_worker = (0..n)
        .map(|w| {
            let compute = local[w] + remote[w].iter().sum::<f64>();
            WorkerReport {
                compute_time: compute,
                send_time: send_time[w],
                recv_time: recv_time[w],
                idle_time: total_time - compute,
                finish_time: compute_end[w],
                eta: if compute > 0.0 {
                    compute_end[w] / compute
                } else {
                    1.0
                },
                flops: flops[w],
                send_bytes: send_bytes[w],
                recv_bytes: recv_bytes[w],
            }
        })
        .collect();
    Ok(SimReport {
        total_time,
        prologue_end,
        per_worker,
        stages,
        timeline,
        total_flops: flops.iter().sum(),
        bytes_moved: send_bytes.iter().sum(),
        reshuffle,
    })
}
