use blockcp_core::costmodel::unit_costs;
use blockcp_core::distributor::{assign, unit_loads, worker_loads, Assignment, Placement};
use blockcp_core::metrics::{
    attention_mfu, imbalance_ratio, measure, report_imbalance, SweepWorkload,
};
use blockcp_core::planner::{build_comm_graph, plan_placement};
use blockcp_core::sharding::{kv_dependencies, shard_batch};
use blockcp_core::simulator::simulate;
use blockcp_core::workload::{build_batches, generate_trace};
use blockcp_core::*;
use proptest::prelude::*;

fn batch(lengths: &[u64], n: usize, tpw: u64) -> Batch {
    let seqs = lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| Sequence::new(i as u64, l))
        .collect();
    Batch::new(seqs, n, tpw).unwrap()
}

/// Each worker hosts whole sequences as single 16K-token units, so no KV
/// crosses workers and every unit runs at the curve's top efficiency.
fn resident_placement(per_worker: &[usize], cfg: &ScheduleConfig) -> Placement {
    let mut units = Vec::new();
    let mut owners = Vec::new();
    let mut seq = 0;
    for (w, &count) in per_worker.iter().enumerate() {
        for _ in 0..count {
            units.push(ScheduleUnit {
                id: units.len(),
                kind: UnitKind::ZigzagPair,
                members: vec![
                    Chunk {
                        seq_id: seq,
                        index: 0,
                        tokens: 8192,
                    },
                    Chunk {
                        seq_id: seq,
                        index: 1,
                        tokens: 8192,
                    },
                ],
            });
            owners.push(w);
            seq += 1;
        }
    }
    let deps = kv_dependencies(&units, Mask::Causal);
    let loads = unit_loads(&units, &deps, &cfg.model, &cfg.efficiency);
    let a = Assignment::from_mapping(per_worker.len(), owners, &loads).unwrap();
    Placement::new(units, Mask::Causal, a).unwrap()
}

#[test]
fn saturated_resident_run_scores_full_mfu() {
    let cfg = ScheduleConfig::new(4, 16384);
    let p = resident_placement(&[1, 1, 1, 1], &cfg);
    let plan = plan_placement(&p, 16).unwrap();
    let r = simulate(
        &p,
        &plan,
        &cfg.hardware,
        &cfg.model,
        &cfg.efficiency,
        &cfg.sim,
    )
    .unwrap();
    let mfu = attention_mfu(&r, &cfg.hardware, &cfg.efficiency, 4).unwrap();
    assert!((mfu - 1.0).abs() < 1e-12, "{mfu}");

    // Same work on three of four workers.
    let p = resident_placement(&[1, 1, 1, 0], &cfg);
    let r = simulate(
        &p,
        &plan_placement(&p, 16).unwrap(),
        &cfg.hardware,
        &cfg.model,
        &cfg.efficiency,
        &cfg.sim,
    )
    .unwrap();
    let mfu = attention_mfu(&r, &cfg.hardware, &cfg.efficiency, 4).unwrap();
    assert!((mfu - 0.75).abs() < 1e-12, "{mfu}");
}

#[test]
fn lognormal_mean_matches() {
    let spec = DistributionSpec::lognormal(0.7, 16384.0).with_bounds(1024, 524288);
    let trace = generate_trace(&spec, 7, 10_000).unwrap();
    assert_eq!(trace.len(), 10_000);
    let mean = trace.total_tokens() as f64 / 10_000.0;
    assert!((mean / 16384.0 - 1.0).abs() <= 0.10, "mean {mean}");
}

#[test]
fn fcp_end_to_end_invariants() {
    let wl = SweepWorkload::Generated(DistributionSpec::lognormal(0.7, 16384.0));
    let b = wl.first_batch(16, 32768, 0).unwrap();
    let cfg = ScheduleConfig::new(16, 32768);
    let s = schedule(SchedulerKind::Fcp, &b, &cfg).unwrap();

    let tokens: u64 = s.placement.units.iter().map(ScheduleUnit::tokens).sum();
    assert_eq!(tokens, b.total_tokens());
    let cap = cfg.assign.cap();
    assert!(s.placement.assignment.loads.iter().all(|l| l.memory <= cap));

    s.plan.to_comm_plan().validate_matchings().unwrap();
    assert_eq!(
        s.plan.sub_stage_count(),
        build_comm_graph(&s.placement).max_degree()
    );
    assert!(s.plan.max_transfers_per_stage() <= cfg.coalesce);

    let r = s.simulate(&cfg).unwrap();
    assert!(r.total_time >= r.max_compute_time());
    assert!(r.per_worker.iter().all(|w| w.eta >= 1.0));
    let analytic: f64 = s
        .placement
        .units
        .iter()
        .map(|u| unit_costs(u, &s.placement.deps, &cfg.model).flops(&cfg.model))
        .sum();
    assert!((r.total_flops - analytic).abs() <= 1e-9 * analytic);

    // Plan traffic equals the distributor's comm dimension for direct sends.
    let loads = worker_loads(&s.placement, &cfg.model, &cfg.efficiency);
    for (l, w) in loads.iter().zip(&r.per_worker) {
        assert_eq!(l.comm, (w.send_bytes + w.recv_bytes) as f64);
    }
    let (ci, _) = report_imbalance(&r).unwrap();
    let compute: Vec<f64> = loads.iter().map(|l| l.compute).collect();
    assert!((imbalance_ratio(&compute).unwrap() - ci).abs() < 1e-9);
}

#[test]
fn schedules_are_deterministic() {
    let wl = SweepWorkload::Generated(DistributionSpec::bimodal((0.5, 16384.0), (0.5, 65536.0)));
    let b = wl.first_batch(8, 32768, 3).unwrap();
    let cfg = ScheduleConfig::new(8, 32768);
    for kind in SchedulerKind::ALL {
        let a = schedule(kind, &b, &cfg).unwrap();
        let c = schedule(kind, &b, &cfg).unwrap();
        assert_eq!(a.placement.assignment, c.placement.assignment);
        assert_eq!(a.plan, c.plan);
        assert_eq!(a.simulate(&cfg).unwrap(), c.simulate(&cfg).unwrap());
    }
}

#[test]
fn oracle_picks_ring_on_long_tail() {
    let mut lengths = vec![131072];
    lengths.extend([16384; 8]);
    let b = batch(&lengths, 8, 65536);
    let cfg = ScheduleConfig::new(8, 65536);
    let ring = schedule(SchedulerKind::Ring, &b, &cfg)
        .unwrap()
        .simulate(&cfg)
        .unwrap();
    let groups = schedule(SchedulerKind::ByteScale, &b, &cfg)
        .unwrap()
        .simulate(&cfg)
        .unwrap();
    let oracle = schedule(SchedulerKind::WlbOracle, &b, &cfg).unwrap();
    assert_eq!(oracle.chosen, SchedulerKind::Ring);
    let t = oracle.simulate(&cfg).unwrap().total_time;
    assert!(t <= ring.total_time.min(groups.total_time));
}

#[test]
fn fcp_beats_baselines_on_imbalance() {
    let wl = SweepWorkload::Generated(DistributionSpec::bimodal((0.5, 16384.0), (0.5, 65536.0)));
    let b = wl.first_batch(32, 32768, 0).unwrap();
    let cfg = ScheduleConfig::new(32, 32768);
    let fcp = measure(SchedulerKind::Fcp, &b, &cfg, 0).unwrap();
    let bs = measure(SchedulerKind::ByteScale, &b, &cfg, 0).unwrap();
    assert!(fcp.comp_imbalance < bs.comp_imbalance);
    assert!(fcp.mfu > bs.mfu);
}

#[test]
fn infeasible_memory_is_reported() {
    // Every unit is a full block, so the cap admits only one per worker.
    let b = batch(&[4096; 3], 2, 8192);
    let mut cfg = ScheduleConfig::new(2, 8192);
    cfg.assign.mem_limit = 4096.0;
    cfg.assign.delta = 0.0;
    let err = schedule(SchedulerKind::Fcp, &b, &cfg).unwrap_err();
    assert!(err.is_infeasible());
    let row = measure(SchedulerKind::Fcp, &b, &cfg, 0).unwrap();
    assert!(row.comp_imbalance.is_nan());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batches_conserve_tokens(seed in 0u64..1000, n in 1usize..16) {
        let spec = DistributionSpec::lognormal(0.7, 16384.0);
        let trace = generate_trace(&spec, seed, 200).unwrap();
        let tpw = 65536;
        let batches = build_batches(&trace, n.max(8), tpw).unwrap();
        let total: u64 = batches.iter().map(Batch::total_tokens).sum();
        prop_assert_eq!(total, trace.total_tokens());
        for b in &batches {
            prop_assert!(b.total_tokens() <= b.capacity());
        }
        let mut ids: Vec<u64> = batches.iter().flat_map(|b| b.sequences.iter().map(|s| s.id)).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..200).collect::<Vec<u64>>());
    }

    #[test]
    fn assignment_respects_cap(seed in 0u64..500, n in 2usize..12) {
        let spec = DistributionSpec::lognormal(0.7, 8192.0).with_bounds(256, 65536);
        let trace = generate_trace(&spec, seed, 64).unwrap();
        let b = build_batches(&trace, n, 32768).unwrap().swap_remove(0);
        let cfg = ScheduleConfig::new(n, 32768);
        let units = shard_batch(&b, &cfg.sharding).unwrap();
        let deps = kv_dependencies(&units, Mask::Causal);
        let loads = unit_loads(&units, &deps, &cfg.model, &cfg.efficiency);
        match assign(&loads, n, &cfg.assign) {
            Ok(a) => {
                prop_assert_eq!(a.worker_of.len(), units.len());
                prop_assert!(a.loads.iter().all(|l| l.memory <= cfg.assign.cap()));
            }
            Err(e) => prop_assert!(e.is_infeasible()),
        }
    }
}
