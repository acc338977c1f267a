//! Congestion-free communication planning.
//!
//! KV transfers form a bipartite multigraph between sender and receiver
//! copies of the workers. Padding it to a Δ-regular graph and peeling off
//! perfect matchings yields exactly Δ rounds in which every worker sends and
//! receives at most one block.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::distributor::Placement;
use crate::error::{Error, Result};
use crate::matching::hopcroft_karp;
use crate::sharding::ChunkId;

pub const DEFAULT_COALESCE: usize = 16;

/// A directed transfer of one or more KV chunks.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub payload: Vec<ChunkId>,
}

impl Edge {
    pub fn new(src: usize, dst: usize, payload: Vec<ChunkId>) -> Self {
        Edge { src, dst, payload }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BipartiteMultigraph {
    n: usize,
    edges: Vec<Edge>,
}

impl BipartiteMultigraph {
    pub fn new(n: usize) -> Self {
        BipartiteMultigraph {
            n,
            edges: Vec::new(),
        }
    }

    pub fn add_edge(&mut self, edge: Edge) -> Result<()> {
        if edge.src == edge.dst {
            return Err(Error::Parameter(format!(
                "self edge on worker {}",
                edge.src
            )));
        }
        if edge.src >= self.n || edge.dst >= self.n {
            return Err(Error::Parameter(format!(
                "edge {}->{} outside {} workers",
                edge.src, edge.dst, self.n
            )));
        }
        self.edges.push(edge);
        Ok(())
    }

    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = Self::new(n);
        for (s, d) in pairs {
            g.add_edge(Edge::new(s, d, Vec::new()))?;
        }
        Ok(g)
    }

    pub fn n_workers(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn send_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        self.edges.iter().for_each(|e| d[e.src] += 1);
        d
    }

    pub fn recv_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        self.edges.iter().for_each(|e| d[e.dst] += 1);
        d
    }

    /// Δ, the largest degree over send and receive nodes.
    pub fn max_degree(&self) -> usize {
        self.send_degrees()
            .into_iter()
            .chain(self.recv_degrees())
            .max()
            .unwrap_or(0)
    }
}

/// One edge per (KV chunk, remote worker that consumes it).
pub fn build_comm_graph(placement: &Placement) -> BipartiteMultigraph {
    let mut g = BipartiteMultigraph::new(placement.n_workers());
    for (kv, src, dst) in placement.remote_transfers() {
        g.edges.push(Edge::new(src, dst, vec![kv]));
    }
    g
}

/// Ordered list of communication rounds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommPlan {
    pub n_workers: usize,
    pub sub_stages: Vec<Vec<Edge>>,
}

impl CommPlan {
    pub fn new(n_workers: usize, sub_stages: Vec<Vec<Edge>>) -> Self {
        CommPlan {
            n_workers,
            sub_stages,
        }
    }

    pub fn stage_count(&self) -> usize {
        self.sub_stages.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.sub_stages.iter().flatten()
    }

    pub fn edge_count(&self) -> usize {
        self.sub_stages.iter().map(Vec::len).sum()
    }

    /// Checks that every round has each worker sending and receiving at most
    /// once.
    pub fn validate_matchings(&self) -> Result<()> {
        for (t, stage) in self.sub_stages.iter().enumerate() {
            let mut sends = vec![false; self.n_workers];
            let mut recvs = vec![false; self.n_workers];
            for e in stage {
                if e.src >= self.n_workers || e.dst >= self.n_workers {
                    return Err(Error::Consistency(format!(
                        "sub-stage {t}: worker out of range"
                    )));
                }
                if std::mem::replace(&mut sends[e.src], true) {
                    return Err(Error::Consistency(format!(
                        "sub-stage {t}: worker {} sends twice",
                        e.src
                    )));
                }
                if std::mem::replace(&mut recvs[e.dst], true) {
                    return Err(Error::Consistency(format!(
                        "sub-stage {t}: worker {} receives twice",
                        e.dst
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Splits `g` into exactly Δ matchings.
pub fn decompose_matchings(g: &BipartiteMultigraph) -> Result<CommPlan> {
    let n = g.n;
    let delta = g.max_degree();
    if delta == 0 {
        return Ok(CommPlan::new(n, Vec::new()));
    }

    // Parallel edges collapse into a multiplicity per (src, dst); real edges
    // are queued per pair so they are handed out before padding.
    let mut count = vec![0usize; n * n];
    let mut real: HashMap<(usize, usize), VecDeque<Edge>> = HashMap::new();
    for e in &g.edges {
        count[e.src * n + e.dst] += 1;
        real.entry((e.src, e.dst)).or_default().push_back(e.clone());
    }

    let mut send_def: Vec<usize> = g.send_degrees().into_iter().map(|d| delta - d).collect();
    let mut recv_def: Vec<usize> = g.recv_degrees().into_iter().map(|d| delta - d).collect();
    let (mut s, mut r) = (0, 0);
    loop {
        while s < n && send_def[s] == 0 {
            s += 1;
        }
        while r < n && recv_def[r] == 0 {
            r += 1;
        }
        if s == n || r == n {
            break;
        }
        let k = send_def[s].min(recv_def[r]);
        count[s * n + r] += k;
        send_def[s] -= k;
        recv_def[r] -= k;
    }
    if send_def.iter().chain(&recv_def).any(|&d| d != 0) {
        return Err(Error::Logic("padding did not reach a regular graph".into()));
    }

    let mut sub_stages = Vec::with_capacity(delta);
    let mut previous: Option<Vec<Option<usize>>> = None;
    while sub_stages.len() < delta {
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|s| (0..n).filter(|&r| count[s * n + r] > 0).collect())
            .collect();
        let mate = hopcroft_karp(n, &adj, previous.as_deref());
        let pairs: Vec<(usize, usize)> = mate
            .iter()
            .enumerate()
            .map(|(s, m)| m.map(|r| (s, r)))
            .collect::<Option<_>>()
            .ok_or_else(|| {
                Error::Logic("regular bipartite graph without a perfect matching".into())
            })?;

        // The same matching can be peeled as often as its thinnest pair allows.
        let times = pairs
            .iter()
            .map(|&(s, r)| count[s * n + r])
            .min()
            .unwrap_or(0);
        let times = times.min(delta - sub_stages.len());
        for _ in 0..times {
            let mut stage = Vec::new();
            for &(s, r) in &pairs {
                count[s * n + r] -= 1;
                if let Some(e) = real.get_mut(&(s, r)).and_then(VecDeque::pop_front) {
                    stage.push(e);
                }
            }
            sub_stages.push(stage);
        }
        previous = Some(mate);
    }
    if count.iter().any(|&c| c != 0) || real.values().any(|q| !q.is_empty()) {
        return Err(Error::Logic("edges left over after decomposition".into()));
    }
    Ok(CommPlan::new(n, sub_stages))
}

/// Reorders rounds by descending edge count; ties keep their order.
pub fn stage_ordering(plan: &CommPlan) -> CommPlan {
    let mut sub_stages = plan.sub_stages.clone();
    sub_stages.sort_by_key(|s| std::cmp::Reverse(s.len()));
    CommPlan::new(plan.n_workers, sub_stages)
}

/// Rounds grouped into execution stages of at most `degree` rounds each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoalescedPlan {
    pub n_workers: usize,
    pub degree: usize,
    pub stages: Vec<Vec<Vec<Edge>>>,
}

impl CoalescedPlan {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn sub_stage_count(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.stages.iter().flatten().flatten()
    }

    pub fn sends(&self, stage: usize, worker: usize) -> Vec<&Edge> {
        self.stages[stage]
            .iter()
            .flatten()
            .filter(|e| e.src == worker)
            .collect()
    }

    pub fn recvs(&self, stage: usize, worker: usize) -> Vec<&Edge> {
        self.stages[stage]
            .iter()
            .flatten()
            .filter(|e| e.dst == worker)
            .collect()
    }

    /// Largest number of sends or receives any worker has in any stage.
    pub fn max_transfers_per_stage(&self) -> usize {
        let mut worst = 0;
        for stage in &self.stages {
            let mut sends = vec![0; self.n_workers];
            let mut recvs = vec![0; self.n_workers];
            for e in stage.iter().flatten() {
                sends[e.src] += 1;
                recvs[e.dst] += 1;
            }
            worst = worst.max(sends.into_iter().chain(recvs).max().unwrap_or(0));
        }
        worst
    }

    /// Flattens back into the underlying rounds.
    pub fn to_comm_plan(&self) -> CommPlan {
        CommPlan::new(
            self.n_workers,
            self.stages.iter().flatten().cloned().collect(),
        )
    }
}

pub fn coalesce(plan: &CommPlan, degree: usize) -> Result<CoalescedPlan> {
    if degree == 0 {
        return Err(Error::Parameter(
            "coalesce degree must be at least 1".into(),
        ));
    }
    Ok(CoalescedPlan {
        n_workers: plan.n_workers,
        degree,
        stages: plan.sub_stages.chunks(degree).map(<[_]>::to_vec).collect(),
    })
}

/// Graph, decomposition, density ordering and coalescing in one call.
pub fn plan_placement(placement: &Placement, degree: usize) -> Result<CoalescedPlan> {
    let plan = decompose_matchings(&build_comm_graph(placement))?;
    coalesce(&stage_ordering(&plan), degree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{EfficiencyCurve, ModelConfig};
    use crate::distributor::{unit_loads, Assignment};
    use crate::sharding::{kv_dependencies, Chunk, Mask, ScheduleUnit, UnitKind};
    use proptest::prelude::*;

    fn pairs(plan: &CommPlan) -> Vec<Vec<(usize, usize)>> {
        plan.sub_stages
            .iter()
            .map(|s| s.iter().map(|e| (e.src, e.dst)).collect())
            .collect()
    }

    #[test]
    fn fan_out_needs_two_rounds() {
        let g = BipartiteMultigraph::from_pairs(3, [(0, 1), (0, 2)]).unwrap();
        let plan = decompose_matchings(&g).unwrap();
        assert_eq!(pairs(&plan), vec![vec![(0, 1)], vec![(0, 2)]]);
    }

    #[test]
    fn matching_stays_one_round() {
        let g = BipartiteMultigraph::from_pairs(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        let plan = decompose_matchings(&g).unwrap();
        assert_eq!(plan.stage_count(), 1);
        assert_eq!(plan.edge_count(), 3);
    }

    #[test]
    fn empty_graph() {
        let plan = decompose_matchings(&BipartiteMultigraph::new(4)).unwrap();
        assert_eq!(plan.stage_count(), 0);
    }

    #[test]
    fn self_edges_rejected() {
        assert!(BipartiteMultigraph::from_pairs(2, [(1, 1)]).is_err());
        assert!(BipartiteMultigraph::from_pairs(2, [(0, 2)]).is_err());
    }

    #[test]
    fn parallel_edges_split() {
        let g = BipartiteMultigraph::from_pairs(2, [(0, 1), (0, 1), (0, 1), (1, 0)]).unwrap();
        let plan = decompose_matchings(&g).unwrap();
        assert_eq!(plan.stage_count(), 3);
        plan.validate_matchings().unwrap();
    }

    fn seq_chunks(seq: u64, tokens: &[u64]) -> Vec<Chunk> {
        tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| Chunk {
                seq_id: seq,
                index: i as u32,
                tokens: t,
            })
            .collect()
    }

    fn placement(units: Vec<Vec<Chunk>>, worker_of: Vec<usize>, n: usize) -> Placement {
        let units: Vec<ScheduleUnit> = units
            .into_iter()
            .enumerate()
            .map(|(id, members)| ScheduleUnit {
                id,
                kind: UnitKind::ZigzagPair,
                members,
            })
            .collect();
        let deps = kv_dependencies(&units, Mask::Causal);
        let loads = unit_loads(
            &units,
            &deps,
            &ModelConfig::default(),
            &EfficiencyCurve::default(),
        );
        let a = Assignment::from_mapping(n, worker_of, &loads).unwrap();
        Placement::new(units, Mask::Causal, a).unwrap()
    }

    #[test]
    fn fan_out_to_two_workers() {
        // Chunk 0 on worker 2 feeds chunk 1 on worker 0 and chunk 2 on worker 1.
        let c = seq_chunks(0, &[4, 4, 4]);
        let p = placement(vec![vec![c[1]], vec![c[2]], vec![c[0]]], vec![0, 1, 2], 3);
        let g = build_comm_graph(&p);
        let got: Vec<(usize, usize)> = g
            .edges()
            .iter()
            .filter(|e| e.payload == vec![ChunkId::new(0, 0)])
            .map(|e| (e.src, e.dst))
            .collect();
        assert_eq!(got, vec![(2, 0), (2, 1)]);
    }

    #[test]
    fn one_edge_per_destination() {
        let c = seq_chunks(0, &[4, 4, 4, 4]);
        let p = placement(vec![vec![c[0]], c[1..].to_vec()], vec![0, 1], 2);
        let g = build_comm_graph(&p);
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edges()[0], Edge::new(0, 1, vec![ChunkId::new(0, 0)]));
    }

    #[test]
    fn resident_sequence_has_no_edges() {
        let c = seq_chunks(0, &[4, 4]);
        let p = placement(vec![c], vec![1], 2);
        assert!(build_comm_graph(&p).edges().is_empty());
    }

    #[test]
    fn coalesce_grouping() {
        let mk =
            |k: usize| CommPlan::new(2, (0..k).map(|_| vec![Edge::new(0, 1, vec![])]).collect());
        assert_eq!(coalesce(&mk(32), 16).unwrap().stage_count(), 2);
        let five = coalesce(&mk(5), 4).unwrap();
        assert_eq!(
            five.stages.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![4, 1]
        );
        let id = coalesce(&mk(3), 1).unwrap();
        assert_eq!(id.to_comm_plan(), mk(3));
        assert_eq!(id.stage_count(), 3);
        assert!(coalesce(&mk(1), 0).is_err());
    }

    #[test]
    fn ordering_by_density() {
        let e = |s, d| Edge::new(s, d, vec![]);
        let plan = CommPlan::new(
            4,
            vec![
                vec![e(0, 1)],
                vec![e(0, 1), e(1, 2), e(2, 3)],
                vec![e(0, 1), e(1, 0)],
            ],
        );
        let lens: Vec<usize> = stage_ordering(&plan)
            .sub_stages
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(lens, vec![3, 2, 1]);
        let flat = CommPlan::new(3, vec![vec![e(0, 1)], vec![e(1, 2)], vec![e(2, 0)]]);
        assert_eq!(stage_ordering(&flat), flat);
    }

    proptest! {
        #[test]
        fn decomposition_is_exact(n in 2usize..12, raw in prop::collection::vec((0usize..64, 0usize..64), 0..120)) {
            let edges: Vec<(usize, usize)> = raw
                .into_iter()
                .map(|(a, b)| (a % n, b % n))
                .filter(|(a, b)| a != b)
                .collect();
            let g = BipartiteMultigraph::from_pairs(n, edges.iter().copied()).unwrap();
            let plan = decompose_matchings(&g).unwrap();
            prop_assert_eq!(plan.stage_count(), g.max_degree());
            plan.validate_matchings().unwrap();
            let mut got: Vec<(usize, usize)> = plan.edges().map(|e| (e.src, e.dst)).collect();
            let mut want = edges;
            got.sort_unstable();
            want.sort_unstable();
            prop_assert_eq!(got, want);
            let c = coalesce(&plan, 4).unwrap();
            prop_assert!(c.max_transfers_per_stage() <= 4);
        }
    }
}
