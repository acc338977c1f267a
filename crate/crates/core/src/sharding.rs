//! Fixed-size blocking of sequences into schedule units.
//!
//! A sequence of at least one block is cut into `2k` chunks of half a block
//! and chunk `i` is paired with chunk `2k - 1 - i`; under a causal mask every
//! pair then carries the same attention work and the same number of KV
//! consumers. Sequences shorter than a block are packed whole into
//! variable-length units.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{Batch, Sequence};

pub const DEFAULT_BLOCK_SIZE: u64 = 4096;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mask {
    #[default]
    Causal,
    Full,
}

/// Position of a chunk inside its sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkId {
    #[serde(rename = "seq")]
    pub seq_id: u64,
    #[serde(rename = "chunk")]
    pub index: u32,
}

impl ChunkId {
    pub fn new(seq_id: u64, index: u32) -> Self {
        ChunkId { seq_id, index }
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}#{}", self.seq_id, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chunk {
    pub seq_id: u64,
    pub index: u32,
    pub tokens: u64,
}

impl Chunk {
    pub fn id(&self) -> ChunkId {
        ChunkId::new(self.seq_id, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    ZigzagPair,
    VarlenPack,
}

/// The atomic unit of assignment and execution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleUnit {
    pub id: usize,
    pub kind: UnitKind,
    pub members: Vec<Chunk>,
}

impl ScheduleUnit {
    pub fn tokens(&self) -> u64 {
        self.members.iter().map(|c| c.tokens).sum()
    }

    pub fn source_seq_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.members.iter().map(|c| c.seq_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Length of the shortest segment the attention kernel sees.
    pub fn shortest_member(&self) -> u64 {
        self.members.iter().map(|c| c.tokens).min().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardingConfig {
    #[serde(default = "default_block_size")]
    pub block_size: u64,
    #[serde(default)]
    pub mask: Mask,
}

fn default_block_size() -> u64 {
    DEFAULT_BLOCK_SIZE
}

impl Default for ShardingConfig {
    fn default() -> Self {
        ShardingConfig {
            block_size: DEFAULT_BLOCK_SIZE,
            mask: Mask::Causal,
        }
    }
}

impl ShardingConfig {
    pub fn new(block_size: u64, mask: Mask) -> Self {
        ShardingConfig { block_size, mask }
    }

    pub fn chunk_size(&self) -> u64 {
        self.block_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 || !self.block_size.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "block_size must be even and at least 2, got {}",
                self.block_size
            )));
        }
        Ok(())
    }
}

/// Zig-Zag pairing over `2k` chunks: `(i, 2k - 1 - i)` for `i < k`.
pub fn zigzag_pairs(k: usize) -> Vec<(u32, u32)> {
    (0..k).map(|i| (i as u32, (2 * k - 1 - i) as u32)).collect()
}

/// Splits `total` into `parts` sizes that differ by at most one, larger
/// sizes first.
pub fn split_evenly(total: u64, parts: usize) -> Vec<u64> {
    assert!(parts > 0, "cannot split into zero parts");
    let base = total / parts as u64;
    let extra = (total % parts as u64) as usize;
    (0..parts).map(|i| base + u64::from(i < extra)).collect()
}

/// Chunk sizes for a sequence that spans at least one block.
///
/// `k = ceil(len / block_size)` blocks give `2k` chunks of at most
/// `block_size / 2` tokens. `k` is capped at `len / 2` so that every chunk
/// keeps at least one token.
pub fn block_chunks(length: u64, block_size: u64) -> Vec<u64> {
    let k = length.div_ceil(block_size).min(length / 2).max(1);
    split_evenly(length, 2 * k as usize)
}

/// First-fit-decreasing packing of whole short sequences into
/// `block_size`-token units. Unit ids start at zero.
pub fn pack_short_sequences(shorts: &[Sequence], block_size: u64) -> Vec<ScheduleUnit> {
    let mut order: Vec<&Sequence> = shorts.iter().collect();
    order.sort_by_key(|s| std::cmp::Reverse(s.length));

    let mut bins: Vec<(u64, Vec<Chunk>)> = Vec::new();
    for s in order {
        assert!(
            s.length < block_size,
            "sequence {} with {} tokens is not shorter than a block",
            s.id,
            s.length
        );
        let chunk = Chunk {
            seq_id: s.id,
            index: 0,
            tokens: s.length,
        };
        match bins
            .iter_mut()
            .find(|(used, _)| used + s.length <= block_size)
        {
            Some((used, members)) => {
                *used += s.length;
                members.push(chunk);
            }
            None => bins.push((s.length, vec![chunk])),
        }
    }
    bins.into_iter()
        .enumerate()
        .map(|(id, (_, members))| ScheduleUnit {
            id,
            kind: UnitKind::VarlenPack,
            members,
        })
        .collect()
}

/// Shards every sequence of a batch. Long sequences come first in batch
/// order, followed by the packed short ones; unit ids are positions.
pub fn shard_batch(batch: &Batch, cfg: &ShardingConfig) -> Result<Vec<ScheduleUnit>> {
    cfg.validate()?;
    let mut units = Vec::new();
    let mut shorts = Vec::new();
    for s in &batch.sequences {
        if s.length < cfg.block_size {
            shorts.push(*s);
            continue;
        }
        let sizes = block_chunks(s.length, cfg.block_size);
        let chunk = |i: u32| Chunk {
            seq_id: s.id,
            index: i,
            tokens: sizes[i as usize],
        };
        for (lo, hi) in zigzag_pairs(sizes.len() / 2) {
            units.push(ScheduleUnit {
                id: units.len(),
                kind: UnitKind::ZigzagPair,
                members: vec![chunk(lo), chunk(hi)],
            });
        }
    }
    for mut unit in pack_short_sequences(&shorts, cfg.block_size) {
        unit.id = units.len();
        units.push(unit);
    }
    Ok(units)
}

/// Which KV chunks each Q chunk attends to.
///
/// Under a causal mask Q chunk `p` reads KV chunks `0..=p` of its own
/// sequence; under a full mask it reads all of them. Sequences never attend
/// across each other.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvDependencies {
    mask: Mask,
    chunks: BTreeMap<u64, Vec<u64>>,
}

impl KvDependencies {
    pub fn mask(&self) -> Mask {
        self.mask
    }

    pub fn sequence_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.chunks.keys().copied()
    }

    pub fn chunk_count(&self, seq_id: u64) -> usize {
        self.chunks.get(&seq_id).map_or(0, Vec::len)
    }

    /// Sequences with their chunk sizes, ordered by sequence id.
    pub fn sequences(&self) -> impl Iterator<Item = (u64, &[u64])> + '_ {
        self.chunks.iter().map(|(&s, sizes)| (s, sizes.as_slice()))
    }

    /// Chunk sizes of one sequence; empty if the sequence is unknown.
    pub fn sequence_chunks(&self, seq_id: u64) -> &[u64] {
        self.chunks.get(&seq_id).map_or(&[], Vec::as_slice)
    }

    pub fn chunk_tokens(&self, id: ChunkId) -> Option<u64> {
        self.chunks.get(&id.seq_id)?.get(id.index as usize).copied()
    }

    /// Every chunk, ordered by sequence then index.
    pub fn chunks(&self) -> impl Iterator<Item = Chunk> + '_ {
        self.chunks.iter().flat_map(|(&seq_id, sizes)| {
            sizes.iter().enumerate().map(move |(i, &tokens)| Chunk {
                seq_id,
                index: i as u32,
                tokens,
            })
        })
    }

    /// KV chunks read by Q chunk `q`.
    pub fn producers(&self, q: ChunkId) -> impl Iterator<Item = ChunkId> {
        let n = self.chunk_count(q.seq_id) as u32;
        let end = match self.mask {
            Mask::Causal => (q.index + 1).min(n),
            Mask::Full => n,
        };
        (0..end).map(move |i| ChunkId::new(q.seq_id, i))
    }

    /// Q chunks that read KV chunk `kv`, including `kv`'s own Q chunk.
    pub fn consumers(&self, kv: ChunkId) -> impl Iterator<Item = ChunkId> {
        let n = self.chunk_count(kv.seq_id) as u32;
        let start = match self.mask {
            Mask::Causal => kv.index.min(n),
            Mask::Full => 0,
        };
        (start..n).map(move |i| ChunkId::new(kv.seq_id, i))
    }

    /// Query-key token pairs computed when Q chunk `q` attends KV chunk `kv`.
    pub fn tile_pairs(&self, q: ChunkId, kv: ChunkId) -> u64 {
        if q.seq_id != kv.seq_id {
            return 0;
        }
        let (Some(qt), Some(kt)) = (self.chunk_tokens(q), self.chunk_tokens(kv)) else {
            return 0;
        };
        tile_pairs(self.mask, q.index, qt, kv.index, kt)
    }
}

/// Token pairs between Q chunk `p` of `q_tokens` and KV chunk `r` of
/// `kv_tokens` within one sequence.
pub fn tile_pairs(mask: Mask, p: u32, q_tokens: u64, r: u32, kv_tokens: u64) -> u64 {
    match mask {
        Mask::Full => q_tokens * kv_tokens,
        Mask::Causal if r < p => q_tokens * kv_tokens,
        Mask::Causal if r == p => q_tokens * (q_tokens + 1) / 2,
        Mask::Causal => 0,
    }
}

/// Collects the chunk layout of every sequence covered by `units`.
///
/// Panics if a sequence's chunk indices are not contiguous from zero, which
/// no sharding routine in this crate produces.
pub fn kv_dependencies(units: &[ScheduleUnit], mask: Mask) -> KvDependencies {
    let mut by_seq: BTreeMap<u64, BTreeMap<u32, u64>> = BTreeMap::new();
    for c in units.iter().flat_map(|u| &u.members) {
        by_seq
            .entry(c.seq_id)
            .or_default()
            .insert(c.index, c.tokens);
    }
    let chunks = by_seq
        .into_iter()
        .map(|(seq, sizes)| {
            assert!(
                sizes.keys().enumerate().all(|(i, &idx)| i as u32 == idx),
                "sequence {seq} has non-contiguous chunk indices"
            );
            (seq, sizes.into_values().collect())
        })
        .collect();
    KvDependencies { mask, chunks }
}
