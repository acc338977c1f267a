//! Compute, memory and communication costs of schedule units, the
//! block-size dependent kernel efficiency curve, and the bandwidth needed to
//! hide a block's KV transfer behind its compute.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sharding::{tile_pairs, KvDependencies, ScheduleUnit, UnitKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub q_heads: u32,
    pub kv_heads: u32,
    pub head_dim: u32,
    pub dtype_bytes: u32,
    /// Backward FLOPs as a multiple of forward FLOPs.
    pub backward_multiplier: f64,
}

impl Default for ModelConfig {
    /// Llama-3-70B attention shape in 16-bit precision.
    fn default() -> Self {
        ModelConfig {
            q_heads: 64,
            kv_heads: 8,
            head_dim: 128,
            dtype_bytes: 2,
            backward_multiplier: 2.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q_heads == 0 || self.kv_heads == 0 || self.head_dim == 0 || self.dtype_bytes == 0 {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        if self.kv_heads > self.q_heads {
            return Err(Error::Parameter(format!(
                "kv_heads {} exceeds q_heads {}",
                self.kv_heads, self.q_heads
            )));
        }
        if !(self.backward_multiplier > 0.0) {
            return Err(Error::Parameter(
                "backward_multiplier must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Two matmuls per query-key pair at two FLOPs per multiply-accumulate.
    pub fn flops_per_pair(&self) -> f64 {
        4.0 * f64::from(self.q_heads) * f64::from(self.head_dim)
    }

    /// Bytes of K and V for one token.
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * u64::from(self.kv_heads) * u64::from(self.head_dim) * u64::from(self.dtype_bytes)
    }

    /// Bytes of Q, K and V for one token.
    pub fn qkv_bytes_per_token(&self) -> u64 {
        u64::from(self.q_heads + 2 * self.kv_heads)
            * u64::from(self.head_dim)
            * u64::from(self.dtype_bytes)
    }

    pub fn kv_bytes(&self, tokens: u64) -> u64 {
        self.kv_bytes_per_token() * tokens
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareConfig {
    /// Dense per-worker throughput, FLOP/s.
    pub peak_flops: f64,
    /// Device memory bandwidth, bytes/s.
    pub mem_bandwidth: f64,
    /// Full-duplex per-worker network bandwidth, bytes/s.
    pub nic_bandwidth: f64,
}

impl Default for HardwareConfig {
    /// A Hopper-class GPU on a 400 Gb/s InfiniBand port.
    fn default() -> Self {
        HardwareConfig {
            peak_flops: 989e12,
            mem_bandwidth: 4.8e12,
            nic_bandwidth: 50e9,
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("peak_flops", self.peak_flops),
            ("mem_bandwidth", self.mem_bandwidth),
            ("nic_bandwidth", self.nic_bandwidth),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn comp_comm_ratio(&self) -> f64 {
        self.peak_flops / self.nic_bandwidth
    }

    pub fn with_nic_bandwidth(mut self, nic_bandwidth: f64) -> Self {
        self.nic_bandwidth = nic_bandwidth;
        self
    }
}

/// Attention-kernel utilization as a function of segment length.
///
/// Piecewise linear between anchors and clamped outside them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u64, f64)>", into = "Vec<(u64, f64)>")]
pub struct EfficiencyCurve {
    anchors: Vec<(u64, f64)>,
}

impl Default for EfficiencyCurve {
    fn default() -> Self {
        EfficiencyCurve {
            anchors: vec![
                (256, 0.12),
                (512, 0.25),
                (1024, 0.45),
                (2048, 0.70),
                (4096, 0.90),
                (8192, 0.95),
                (16384, 0.97),
            ],
        }
    }
}

impl TryFrom<Vec<(u64, f64)>> for EfficiencyCurve {
    type Error = Error;

    fn try_from(anchors: Vec<(u64, f64)>) -> Result<Self> {
        EfficiencyCurve::new(anchors)
    }
}

impl From<EfficiencyCurve> for Vec<(u64, f64)> {
    fn from(curve: EfficiencyCurve) -> Self {
        curve.anchors
    }
}

impl EfficiencyCurve {
    pub fn new(anchors: Vec<(u64, f64)>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Parameter(
                "efficiency curve needs at least one anchor".into(),
            ));
        }
        for w in anchors.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Parameter(
                    "efficiency anchors must have increasing tokens".into(),
                ));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::Parameter(
                    "efficiency anchors must be non-decreasing".into(),
                ));
            }
        }
        if anchors.iter().any(|&(_, f)| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Parameter(
                "efficiency fractions must lie in (0, 1]".into(),
            ));
        }
        Ok(EfficiencyCurve { anchors })
    }

    /// A curve that is `fraction` everywhere.
    pub fn flat(fraction: f64) -> Result<Self> {
        Self::new(vec![(1, fraction)])
    }

    pub fn anchors(&self) -> &[(u64, f64)] {
        &self.anchors
    }

    /// The plateau value, used to normalize utilization figures.
    pub fn saturation(&self) -> f64 {
        self.anchors.last().expect("curve is non-empty").1
    }

    pub fn efficiency(&self, segment_tokens: u64) -> f64 {
        let (first, last) = (self.anchors[0], *self.anchors.last().unwrap());
        if segment_tokens <= first.0 {
            return first.1;
        }
        if segment_tokens >= last.0 {
            return last.1;
        }
        let i = self.anchors.partition_point(|&(t, _)| t <= segment_tokens);
        let (t0, f0) = self.anchors[i - 1];
        let (t1, f1) = self.anchors[i];
        let frac = (segment_tokens - t0) as f64 / (t1 - t0) as f64;
        f0 + frac * (f1 - f0)
    }
}

/// Work and footprint of one schedule unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostVector {
    /// Query-key token pairs computed by the unit's Q chunks.
    pub compute: u64,
    /// Resident tokens.
    pub memory: u64,
    /// Bytes to ship all of the unit's KV chunks once.
    pub kv_bytes: u64,
}

impl CostVector {
    pub fn flops(&self, cfg: &ModelConfig) -> f64 {
        self.compute as f64 * cfg.flops_per_pair()
    }
}

pub fn unit_costs(unit: &ScheduleUnit, deps: &KvDependencies, cfg: &ModelConfig) -> CostVector {
    let compute = unit
        .members
        .iter()
        .map(|q| {
            let sizes = deps.sequence_chunks(q.seq_id);
            deps.producers(q.id())
                .map(|kv| {
                    tile_pairs(
                        deps.mask(),
                        q.index,
                        q.tokens,
                        kv.index,
                        sizes[kv.index as usize],
                    )
                })
                .sum::<u64>()
        })
        .sum();
    CostVector {
        compute,
        memory: unit.tokens(),
        kv_bytes: unit.members.iter().map(|c| cfg.kv_bytes(c.tokens)).sum(),
    }
}

/// Kernel efficiency a unit runs at. A Zig-Zag pair executes as one block;
/// a varlen pack is limited by its shortest sequence.
pub fn unit_efficiency(unit: &ScheduleUnit, curve: &EfficiencyCurve) -> f64 {
    let segment = match unit.kind {
        UnitKind::ZigzagPair => unit.tokens(),
        UnitKind::VarlenPack => unit.shortest_member(),
    };
    curve.efficiency(segment.max(1))
}

/// Token pairs scaled up by kernel inefficiency: the effective work `f(B)`
/// the distributor balances.
pub fn adjusted_compute(cost: &CostVector, efficiency: f64) -> f64 {
    cost.compute as f64 / efficiency
}

pub fn efficiency(curve: &EfficiencyCurve, segment_tokens: u64) -> f64 {
    curve.efficiency(segment_tokens)
}

/// Data reuse needed per loaded element to saturate compute.
pub fn arithmetic_intensity_threshold(hw: &HardwareConfig, dtype_bytes: u32) -> f64 {
    hw.peak_flops / (hw.mem_bandwidth / f64::from(dtype_bytes))
}

/// Seconds to compute one full `block_size x block_size` attention tile.
pub fn tile_compute_time(
    hw: &HardwareConfig,
    cfg: &ModelConfig,
    curve: &EfficiencyCurve,
    block_size: u64,
) -> f64 {
    let pairs = (block_size as f64).powi(2);
    cfg.flops_per_pair() * pairs / (hw.peak_flops * curve.efficiency(block_size))
}

/// Network bandwidth at which shipping one block of KV takes exactly as long
/// as computing one block-by-block tile.
pub fn required_bandwidth(
    hw: &HardwareConfig,
    cfg: &ModelConfig,
    curve: &EfficiencyCurve,
    block_size: u64,
) -> f64 {
    cfg.kv_bytes(block_size) as f64 / tile_compute_time(hw, cfg, curve, block_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharding::{kv_dependencies, shard_batch, Chunk, Mask, ShardingConfig};
    use crate::workload::{Batch, Sequence};

    fn units_for(lengths: &[u64], block: u64, mask: Mask) -> (Vec<ScheduleUnit>, KvDependencies) {
        let seqs = lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| Sequence::new(i as u64, l))
            .collect();
        let batch = Batch::new(seqs, 64, 1 << 22).unwrap();
        let units = shard_batch(&batch, &ShardingConfig::new(block, mask)).unwrap();
        let deps = kv_dependencies(&units, mask);
        (units, deps)
    }

    #[test]
    fn zigzag_pairs_have_equal_compute() {
        let s = 512u64;
        let (units, deps) = units_for(&[8 * s], 2 * s, Mask::Causal);
        let cfg = ModelConfig::default();
        let costs: Vec<u64> = units
            .iter()
            .map(|u| unit_costs(u, &deps, &cfg).compute)
            .collect();
        // Pair (0, 7): s(s+1)/2 + 7 s^2 + s(s+1)/2.
        let expected = s * (s + 1) / 2 + 7 * s * s + s * (s + 1) / 2;
        assert_eq!(costs, vec![expected; 4]);
    }

    #[test]
    fn lone_full_chunk_is_square() {
        let unit = ScheduleUnit {
            id: 0,
            kind: UnitKind::VarlenPack,
            members: vec![Chunk {
                seq_id: 0,
                index: 0,
                tokens: 777,
            }],
        };
        let deps = kv_dependencies(std::slice::from_ref(&unit), Mask::Full);
        assert_eq!(
            unit_costs(&unit, &deps, &ModelConfig::default()).compute,
            777 * 777
        );
    }

    #[test]
    fn varlen_pack_sums_causal_triangles() {
        let (units, deps) = units_for(&[1000, 3000], 4096, Mask::Causal);
        let cost = unit_costs(&units[0], &deps, &ModelConfig::default());
        assert_eq!(cost.compute, 1000 * 1001 / 2 + 3000 * 3001 / 2);
        assert_eq!(cost.memory, 4000);
    }

    #[test]
    fn kv_bytes_follow_head_layout() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.kv_bytes(1), 2 * 8 * 128 * 2);
        let (units, deps) = units_for(&[4096], 4096, Mask::Causal);
        assert_eq!(
            unit_costs(&units[0], &deps, &cfg).kv_bytes,
            cfg.kv_bytes(4096)
        );
    }

    #[test]
    fn doubling_length_quadruples_compute() {
        let cfg = ModelConfig::default();
        let (u1, d1) = units_for(&[8192], 4096, Mask::Full);
        let (u2, d2) = units_for(&[16384], 4096, Mask::Full);
        let total = |u: &[ScheduleUnit], d: &KvDependencies| {
            u.iter()
                .map(|x| unit_costs(x, d, &cfg).compute)
                .sum::<u64>()
        };
        assert_eq!(total(&u2, &d2), 4 * total(&u1, &d1));
        let (c1, e1) = units_for(&[8192], 4096, Mask::Causal);
        let (c2, e2) = units_for(&[16384], 4096, Mask::Causal);
        let ratio = total(&c2, &e2) as f64 / total(&c1, &e1) as f64;
        assert!((ratio - 4.0).abs() < 1e-3, "causal ratio {ratio}");
    }

    #[test]
    fn default_curve_anchor_and_clamp() {
        let curve = EfficiencyCurve::default();
        assert!((efficiency(&curve, 512) - 0.25).abs() < 1e-12);
        assert!(efficiency(&curve, 4096) >= 0.85);
        assert_eq!(efficiency(&curve, 1 << 20), curve.saturation());
        assert_eq!(efficiency(&curve, 1), 0.12);
        // Midpoint of the 512..1024 segment.
        assert!((efficiency(&curve, 768) - 0.35).abs() < 1e-12);
    }

    #[test]
    fn curve_validation() {
        assert!(EfficiencyCurve::new(vec![]).is_err());
        assert!(EfficiencyCurve::new(vec![(10, 0.5), (10, 0.6)]).is_err());
        assert!(EfficiencyCurve::new(vec![(10, 0.5), (20, 0.4)]).is_err());
        assert!(EfficiencyCurve::new(vec![(10, 0.0)]).is_err());
        assert!(EfficiencyCurve::new(vec![(10, 1.5)]).is_err());
        let json = serde_json::to_string(&EfficiencyCurve::default()).unwrap();
        let back: EfficiencyCurve = serde_json::from_str(&json).unwrap();
        assert_eq!(back, EfficiencyCurve::default());
        assert!(serde_json::from_str::<EfficiencyCurve>("[[10,0.5],[5,0.6]]").is_err());
    }

    #[test]
    fn arithmetic_intensity() {
        let hw = HardwareConfig::default();
        let t = arithmetic_intensity_threshold(&hw, 2);
        assert!((t - 412.0).abs() < 0.5, "threshold {t}");
        let unit = HardwareConfig {
            peak_flops: 2.4e12,
            ..hw
        };
        assert!((arithmetic_intensity_threshold(&unit, 2) - 1.0).abs() < 1e-12);
        let doubled = HardwareConfig {
            peak_flops: 2.0 * hw.peak_flops,
            ..hw
        };
        assert!((arithmetic_intensity_threshold(&doubled, 2) - 2.0 * t).abs() < 1e-9);
    }

    #[test]
    fn required_bandwidth_properties() {
        let hw = HardwareConfig::default();
        let cfg = ModelConfig::default();
        let curve = EfficiencyCurve::default();
        let bw = required_bandwidth(&hw, &cfg, &curve, 4096);
        assert!((bw / 22e9 - 1.0).abs() <= 0.5, "required bandwidth {bw}");
        // Below 512 the default curve more than doubles per octave, so the
        // ratio is only monotone from there up.
        for b in [512u64, 1024, 2048, 4096, 8192, 16384, 32768] {
            assert!(
                required_bandwidth(&hw, &cfg, &curve, 2 * b)
                    < required_bandwidth(&hw, &cfg, &curve, b)
            );
        }
        let half = ModelConfig { q_heads: 32, ..cfg };
        let ratio = required_bandwidth(&hw, &half, &curve, 4096) / bw;
        assert!((ratio - 2.0).abs() < 1e-12);
        let t_full = tile_compute_time(&hw, &cfg, &curve, 4096);
        let t_half = tile_compute_time(&hw, &half, &curve, 4096);
        assert!((t_full / t_half - 2.0).abs() < 1e-12);
    }

    #[test]
    fn model_and_hardware_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            kv_heads: 128,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let hw = HardwareConfig {
            nic_bandwidth: 0.0,
            ..HardwareConfig::default()
        };
        assert!(hw.validate().is_err());
        let ratio = HardwareConfig {
            peak_flops: 5920.0 * 50e9,
            ..HardwareConfig::default()
        };
        assert!((ratio.comp_comm_ratio() - 5920.0).abs() < 1e-9);
    }
}
