//! Sequence traces: synthetic generation, the line-delimited trace file
//! format, and packing traces into batches under a per-worker token budget.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default truncation bounds for synthetic traces (1K to 512K tokens).
pub const DEFAULT_MIN_LENGTH: u64 = 1024;
pub const DEFAULT_MAX_LENGTH: u64 = 512 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    pub id: u64,
    #[serde(rename = "len")]
    pub length: u64,
}

impl Sequence {
    pub fn new(id: u64, length: u64) -> Self {
        Sequence { id, length }
    }
}

/// An ordered list of sequences with unique ids and positive lengths.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceTrace {
    pub sequences: Vec<Sequence>,
}

impl SequenceTrace {
    pub fn new(sequences: Vec<Sequence>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(sequences.len());
        for s in &sequences {
            if s.length == 0 {
                return Err(Error::Parameter(format!(
                    "sequence {} has zero length",
                    s.id
                )));
            }
            if !seen.insert(s.id) {
                return Err(Error::Parameter(format!("duplicate sequence id {}", s.id)));
            }
        }
        Ok(SequenceTrace { sequences })
    }

    /// Builds a trace from lengths, numbering ids from zero.
    pub fn from_lengths(lengths: impl IntoIterator<Item = u64>) -> Result<Self> {
        Self::new(
            lengths
                .into_iter()
                .enumerate()
                .map(|(i, len)| Sequence::new(i as u64, len))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_tokens(&self) -> u64 {
        self.sequences.iter().map(|s| s.length).sum()
    }

    /// Writes the trace as one `{"id":..,"len":..}` record per line.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        for s in &self.sequences {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

/// One lognormal component, parameterized by its expected value rather than
/// the location of the underlying normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LognormalComponent {
    #[serde(default = "one")]
    pub weight: f64,
    pub sigma: f64,
    pub mean: f64,
}

fn one() -> f64 {
    1.0
}

impl LognormalComponent {
    /// Location of the underlying normal: mean = exp(mu + sigma^2 / 2).
    pub fn mu(&self) -> f64 {
        self.mean.ln() - self.sigma * self.sigma / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LengthDistribution {
    Lognormal { sigma: f64, mean: f64 },
    Mixture { components: Vec<LognormalComponent> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub distribution: LengthDistribution,
    pub min_length: u64,
    pub max_length: u64,
}

impl DistributionSpec {
    pub fn lognormal(sigma: f64, mean: f64) -> Self {
        DistributionSpec {
            distribution: LengthDistribution::Lognormal { sigma, mean },
            min_length: DEFAULT_MIN_LENGTH,
            max_length: DEFAULT_MAX_LENGTH,
        }
    }

    /// Equal-weight mixture of two lognormals.
    pub fn bimodal(first: (f64, f64), second: (f64, f64)) -> Self {
        let component = |(sigma, mean)| LognormalComponent {
            weight: 0.5,
            sigma,
            mean,
        };
        DistributionSpec {
            distribution: LengthDistribution::Mixture {
                components: vec![component(first), component(second)],
            },
            min_length: DEFAULT_MIN_LENGTH,
            max_length: DEFAULT_MAX_LENGTH,
        }
    }

    pub fn with_bounds(mut self, min_length: u64, max_length: u64) -> Self {
        self.min_length = min_length;
        self.max_length = max_length;
        self
    }

    fn components(&self) -> Vec<LognormalComponent> {
        match &self.distribution {
            LengthDistribution::Lognormal { sigma, mean } => vec![LognormalComponent {
                weight: 1.0,
                sigma: *sigma,
                mean: *mean,
            }],
            LengthDistribution::Mixture { components } => components.clone(),
        }
    }

    /// Expected length before truncation.
    pub fn mean_length(&self) -> f64 {
        self.components().iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_length == 0 {
            return Err(Error::Parameter("min_length must be at least 1".into()));
        }
        if self.max_length < self.min_length {
            return Err(Error::Parameter(format!(
                "max_length {} is below min_length {}",
                self.max_length, self.min_length
            )));
        }
        let components = self.components();
        if components.is_empty() {
            return Err(Error::Parameter("mixture has no components".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if !(c.mean > 0.0 && c.mean.is_finite()) {
                return Err(Error::Parameter(format!(
                    "mean length must be positive, got {}",
                    c.mean
                )));
            }
            if !(c.sigma >= 0.0 && c.sigma.is_finite()) {
                return Err(Error::Parameter(format!(
                    "sigma must be non-negative, got {}",
                    c.sigma
                )));
            }
            if !(0.0..=1.0).contains(&c.weight) {
                return Err(Error::Parameter(format!(
                    "mixture weight {} outside [0, 1]",
                    c.weight
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Samples `count` sequence lengths from `spec`, clamped to its bounds.
///
/// Sampling is sequential on a single seeded stream, so the first `n`
/// sequences of a longer trace equal the trace generated with `count = n`.
pub fn generate_trace(spec: &DistributionSpec, seed: u64, count: usize) -> Result<SequenceTrace> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Parameter("count must be at least 1".into()));
    }
    let components = spec.components();
    let samplers = components
        .iter()
        .map(|c| LogNormal::new(c.mu(), c.sigma).map_err(|e| Error::Parameter(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut cumulative = Vec::with_capacity(components.len());
    let mut acc = 0.0;
    for c in &components {
        acc += c.weight;
        cumulative.push(acc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..count)
        .map(|i| {
            let pick = if samplers.len() == 1 {
                0
            } else {
                let u: f64 = rng.random::<f64>() * acc;
                cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(samplers.len() - 1)
            };
            let raw: f64 = samplers[pick].sample(&mut rng);
            let length = if raw.is_finite() {
                (raw.round() as u64).clamp(spec.min_length, spec.max_length)
            } else {
                spec.max_length
            };
            Sequence::new(i as u64, length)
        })
        .collect();
    Ok(SequenceTrace { sequences })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceRecord {
    id: u64,
    len: u64,
}

/// Reads a line-delimited trace file. Blank lines are ignored.
pub fn load_trace(path: impl AsRef<Path>) -> Result<SequenceTrace> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let format_err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut sequences = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord =
            serde_json::from_str(&line).map_err(|e| format_err(lineno, e.to_string()))?;
        if record.len == 0 {
            return Err(format_err(
                lineno,
                format!("sequence {} has non-positive length", record.id),
            ));
        }
        if !seen.insert(record.id) {
            return Err(format_err(
                lineno,
                format!("duplicate sequence id {}", record.id),
            ));
        }
        sequences.push(Sequence::new(record.id, record.len));
    }
    Ok(SequenceTrace { sequences })
}

/// Sequences scheduled together on `n_workers` workers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub sequences: Vec<Sequence>,
    pub n_workers: usize,
    pub tokens_per_worker: u64,
}

impl Batch {
    pub fn new(sequences: Vec<Sequence>, n_workers: usize, tokens_per_worker: u64) -> Result<Self> {
        let batch = Batch {
            sequences,
            n_workers,
            tokens_per_worker,
        };
        if n_workers == 0 || tokens_per_worker == 0 {
            return Err(Error::Parameter(
                "n_workers and tokens_per_worker must be positive".into(),
            ));
        }
        if batch.total_tokens() > batch.capacity() {
            return Err(Error::Infeasible(format!(
                "batch holds {} tokens, budget is {}",
                batch.total_tokens(),
                batch.capacity()
            )));
        }
        Ok(batch)
    }

    pub fn total_tokens(&self) -> u64 {
        self.sequences.iter().map(|s| s.length).sum()
    }

    pub fn capacity(&self) -> u64 {
        self.n_workers as u64 * self.tokens_per_worker
    }
}

/// First-fit in trace order: a batch is closed as soon as the next sequence
/// would push it over `n_workers * tokens_per_worker`. Sequences are never
/// split or trimmed.
pub fn build_batches(
    trace: &SequenceTrace,
    n_workers: usize,
    tokens_per_worker: u64,
) -> Result<Vec<Batch>> {
    if n_workers == 0 || tokens_per_worker == 0 {
        return Err(Error::Parameter(
            "n_workers and tokens_per_worker must be positive".into(),
        ));
    }
    let budget = n_workers as u64 * tokens_per_worker;
    let mut batches = Vec::new();
    let mut current: Vec<Sequence> = Vec::new();
    let mut used = 0u64;
    for s in &trace.sequences {
        if s.length > budget {
            return Err(Error::Infeasible(format!(
                "sequence {} has {} tokens, more than the whole batch budget {}",
                s.id, s.length, budget
            )));
        }
        if used + s.length > budget {
            batches.push(Batch {
                sequences: std::mem::take(&mut current),
                n_workers,
                tokens_per_worker,
            });
            used = 0;
        }
        used += s.length;
        current.push(*s);
    }
    if !current.is_empty() {
        batches.push(Batch {
            sequences: current,
            n_workers,
            tokens_per_worker,
        });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lognormal_mean_matches_requested() {
        let spec = DistributionSpec::lognormal(0.7, 16384.0);
        let trace = generate_trace(&spec, 7, 10_000).unwrap();
        assert_eq!(trace.len(), 10_000);
        let mean = trace.total_tokens() as f64 / trace.len() as f64;
        assert!((mean / 16384.0 - 1.0).abs() < 0.10, "empirical mean {mean}");
    }

    #[test]
    fn degenerate_bounds_pin_every_length() {
        let spec = DistributionSpec::lognormal(0.7, 16384.0).with_bounds(4096, 4096);
        let trace = generate_trace(&spec, 3, 500).unwrap();
        assert!(trace.sequences.iter().all(|s| s.length == 4096));
    }

    #[test]
    fn bimodal_mixture_has_two_modes() {
        let spec = DistributionSpec::bimodal((0.5, 16384.0), (0.5, 65536.0));
        let trace = generate_trace(&spec, 11, 40_000).unwrap();
        // Histogram of log2(length) in quarter-octave bins.
        let bin = |len: u64| ((len as f64).log2() * 4.0).floor() as usize;
        let mut hist = vec![0usize; 80];
        for s in &trace.sequences {
            hist[bin(s.length)] += 1;
        }
        let peak_in = |lo: f64, hi: f64| {
            let (lo, hi) = ((lo * 4.0) as usize, (hi * 4.0) as usize);
            (lo..hi).max_by_key(|&b| hist[b]).unwrap()
        };
        let low = peak_in(12.0, 14.8);
        let high = peak_in(14.8, 17.5);
        let valley = (low..=high).min_by_key(|&b| hist[b]).unwrap();
        let center = |b: usize| (b as f64 + 0.5) / 4.0;
        assert!(
            (center(low) - 14.0).abs() <= 0.75,
            "low mode at 2^{}",
            center(low)
        );
        assert!(
            (center(high) - 16.0).abs() <= 0.75,
            "high mode at 2^{}",
            center(high)
        );
        assert!(hist[low] as f64 > 1.1 * hist[valley] as f64);
        assert!(hist[high] as f64 > 1.1 * hist[valley] as f64);
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let spec = DistributionSpec::bimodal((0.5, 16384.0), (0.5, 65536.0));
        let a = generate_trace(&spec, 42, 300).unwrap();
        let b = generate_trace(&spec, 42, 300).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let longer = generate_trace(&spec, 42, 600).unwrap();
        assert_eq!(&longer.sequences[..300], &a.sequences[..]);
        let other = generate_trace(&spec, 43, 300).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad_mean = DistributionSpec::lognormal(0.7, 0.0);
        assert!(matches!(
            generate_trace(&bad_mean, 1, 1),
            Err(Error::Parameter(_))
        ));
        let empty = DistributionSpec {
            distribution: LengthDistribution::Mixture { components: vec![] },
            min_length: 1,
            max_length: 10,
        };
        assert!(matches!(
            generate_trace(&empty, 1, 1),
            Err(Error::Parameter(_))
        ));
        let bounds = DistributionSpec::lognormal(0.7, 100.0).with_bounds(10, 5);
        assert!(bounds.validate().is_err());
        let ok = DistributionSpec::lognormal(0.7, 100.0);
        assert!(matches!(
            generate_trace(&ok, 1, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn trace_files_load_and_reject_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.jsonl");
        fs::write(&good, "{\"id\":0,\"len\":8192}\n{\"id\":1,\"len\":1024}\n").unwrap();
        let trace = load_trace(&good).unwrap();
        assert_eq!(
            trace.sequences,
            vec![Sequence::new(0, 8192), Sequence::new(1, 1024)]
        );

        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(load_trace(&empty).unwrap().is_empty());

        let zero = dir.path().join("zero.jsonl");
        fs::write(&zero, "{\"id\":0,\"len\":5}\n{\"id\":1,\"len\":0}\n").unwrap();
        match load_trace(&zero) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }

        let dup = dir.path().join("dup.jsonl");
        fs::write(&dup, "{\"id\":3,\"len\":5}\n\n{\"id\":3,\"len\":6}\n").unwrap();
        match load_trace(&dup) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }

        let garbage = dir.path().join("garbage.jsonl");
        fs::write(&garbage, "{\"id\":0,\"length\":5}\n").unwrap();
        assert!(matches!(
            load_trace(&garbage),
            Err(Error::Format { line: 1, .. })
        ));
    }

    #[test]
    fn first_fit_batching() {
        let k32 = 32 * 1024;
        let trace = SequenceTrace::from_lengths([k32, k32, k32]).unwrap();
        let batches = build_batches(&trace, 2, k32).unwrap();
        let ids: Vec<Vec<u64>> = batches
            .iter()
            .map(|b| b.sequences.iter().map(|s| s.id).collect())
            .collect();
        assert_eq!(ids, vec![vec![0, 1], vec![2]]);

        let exact = SequenceTrace::from_lengths([2 * k32]).unwrap();
        assert_eq!(build_batches(&exact, 2, k32).unwrap().len(), 1);

        let too_long = SequenceTrace::from_lengths([65 * 1024]).unwrap();
        assert!(build_batches(&too_long, 2, k32)
            .unwrap_err()
            .is_infeasible());
    }
}
