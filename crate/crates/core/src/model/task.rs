//! Synthetic per-domain classification tasks.
//!
//! The vocabulary is split into one contiguous slice per domain, and each slice
//! into two halves. A sample with local label `l` draws most of its tokens from
//! half `l` of its domain's slice and the rest uniformly from the whole
//! vocabulary. Global labels are `2 · domain + l`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};

pub const LABELS_PER_DOMAIN: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: u32,
    pub domains: usize,
    pub seq_len: usize,
    pub sample_count: usize,
    /// Probability that a token is drawn uniformly instead of from the label's half.
    pub noise: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            domains: 8,
            seq_len: 12,
            sample_count: 256,
            noise: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub domain_id: usize,
    pub generator_seed: u64,
    pub spec: TaskSpec,
    pub samples: Vec<Sample>,
}

impl SyntheticTask {
    pub fn generate(domain_id: usize, spec: &TaskSpec, seed: u64) -> Result<Self> {
        if domain_id >= spec.domains {
            return Err(GemError::config(
                "task.domain_id",
                format!("{domain_id} >= domains {}", spec.domains),
            ));
        }
        let slice = spec.vocab_size as usize / spec.domains;
        if slice < LABELS_PER_DOMAIN {
            return Err(GemError::config("task.vocab_size", "too small for two tokens per domain half"));
        }
        if spec.seq_len == 0 {
            return Err(GemError::config("task.seq_len", "must be positive"));
        }
        if !(0.0..=1.0).contains(&spec.noise) {
            return Err(GemError::config("task.noise", "must be in [0, 1]"));
        }
        let half = slice / LABELS_PER_DOMAIN;
        let start = domain_id * slice;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(domain_id as u64);
        let samples = (0..spec.sample_count)
            .map(|_| {
                let local = rng.random_range(0..LABELS_PER_DOMAIN);
                let lo = start + local * half;
                let tokens = (0..spec.seq_len)
                    .map(|_| {
                        if rng.random_bool(spec.noise) {
                            rng.random_range(0..spec.vocab_size)
                        } else {
                            rng.random_range(lo..lo + half) as u32
                        }
                    })
                    .collect();
                Sample {
                    tokens,
                    label: domain_id * LABELS_PER_DOMAIN + local,
                }
            })
            .collect();
        Ok(Self {
            domain_id,
            generator_seed: seed,
            spec: spec.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Label set of this task's domain.
    pub fn labels(&self) -> std::ops::Range<usize> {
        let lo = self.domain_id * LABELS_PER_DOMAIN;
        lo..lo + LABELS_PER_DOMAIN
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regenerates_from_seed() {
        let spec = TaskSpec::default();
        let a = SyntheticTask::generate(3, &spec, 11).unwrap();
        let b = SyntheticTask::generate(3, &spec, 11).unwrap();
        assert_eq!(a, b);
        let c = SyntheticTask::generate(3, &spec, 12).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn labels_come_from_the_domain_set() {
        let spec = TaskSpec::default();
        let t = SyntheticTask::generate(5, &spec, 1).unwrap();
        assert_eq!(t.len(), spec.sample_count);
        for s in &t.samples {
            assert!(t.labels().contains(&s.label));
            assert_eq!(s.tokens.len(), spec.seq_len);
            assert!(s.tokens.iter().all(|&x| x < spec.vocab_size));
        }
        // both labels occur
        assert!(t.samples.iter().any(|s| s.label == 10));
        assert!(t.samples.iter().any(|s| s.label == 11));
    }

    #[test]
    fn noiseless_tokens_stay_in_the_label_half() {
        let spec = TaskSpec { noise: 0.0, ..TaskSpec::default() };
        let t = SyntheticTask::generate(1, &spec, 4).unwrap();
        for s in &t.samples {
            let lo = 8 + (s.label - 2) as u32 * 4;
            assert!(s.tokens.iter().all(|&x| (lo..lo + 4).contains(&x)));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = TaskSpec::default();
        assert!(SyntheticTask::generate(8, &spec, 0).is_err());
        let tiny = TaskSpec { vocab_size: 8, ..TaskSpec::default() };
        assert!(SyntheticTask::generate(0, &tiny, 0).is_err());
    }
}
