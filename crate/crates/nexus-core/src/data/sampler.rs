//! Mixture-weighted batch sampling.
//!
//! Each sequence independently draws a domain from the resolved mixture, then
//! a random window from that domain's token stream. Targets are the window
//! shifted by one, so `targets[t] == tokens[t+1]` holds inside every row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CorpusSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureMode {
    /// Weights proportional to each domain's token count.
    Proportional,
    /// Equal weight per listed domain.
    Uniform,
    /// Use the listed weights as-is (renormalized).
    Explicit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub domain: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub mode: MixtureMode,
    pub entries: Vec<MixtureEntry>,
}

impl MixtureSpec {
    pub fn proportional(domains: &[String]) -> Self {
        MixtureSpec {
            mode: MixtureMode::Proportional,
            entries: domains
                .iter()
                .map(|d| MixtureEntry {
                    domain: d.clone(),
                    weight: 1.0,
                })
                .collect(),
        }
    }

    pub fn uniform(domains: &[String]) -> Self {
        MixtureSpec {
            mode: MixtureMode::Uniform,
            entries: domains
                .iter()
                .map(|d| MixtureEntry {
                    domain: d.clone(),
                    weight: 1.0,
                })
                .collect(),
        }
    }

    pub fn explicit(weights: &[(String, f64)]) -> Self {
        MixtureSpec {
            mode: MixtureMode::Explicit,
            entries: weights
                .iter()
                .map(|(d, w)| MixtureEntry {
                    domain: d.clone(),
                    weight: *w,
                })
                .collect(),
        }
    }

    /// Normalized `(domain, weight)` pairs against a corpus set. Unknown
    /// domains, negative/non-finite weights, and all-zero totals are errors.
    pub fn resolve(&self, set: &CorpusSet) -> Result<Vec<(String, f64)>> {
        if self.entries.is_empty() {
            return Err(Error::invalid("mixture has no entries"));
        }
        let mut raw = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let corpus = set
                .get(&e.domain)
                .ok_or_else(|| Error::invalid(format!("mixture names unknown domain {:?}", e.domain)))?;
            if !e.weight.is_finite() || e.weight < 0.0 {
                return Err(Error::invalid(format!(
                    "mixture weight for {:?} must be finite and >= 0, got {}",
                    e.domain, e.weight
                )));
            }
            let w = match self.mode {
                MixtureMode::Proportional => corpus.token_count() as f64,
                MixtureMode::Uniform => 1.0,
                MixtureMode::Explicit => e.weight,
            };
            raw.push((e.domain.clone(), w));
        }
        let total: f64 = raw.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::invalid("mixture weights sum to zero"));
        }
        Ok(raw.into_iter().map(|(d, w)| (d, w / total)).collect())
    }
}

/// One training batch; all buffers are row-major `[batch, seq]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    /// Per-sequence domain of origin.
    pub labels: Vec<String>,
    pub batch: usize,
    pub seq: usize,
}

#[derive(Debug)]
pub struct BatchSampler {
    names: Vec<String>,
    streams: Vec<Vec<u32>>,
    cumulative: Vec<f64>,
    batch: usize,
    seq: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    /// Builds the per-domain token streams up front. Fails here (not during
    /// sampling) if any positive-weight domain cannot fill one window.
    pub fn new(
        set: &CorpusSet,
        mixture: &MixtureSpec,
        batch: usize,
        seq: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch == 0 || seq == 0 {
            return Err(Error::invalid("batch and seq must be positive"));
        }
        let resolved = mixture.resolve(set)?;
        let mut names = Vec::new();
        let mut streams = Vec::new();
        let mut weights = Vec::new();
        for (domain, w) in resolved {
            if w == 0.0 {
                continue;
            }
            let stream = set
                .get(&domain)
                .expect("resolve checked existence")
                .token_stream();
            if stream.len() < seq + 1 {
                return Err(Error::EmptyCorpus(domain));
            }
            names.push(domain);
            streams.push(stream);
            weights.push(w);
        }
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        Ok(BatchSampler {
            names,
            streams,
            cumulative,
            batch,
            seq,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn sample_domain(&mut self) -> usize {
        let x: f64 = self.rng.random();
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&x).unwrap())
        {
            Ok(i) | Err(i) => i.min(self.streams.len() - 1),
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        let (b, s) = (self.batch, self.seq);
        let mut tokens = Vec::with_capacity(b * s);
        let mut targets = Vec::with_capacity(b * s);
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            let d = self.sample_domain();
            let stream = &self.streams[d];
            let start = self.rng.random_range(0..=stream.len() - (s + 1));
            tokens.extend_from_slice(&stream[start..start + s]);
            targets.extend_from_slice(&stream[start + 1..start + s + 1]);
            labels.push(self.names[d].clone());
        }
        Batch {
            tokens,
            targets,
            labels,
            batch: b,
            seq: s,
        }
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Deterministic non-overlapping evaluation windows from one domain stream.
pub fn eval_windows(stream: &[u32], seq: usize, max_windows: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + seq + 1 <= stream.len() && out.len() < max_windows {
        out.push((
            stream[start..start + seq].to_vec(),
            stream[start + 1..start + seq + 1].to_vec(),
        ));
        start += seq + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DomainCorpus;

    fn corpus(id: &str, bytes: usize) -> DomainCorpus {
        let doc = "x".repeat(200);
        let docs = (0..bytes / 200).map(|_| doc.clone()).collect();
        DomainCorpus::new(id, docs)
    }

    fn set4() -> CorpusSet {
        CorpusSet::new(vec![
            corpus("a", 30_000),
            corpus("b", 10_000),
            corpus("c", 10_000),
            corpus("d", 10_000),
        ])
    }

    fn fractions(sampler: &mut BatchSampler, n_batches: usize) -> std::collections::HashMap<String, f64> {
        let mut counts: std::collections::HashMap<String, usize> = Default::default();
        let mut total = 0usize;
        for _ in 0..n_batches {
            let b = sampler.next_batch();
            for l in &b.labels {
                *counts.entry(l.clone()).or_default() += 1;
                total += 1;
            }
        }
        counts
            .into_iter()
            .map(|(k, v)| (k, v as f64 / total as f64))
            .collect()
    }

    #[test]
    fn uniform_mixture_hits_quarter_each_within_two_points() {
        let set = set4();
        let mix = MixtureSpec::uniform(&set.ids());
        let mut s = BatchSampler::new(&set, &mix, 10, 16, 99).unwrap();
        let f = fractions(&mut s, 1000); // 10k sequences
        for id in ["a", "b", "c", "d"] {
            let got = f[id];
            assert!((0.23..=0.27).contains(&got), "{id}: {got}");
        }
    }

    #[test]
    fn proportional_mixture_follows_token_counts() {
        let set = CorpusSet::new(vec![corpus("big", 30_000), corpus("small", 10_000)]);
        let mix = MixtureSpec::proportional(&set.ids());
        let mut s = BatchSampler::new(&set, &mix, 10, 16, 5).unwrap();
        let f = fractions(&mut s, 1000);
        assert!((f["big"] - 0.75).abs() <= 0.02, "{}", f["big"]);
        assert!((f["small"] - 0.25).abs() <= 0.02, "{}", f["small"]);
    }

    #[test]
    fn explicit_degenerate_weight_takes_everything() {
        let set = set4();
        let mix = MixtureSpec::explicit(&[
            ("a".into(), 1.0),
            ("b".into(), 0.0),
        ]);
        let mut s = BatchSampler::new(&set, &mix, 8, 16, 5).unwrap();
        for _ in 0..50 {
            let b = s.next_batch();
            assert!(b.labels.iter().all(|l| l == "a"));
        }
    }

    #[test]
    fn weighted_empty_domain_fails_at_construction() {
        let mut set = set4();
        set.domains.push(DomainCorpus::new("empty", vec![]));
        let mix = MixtureSpec::explicit(&[("empty".into(), 1.0)]);
        let err = BatchSampler::new(&set, &mix, 4, 16, 1).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus(d) if d == "empty"));
    }

    #[test]
    fn unknown_domain_is_rejected() {
        let set = set4();
        let mix = MixtureSpec::uniform(&["nope".to_string()]);
        assert!(BatchSampler::new(&set, &mix, 4, 16, 1).is_err());
    }

    #[test]
    fn targets_are_tokens_shifted_by_one() {
        let set = set4();
        let mix = MixtureSpec::uniform(&set.ids());
        let mut s = BatchSampler::new(&set, &mix, 6, 32, 11).unwrap();
        for _ in 0..20 {
            let b = s.next_batch();
            for row in 0..b.batch {
                let t = &b.tokens[row * b.seq..(row + 1) * b.seq];
                let y = &b.targets[row * b.seq..(row + 1) * b.seq];
                assert_eq!(&t[1..], &y[..b.seq - 1]);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let set = set4();
        let mix = MixtureSpec::uniform(&set.ids());
        let mut s1 = BatchSampler::new(&set, &mix, 4, 16, 7).unwrap();
        let mut s2 = BatchSampler::new(&set, &mix, 4, 16, 7).unwrap();
        for _ in 0..10 {
            let (a, b) = (s1.next_batch(), s2.next_batch());
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn eval_windows_are_disjoint_and_shifted() {
        let stream: Vec<u32> = (0..100).collect();
        let ws = eval_windows(&stream, 9, 100);
        assert_eq!(ws.len(), 10);
        assert_eq!(ws[0].0, (0..9).collect::<Vec<u32>>());
        assert_eq!(ws[0].1, (1..10).collect::<Vec<u32>>());
        assert_eq!(ws[1].0[0], 10);
    }
}
