//! Routing-specialization measurement and embedding-similarity reports.
//!
//! `collect_routing_stats` runs forward passes over held-out windows and
//! aggregates, per domain, the mean routing probability and the top-1
//! dispatch fraction of every expert in every block, plus cross-block
//! averages. `similarity_report` compares the frozen domain embeddings with
//! the expert embeddings they project to. Both have tabular exports whose
//! values survive a round trip (CSV via shortest-round-trip floats, JSON via
//! exact f64 parsing).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::synth::fnv1a;
use crate::data::CorpusSet;
use crate::error::{Error, Result};
use crate::moe::{project_domains, MoEModelState, Router};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_SAMPLES_PER_DOMAIN: usize = 512;
/// Sequences per forward chunk while collecting stats.
const COLLECT_CHUNK: usize = 16;

pub const ROUTING_CSV_HEADER: [&str; 5] =
    ["domain", "block", "expert", "mean_prob", "dispatch_frac"];

/// Conventional file name for a tagged routing-stats table.
pub fn routing_stats_file_name(tag: &str) -> String {
    format!("routing_stats_{tag}.csv")
}

/// Conventional file name for a per-block similarity report.
pub fn similarity_file_name(block: usize) -> String {
    format!("similarity_{block}.json")
}

/// Per-domain routing aggregates; inner vectors are `[block][expert]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRouting {
    /// Mean routing probability over the domain's tokens.
    pub mean_prob: Vec<Vec<f64>>,
    /// Fraction of the domain's tokens whose top-1 expert is this expert.
    pub dispatch_frac: Vec<Vec<f64>>,
    pub sample_count: usize,
    pub token_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub n_blocks: usize,
    pub n_experts: usize,
    pub domains: BTreeMap<String, DomainRouting>,
}

impl RoutingStats {
    /// Unweighted mean probability per expert across blocks.
    pub fn cross_block_mean_prob(&self, domain: &str) -> Option<Vec<f64>> {
        self.domains.get(domain).map(|d| mean_over_blocks(&d.mean_prob))
    }

    /// Unweighted dispatch fraction per expert across blocks.
    pub fn cross_block_dispatch(&self, domain: &str) -> Option<Vec<f64>> {
        self.domains
            .get(domain)
            .map(|d| mean_over_blocks(&d.dispatch_frac))
    }

    /// Expert with the highest cross-block mean routing probability.
    pub fn argmax_expert(&self, domain: &str) -> Option<usize> {
        let means = self.cross_block_mean_prob(domain)?;
        means
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
    }

    /// Expert receiving the most tokens across blocks: the argmax of the
    /// cross-block dispatch fraction. This is what routing plots report;
    /// it can differ from [`argmax_expert`](Self::argmax_expert) when
    /// probabilities stay soft but selections are consistent.
    pub fn argmax_dispatch(&self, domain: &str) -> Option<usize> {
        let fracs = self.cross_block_dispatch(domain)?;
        fracs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite fractions"))
            .map(|(i, _)| i)
    }

    /// Probabilities sum to 1 (loose) and dispatch fractions to 1 (tight)
    /// over experts, per domain and block.
    pub fn validate(&self) -> Result<()> {
        for (name, d) in &self.domains {
            if d.mean_prob.len() != self.n_blocks || d.dispatch_frac.len() != self.n_blocks {
                return Err(Error::invalid(format!(
                    "routing stats for {name:?} do not cover {} blocks",
                    self.n_blocks
                )));
            }
            for b in 0..self.n_blocks {
                let ps: f64 = d.mean_prob[b].iter().sum();
                let fs: f64 = d.dispatch_frac[b].iter().sum();
                if (ps - 1.0).abs() > 1e-5 {
                    return Err(Error::invalid(format!(
                        "{name:?} block {b}: mean probabilities sum to {ps}"
                    )));
                }
                if (fs - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "{name:?} block {b}: dispatch fractions sum to {fs}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Token-count-weighted union of two disjoint sample sets. Equals the
    /// stats of the pooled samples by linearity of averaging.
    pub fn merge(&self, other: &RoutingStats) -> Result<RoutingStats> {
        if self.n_blocks != other.n_blocks || self.n_experts != other.n_experts {
            return Err(Error::invalid(format!(
                "cannot merge stats shaped {}x{} with {}x{}",
                self.n_blocks, self.n_experts, other.n_blocks, other.n_experts
            )));
        }
        let mut domains = self.domains.clone();
        for (name, d2) in &other.domains {
            match domains.get_mut(name) {
                None => {
                    domains.insert(name.clone(), d2.clone());
                }
                Some(d1) => {
                    let (w1, w2) = (d1.token_count as f64, d2.token_count as f64);
                    let total = w1 + w2;
                    if total == 0.0 {
                        return Err(Error::invalid(format!(
                            "merge of {name:?} has zero total tokens"
                        )));
                    }
                    for b in 0..self.n_blocks {
                        for e in 0..self.n_experts {
                            d1.mean_prob[b][e] =
                                (w1 * d1.mean_prob[b][e] + w2 * d2.mean_prob[b][e]) / total;
                            d1.dispatch_frac[b][e] =
                                (w1 * d1.dispatch_frac[b][e] + w2 * d2.dispatch_frac[b][e]) / total;
                        }
                    }
                    d1.sample_count += d2.sample_count;
                    d1.token_count += d2.token_count;
                }
            }
        }
        Ok(RoutingStats {
            n_blocks: self.n_blocks,
            n_experts: self.n_experts,
            domains,
        })
    }
}

fn mean_over_blocks(per_block: &[Vec<f64>]) -> Vec<f64> {
    let n_blocks = per_block.len();
    let n_experts = per_block.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n_experts];
    for block in per_block {
        for (o, v) in out.iter_mut().zip(block) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n_blocks as f64;
    }
    out
}

/// Draws `samples_per_domain` windows of `seq` tokens from each domain and
/// aggregates routing over them. Window draws use one stream per domain
/// (seeded from `seed` and the domain name), so results do not depend on
/// domain iteration order. Pure measurement: the model is never mutated.
pub fn collect_routing_stats<T: Scalar>(
    moe: &MoEModelState<T>,
    corpora: &CorpusSet,
    seq: usize,
    samples_per_domain: usize,
    seed: u64,
) -> Result<RoutingStats> {
    if samples_per_domain == 0 || seq == 0 {
        return Err(Error::invalid("need at least one window of at least one token"));
    }
    let mut windows: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
    for corpus in &corpora.domains {
        let stream = corpus.token_stream();
        if stream.len() < seq {
            return Err(Error::EmptyCorpus(corpus.domain_id.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(corpus.domain_id.as_bytes()));
        let ws = (0..samples_per_domain)
            .map(|_| {
                let start = rng.random_range(0..=stream.len() - seq);
                stream[start..start + seq].to_vec()
            })
            .collect();
        windows.insert(corpus.domain_id.clone(), ws);
    }
    collect_routing_stats_on(moe, &windows)
}

/// Lower-level entry point over explicit windows (all of one length).
pub fn collect_routing_stats_on<T: Scalar>(
    moe: &MoEModelState<T>,
    windows: &BTreeMap<String, Vec<Vec<u32>>>,
) -> Result<RoutingStats> {
    let n_blocks = moe.config.n_layers;
    let n = moe.n_experts();
    let k = moe.k();
    let mut domains = BTreeMap::new();
    for (name, ws) in windows {
        if ws.is_empty() {
            return Err(Error::EmptyCorpus(name.clone()));
        }
        let seq = ws[0].len();
        if seq == 0 || ws.iter().any(|w| w.len() != seq) {
            return Err(Error::invalid(format!(
                "windows for {name:?} must share one non-zero length"
            )));
        }
        let mut prob_sums = vec![vec![0.0f64; n]; n_blocks];
        let mut top1_counts = vec![vec![0usize; n]; n_blocks];
        let mut tokens_seen = 0usize;
        for chunk in ws.chunks(COLLECT_CHUNK) {
            let mut tokens = Vec::with_capacity(chunk.len() * seq);
            for w in chunk {
                tokens.extend_from_slice(w);
            }
            let (_, decisions) = moe.forward_routed(&tokens, chunk.len(), seq)?;
            debug_assert_eq!(decisions.len(), n_blocks);
            for (b, decision) in decisions.iter().enumerate() {
                for (t, row) in decision.probs.data().chunks_exact(n).enumerate() {
                    for (s, &p) in prob_sums[b].iter_mut().zip(row) {
                        *s += p.to_f64();
                    }
                    top1_counts[b][decision.top_indices[t * k] as usize] += 1;
                }
            }
            tokens_seen += chunk.len() * seq;
        }
        let scale = (ws.len() * seq) as f64;
        domains.insert(
            name.clone(),
            DomainRouting {
                mean_prob: prob_sums
                    .iter()
                    .map(|block| block.iter().map(|s| s / scale).collect())
                    .collect(),
                dispatch_frac: top1_counts
                    .iter()
                    .map(|block| block.iter().map(|&c| c as f64 / scale).collect())
                    .collect(),
                sample_count: ws.len(),
                token_count: tokens_seen,
            },
        );
    }
    let stats = RoutingStats {
        n_blocks,
        n_experts: n,
        domains,
    };
    stats.validate()?;
    Ok(stats)
}

// ---- tabular export ----

/// Writes `domain,block,expert,mean_prob,dispatch_frac` rows; floats use the
/// shortest representation that parses back to the same bits.
pub fn write_routing_csv(stats: &RoutingStats, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ROUTING_CSV_HEADER)?;
    for (name, d) in &stats.domains {
        for b in 0..stats.n_blocks {
            for e in 0..stats.n_experts {
                w.write_record([
                    name.as_str(),
                    &b.to_string(),
                    &e.to_string(),
                    &format!("{:?}", d.mean_prob[b][e]),
                    &format!("{:?}", d.dispatch_frac[b][e]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a routing table back. Sample and token counts are not part of the
/// tabular schema and come back as zero.
pub fn read_routing_csv(path: &Path) -> Result<RoutingStats> {
    let mut r = csv::Reader::from_path(path)?;
    {
        let headers = r.headers()?;
        if headers != ROUTING_CSV_HEADER.as_slice() {
            return Err(Error::invalid(format!("unexpected CSV header {headers:?}")));
        }
    }
    let mut rows: Vec<(String, usize, usize, f64, f64)> = Vec::new();
    let mut n_blocks = 0usize;
    let mut n_experts = 0usize;
    for rec in r.records() {
        let rec = rec?;
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad index {s:?} in routing CSV")))
        };
        let parse_f64 = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad float {s:?} in routing CSV")))
        };
        let b = parse_usize(&rec[1])?;
        let e = parse_usize(&rec[2])?;
        n_blocks = n_blocks.max(b + 1);
        n_experts = n_experts.max(e + 1);
        rows.push((rec[0].to_string(), b, e, parse_f64(&rec[3])?, parse_f64(&rec[4])?));
    }
    let mut domains: BTreeMap<String, DomainRouting> = BTreeMap::new();
    for (name, b, e, p, f) in rows {
        let d = domains.entry(name).or_insert_with(|| DomainRouting {
            mean_prob: vec![vec![f64::NAN; n_experts]; n_blocks],
            dispatch_frac: vec![vec![f64::NAN; n_experts]; n_blocks],
            sample_count: 0,
            token_count: 0,
        });
        d.mean_prob[b][e] = p;
        d.dispatch_frac[b][e] = f;
    }
    for (name, d) in &domains {
        if d.mean_prob.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::invalid(format!(
                "routing CSV leaves holes in the grid for domain {name:?}"
            )));
        }
    }
    Ok(RoutingStats {
        n_blocks,
        n_experts,
        domains,
    })
}

pub fn write_routing_json(stats: &RoutingStats, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(stats)?)?;
    Ok(())
}

pub fn read_routing_json(path: &Path) -> Result<RoutingStats> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

// ---- embedding similarity ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub block: usize,
    /// Domain names in expert order (row/column order of both matrices).
    pub domains: Vec<String>,
    /// Cosines between frozen domain embeddings.
    pub domain_cosine: Vec<Vec<f64>>,
    /// Cosines between the expert embeddings projected at `block`.
    pub expert_cosine: Vec<Vec<f64>>,
    /// Spearman correlation between the two upper triangles; descriptive
    /// output, not a checked invariant. 0.0 when undefined (under 2 pairs or
    /// zero rank variance).
    pub rank_correlation: f64,
}

/// Compares domain-domain and expert-expert cosine structure at one block
/// (default: the last). Only the domain-projection router has the embeddings
/// this report is about.
pub fn similarity_report<T: Scalar>(
    moe: &MoEModelState<T>,
    block: Option<usize>,
) -> Result<SimilarityReport> {
    let b = block.unwrap_or(moe.config.n_layers - 1);
    if b >= moe.blocks.len() {
        return Err(Error::invalid(format!(
            "block {b} out of range for {} blocks",
            moe.blocks.len()
        )));
    }
    let Router::DomainProjection(state) = &moe.blocks[b].moe.router else {
        return Err(Error::UnsupportedRouter(
            "similarity reports need the domain-projection router".into(),
        ));
    };
    let expert_embeddings = project_domains(state)?;
    let domain_cosine = cosine_matrix(&state.domain_embeddings)?;
    let expert_cosine = cosine_matrix(&expert_embeddings)?;
    let rank_correlation = spearman(
        &upper_triangle(&domain_cosine),
        &upper_triangle(&expert_cosine),
    );
    Ok(SimilarityReport {
        block: b,
        domains: moe.expert_domains.clone(),
        domain_cosine,
        expert_cosine,
        rank_correlation,
    })
}

pub fn write_similarity_json(report: &SimilarityReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn read_similarity_json(path: &Path) -> Result<SimilarityReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Row-by-row cosine matrix; exactly symmetric because dot products and norm
/// products are computed in one order per unordered pair.
fn cosine_matrix<T: Scalar>(rows: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    if rows.rank() != 2 {
        return Err(Error::invalid(format!(
            "cosine matrix needs a 2-D input, got shape {:?}",
            rows.shape()
        )));
    }
    let (n, m) = (rows.shape()[0], rows.shape()[1]);
    let data = rows.data();
    let row = |i: usize| -> Vec<f64> { data[i * m..(i + 1) * m].iter().map(|v| v.to_f64()).collect() };
    let rows_f64: Vec<Vec<f64>> = (0..n).map(row).collect();
    let norms: Vec<f64> = rows_f64
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::invalid(format!(
            "row {i} has zero or non-finite norm; cosines are undefined"
        )));
    }
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = rows_f64[i].iter().zip(&rows_f64[j]).map(|(a, b)| a * b).sum();
            let c = dot / (norms[i] * norms[j]);
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    Ok(out)
}

fn upper_triangle(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(m[i][j]);
        }
    }
    out
}

/// Spearman rank correlation with average ranks for ties; 0.0 when
/// undefined.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.len() < 2 {
        return 0.0;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // tied run [i, j] shares the mean of its 1-based positions
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DomainCorpus;
    use crate::model::{DenseModelState, ModelConfig};
    use crate::moe::RouterKind;
    use crate::upcycle::{upcycle, DomainExpert, UpcycleOptions};
    use rand::SeedableRng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 12,
            vocab_size: 259,
            max_seq_len: 32,
        }
    }

    fn toy_moe(router: RouterKind, n: usize, seed: u64) -> MoEModelState<f64> {
        let seed_model = DenseModelState::init(toy_config(), seed).unwrap();
        let experts: Vec<DomainExpert<f64>> = (0..n)
            .map(|i| DomainExpert {
                domain: format!("dom{i}"),
                model: DenseModelState::init(toy_config(), seed + 1 + i as u64).unwrap(),
            })
            .collect();
        let domain_matrix = match router {
            RouterKind::DomainProjection => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
                Some(Tensor::randn(vec![n, 6], 1.0, &mut rng))
            }
            RouterKind::Linear => None,
        };
        upcycle(
            &seed_model,
            &experts,
            &UpcycleOptions {
                router,
                domain_matrix,
                ..UpcycleOptions::default()
            },
        )
        .unwrap()
    }

    fn toy_corpora(n: usize) -> CorpusSet {
        let domains = (0..n)
            .map(|i| {
                let word = ["alpha", "bravo", "carbon", "delta", "ember"][i % 5];
                let docs = (0..40).map(|k| format!("{word} {k} {word} {word}")).collect();
                DomainCorpus::new(format!("dom{i}"), docs)
            })
            .collect();
        CorpusSet::new(domains)
    }

    #[test]
    fn zeroed_routers_give_uniform_probabilities() {
        for router in [RouterKind::Linear, RouterKind::DomainProjection] {
            let mut moe = toy_moe(router, 4, 3);
            for b in &mut moe.blocks {
                match &mut b.moe.router {
                    Router::Linear(r) => r.weight = Tensor::zeros(r.weight.shape().to_vec()),
                    Router::DomainProjection(r) => {
                        r.proj_out = Tensor::zeros(r.proj_out.shape().to_vec());
                        r.cached_expert_embeddings = None;
                    }
                }
            }
            let stats = collect_routing_stats(&moe, &toy_corpora(4), 16, 8, 5).unwrap();
            for d in stats.domains.values() {
                for block in &d.mean_prob {
                    for &p in block {
                        assert!((p - 0.25).abs() <= 1e-6, "{router:?}: {p}");
                    }
                }
            }
        }
    }

    #[test]
    fn probability_and_dispatch_sums_hold() {
        let moe = toy_moe(RouterKind::DomainProjection, 4, 7);
        let stats = collect_routing_stats(&moe, &toy_corpora(4), 16, 8, 11).unwrap();
        stats.validate().unwrap();
        assert_eq!(stats.domains.len(), 4);
        for d in stats.domains.values() {
            assert_eq!(d.sample_count, 8);
            assert_eq!(d.token_count, 8 * 16);
        }
    }

    #[test]
    fn union_of_disjoint_samples_is_the_weighted_mean() {
        let moe = toy_moe(RouterKind::DomainProjection, 3, 13);
        let corpora = toy_corpora(3);
        let mut all: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for c in &corpora.domains {
            let stream = c.token_stream();
            let ws: Vec<Vec<u32>> = (0..12)
                .map(|_| {
                    let start = rng.random_range(0..=stream.len() - 16);
                    stream[start..start + 16].to_vec()
                })
                .collect();
            all.insert(c.domain_id.clone(), ws);
        }
        let first: BTreeMap<String, Vec<Vec<u32>>> = all
            .iter()
            .map(|(k, v)| (k.clone(), v[..4].to_vec()))
            .collect();
        let rest: BTreeMap<String, Vec<Vec<u32>>> = all
            .iter()
            .map(|(k, v)| (k.clone(), v[4..].to_vec()))
            .collect();
        let pooled = collect_routing_stats_on(&moe, &all).unwrap();
        let merged = collect_routing_stats_on(&moe, &first)
            .unwrap()
            .merge(&collect_routing_stats_on(&moe, &rest).unwrap())
            .unwrap();
        for (name, d) in &pooled.domains {
            let m = &merged.domains[name];
            assert_eq!(m.sample_count, d.sample_count);
            assert_eq!(m.token_count, d.token_count);
            for b in 0..pooled.n_blocks {
                for e in 0..pooled.n_experts {
                    assert!((m.mean_prob[b][e] - d.mean_prob[b][e]).abs() <= 1e-9);
                    assert!((m.dispatch_frac[b][e] - d.dispatch_frac[b][e]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn collection_is_deterministic_and_read_only() {
        let moe = toy_moe(RouterKind::DomainProjection, 3, 17);
        let before = moe.clone();
        let corpora = toy_corpora(3);
        let s1 = collect_routing_stats(&moe, &corpora, 16, 6, 21).unwrap();
        let s2 = collect_routing_stats(&moe, &corpora, 16, 6, 21).unwrap();
        assert_eq!(s1, s2);
        let s3 = collect_routing_stats(&moe, &corpora, 16, 6, 22).unwrap();
        assert_ne!(s1, s3, "different seeds should sample different windows");
        assert_eq!(moe, before);
    }

    #[test]
    fn csv_round_trip_and_shape() {
        let moe = toy_moe(RouterKind::DomainProjection, 4, 23);
        let stats = collect_routing_stats(&moe, &toy_corpora(4), 16, 4, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(routing_stats_file_name("test"));
        write_routing_csv(&stats, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "domain,block,expert,mean_prob,dispatch_frac");
        assert_eq!(lines.count(), 4 * 2 * 4, "4 domains x 2 blocks x 4 experts");
        let back = read_routing_csv(&path).unwrap();
        assert_eq!(back.n_blocks, stats.n_blocks);
        assert_eq!(back.n_experts, stats.n_experts);
        for (name, d) in &stats.domains {
            let r = &back.domains[name];
            for b in 0..stats.n_blocks {
                for e in 0..stats.n_experts {
                    assert!((r.mean_prob[b][e] - d.mean_prob[b][e]).abs() <= 1e-9);
                    assert!((r.dispatch_frac[b][e] - d.dispatch_frac[b][e]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn empty_stats_write_a_header_only_csv() {
        let stats = RoutingStats {
            n_blocks: 0,
            n_experts: 0,
            domains: BTreeMap::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_routing_csv(&stats, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), "domain,block,expert,mean_prob,dispatch_frac");
    }

    #[test]
    fn json_round_trip_is_exact() {
        let moe = toy_moe(RouterKind::DomainProjection, 3, 29);
        let stats = collect_routing_stats(&moe, &toy_corpora(3), 16, 4, 31).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        write_routing_json(&stats, &path).unwrap();
        assert_eq!(read_routing_json(&path).unwrap(), stats);
    }

    #[test]
    fn short_streams_are_an_error() {
        let moe = toy_moe(RouterKind::DomainProjection, 3, 43);
        let mut corpora = toy_corpora(3);
        corpora.domains[1] = DomainCorpus::new("dom1", vec!["x".into()]);
        let err = collect_routing_stats(&moe, &corpora, 16, 4, 1).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus(d) if d == "dom1"));
    }

    #[test]
    fn similarity_is_symmetric_with_unit_diagonal() {
        let moe = toy_moe(RouterKind::DomainProjection, 4, 37);
        let report = similarity_report(&moe, None).unwrap();
        assert_eq!(report.block, 1, "defaults to the last block");
        assert_eq!(report.domains.len(), 4);
        for m in [&report.domain_cosine, &report.expert_cosine] {
            for i in 0..4 {
                assert!((m[i][i] - 1.0).abs() <= 1e-6);
                for j in 0..4 {
                    assert_eq!(m[i][j], m[j][i], "exact symmetry by construction");
                    assert!(m[i][j].abs() <= 1.0 + 1e-12);
                }
            }
        }
        assert!(report.rank_correlation.abs() <= 1.0 + 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(similarity_file_name(report.block));
        write_similarity_json(&report, &path).unwrap();
        assert_eq!(read_similarity_json(&path).unwrap(), report);
    }

    #[test]
    fn duplicate_domain_embeddings_have_unit_cosine_everywhere() {
        let mut moe = toy_moe(RouterKind::DomainProjection, 3, 41);
        for b in &mut moe.blocks {
            if let Router::DomainProjection(r) = &mut b.moe.router {
                let m = r.domain_embeddings.shape()[1];
                let row0: Vec<f64> = r.domain_embeddings.data()[..m].to_vec();
                r.domain_embeddings.data_mut()[m..2 * m].copy_from_slice(&row0);
                r.cached_expert_embeddings = None;
            }
        }
        let report = similarity_report(&moe, Some(0)).unwrap();
        assert!((report.domain_cosine[0][1] - 1.0).abs() <= 1e-12);
        assert!((report.expert_cosine[0][1] - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn linear_router_has_no_similarity_report() {
        let moe = toy_moe(RouterKind::Linear, 3, 47);
        let err = similarity_report(&moe, None).unwrap_err();
        assert!(matches!(err, Error::UnsupportedRouter(_)));
    }

    #[test]
    fn spearman_handles_order_reversal_and_ties() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 30.0, 40.0];
        let down = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &up) - 1.0).abs() <= 1e-12);
        assert!((spearman(&a, &down) + 1.0).abs() <= 1e-12);
        let tied = [1.0, 1.0, 2.0, 2.0];
        let r = spearman(&a, &tied);
        assert!(r > 0.85 && r <= 1.0, "{r}");
        assert_eq!(spearman(&[1.0], &[2.0]), 0.0);
        assert_eq!(spearman(&a, &[5.0, 5.0, 5.0, 5.0]), 0.0);
    }
}
