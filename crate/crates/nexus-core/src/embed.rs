//! Frozen domain embeddings.
//!
//! Each routed expert is tied to a domain, and the projection router consumes
//! one fixed vector per domain. Two ways to produce that vector:
//!
//! * `seed_mean`: mean-pool the seed model's token-embedding rows over a
//!   sample of the domain's documents, then L2-normalize. Width equals the
//!   seed model's hidden size.
//! * `hashed_ngram`: count byte 1- to 3-grams, hash them into `m` buckets,
//!   L2-normalize the counts. Needs no model at all.
//!
//! Both are deterministic for a given corpus and seed. Vectors are stored as
//! f64 JSON and cast to the working precision when a router is built.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::{tokenize, DomainCorpus};
use crate::error::{Error, Result};
use crate::model::DenseModelState;
use crate::tensor::{Scalar, Tensor};

/// Documents sampled per domain when mean-pooling model embeddings.
pub const SEED_MEAN_MAX_DOCS: usize = 512;
/// Default bucket count for the hashed n-gram method.
pub const DEFAULT_NGRAM_BUCKETS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMethod {
    SeedMean,
    HashedNgram,
}

impl std::fmt::Display for EmbedMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbedMethod::SeedMean => write!(f, "seed_mean"),
            EmbedMethod::HashedNgram => write!(f, "hashed_ngram"),
        }
    }
}

/// One frozen domain vector plus enough metadata to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEmbedding {
    pub domain_id: String,
    pub method: EmbedMethod,
    pub m: usize,
    pub vector: Vec<f64>,
    pub sample_count: usize,
    pub seed: u64,
}

fn l2_normalize(v: &mut [f64], domain: &str) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::EmptyCorpus(format!(
            "domain '{domain}' produced a degenerate embedding"
        )));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

/// Mean-pools the model's token-embedding rows over up to
/// [`SEED_MEAN_MAX_DOCS`] documents (sampled without replacement when the
/// corpus is larger), then L2-normalizes. The result has width `d_model`.
pub fn embed_seed_mean<T: Scalar>(
    model: &DenseModelState<T>,
    corpus: &DomainCorpus,
    seed: u64,
) -> Result<DomainEmbedding> {
    if corpus.docs.is_empty() {
        return Err(Error::EmptyCorpus(corpus.domain_id.clone()));
    }
    let d = model.config.d_model;
    let mut picked: Vec<usize> = (0..corpus.docs.len()).collect();
    if picked.len() > SEED_MEAN_MAX_DOCS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        picked.shuffle(&mut rng);
        picked.truncate(SEED_MEAN_MAX_DOCS);
        picked.sort_unstable(); // document order, not draw order
    }
    let mut sum = vec![0.0f64; d];
    let mut count = 0usize;
    for &i in &picked {
        for tok in tokenize(&corpus.docs[i]) {
            let row = tok as usize * d;
            for (s, e) in sum.iter_mut().zip(&model.embedding.data()[row..row + d]) {
                *s += e.to_f64();
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyCorpus(format!(
            "domain '{}' has only empty documents",
            corpus.domain_id
        )));
    }
    for s in sum.iter_mut() {
        *s /= count as f64;
    }
    l2_normalize(&mut sum, &corpus.domain_id)?;
    Ok(DomainEmbedding {
        domain_id: corpus.domain_id.clone(),
        method: EmbedMethod::SeedMean,
        m: d,
        vector: sum,
        sample_count: picked.len(),
        seed,
    })
}

use crate::data::synth::fnv1a;

/// Counts byte 1-, 2-, and 3-grams hashed into `m` buckets, L2-normalized.
/// Model-free and cheap; disjoint character sets land in (mostly) disjoint
/// buckets, so unrelated domains come out near-orthogonal.
pub fn embed_hashed_ngram(corpus: &DomainCorpus, m: usize) -> Result<DomainEmbedding> {
    if corpus.docs.is_empty() {
        return Err(Error::EmptyCorpus(corpus.domain_id.clone()));
    }
    if m == 0 {
        return Err(Error::invalid("hashed_ngram: bucket count must be positive"));
    }
    let mut counts = vec![0.0f64; m];
    for doc in &corpus.docs {
        let bytes = doc.as_bytes();
        for n in 1..=3usize {
            if bytes.len() < n {
                continue;
            }
            for gram in bytes.windows(n) {
                counts[(fnv1a(gram) % m as u64) as usize] += 1.0;
            }
        }
    }
    l2_normalize(&mut counts, &corpus.domain_id)?;
    Ok(DomainEmbedding {
        domain_id: corpus.domain_id.clone(),
        method: EmbedMethod::HashedNgram,
        m,
        vector: counts,
        sample_count: corpus.docs.len(),
        seed: 0,
    })
}

/// Stacks embeddings into an `[n, m]` matrix in the given order. All entries
/// must agree on method and width, and domains must be unique.
pub fn embedding_matrix<T: Scalar>(embeds: &[DomainEmbedding]) -> Result<Tensor<T>> {
    if embeds.is_empty() {
        return Err(Error::invalid("embedding_matrix: no embeddings given"));
    }
    let m = embeds[0].m;
    let method = embeds[0].method;
    let mut seen = std::collections::HashSet::new();
    for e in embeds {
        if e.m != m || e.method != method {
            return Err(Error::ConfigMismatch {
                fields: vec![format!(
                    "embedding '{}' is {} with m={}, expected {} with m={}",
                    e.domain_id, e.method, e.m, method, m
                )],
            });
        }
        if e.vector.len() != m {
            return Err(Error::invalid(format!(
                "embedding '{}' vector length {} does not match m={}",
                e.domain_id,
                e.vector.len(),
                m
            )));
        }
        if !seen.insert(e.domain_id.as_str()) {
            return Err(Error::DuplicateDomain(e.domain_id.clone()));
        }
    }
    let data: Vec<T> = embeds
        .iter()
        .flat_map(|e| e.vector.iter().map(|&v| T::from_f64(v)))
        .collect();
    Tensor::from_vec(vec![embeds.len(), m], data)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn write_embeddings(path: &Path, embeds: &[DomainEmbedding]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), embeds)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<DomainEmbedding>> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn corpus(id: &str, docs: &[&str]) -> DomainCorpus {
        DomainCorpus {
            domain_id: id.into(),
            docs: docs.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Synthetic docs over one charset; `n` docs of `len` pseudo-random chars.
    fn charset_docs(chars: &[u8], n: usize, len: usize, salt: u64) -> Vec<String> {
        (0..n)
            .map(|i| {
                (0..len)
                    .map(|j| {
                        let h = fnv1a(&[salt as u8, i as u8, j as u8, (j / 7) as u8]);
                        chars[(h % chars.len() as u64) as usize] as char
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn identical_corpora_embed_identically() {
        let docs = charset_docs(b"abcdef", 20, 60, 1);
        let refs: Vec<&str> = docs.iter().map(|s| s.as_str()).collect();
        let a = embed_hashed_ngram(&corpus("a", &refs), 64).unwrap();
        let b = embed_hashed_ngram(&corpus("b", &refs), 64).unwrap();
        assert_eq!(a.vector, b.vector);
        assert!((cosine(&a.vector, &b.vector) - 1.0).abs() < 1e-12);

        let cfg = ModelConfig::toy();
        let model: DenseModelState<f64> = DenseModelState::init(cfg.clone(), 7).unwrap();
        let sa = embed_seed_mean(&model, &corpus("a", &refs), 3).unwrap();
        let sb = embed_seed_mean(&model, &corpus("b", &refs), 3).unwrap();
        assert_eq!(sa.vector, sb.vector);
        assert_eq!(sa.m, cfg.d_model);
    }

    /// Bucket set actually touched by a corpus under the hashing scheme.
    fn bucket_set(docs: &[&str], m: usize) -> std::collections::HashSet<usize> {
        let mut set = std::collections::HashSet::new();
        for doc in docs {
            let bytes = doc.as_bytes();
            for n in 1..=3usize {
                for gram in bytes.windows(n) {
                    set.insert((fnv1a(gram) % m as u64) as usize);
                }
            }
        }
        set
    }

    #[test]
    fn disjoint_vocab_without_collisions_is_orthogonal() {
        // small n-gram inventories so the two bucket sets can be verified
        // disjoint; with no shared bucket the cosine is exactly zero
        let d1 = charset_docs(b"ab", 10, 40, 2);
        let d2 = charset_docs(b"45", 10, 40, 3);
        let r1: Vec<&str> = d1.iter().map(|s| s.as_str()).collect();
        let r2: Vec<&str> = d2.iter().map(|s| s.as_str()).collect();
        let m = DEFAULT_NGRAM_BUCKETS;
        let (s1, s2) = (bucket_set(&r1, m), bucket_set(&r2, m));
        assert!(s1.is_disjoint(&s2), "constructed corpora collided; widen m");
        let a = embed_hashed_ngram(&corpus("alpha", &r1), m).unwrap();
        let b = embed_hashed_ngram(&corpus("digit", &r2), m).unwrap();
        let c = cosine(&a.vector, &b.vector);
        assert!(c.abs() < 0.1, "cosine {c}");
        assert_eq!(c, 0.0);
    }

    /// Deterministic word-level docs: every doc is `words_per_doc` uniform
    /// draws from `words`, joined by spaces.
    fn word_docs(words: &[String], n_docs: usize, words_per_doc: usize, salt: u64) -> Vec<String> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(salt);
        (0..n_docs)
            .map(|_| {
                (0..words_per_doc)
                    .map(|_| words[rng.random_range(0..words.len())].as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }

    fn make_words(charset: &[u8], count: usize, salt: u64) -> Vec<String> {
        (0..count)
            .map(|i| {
                (0..4)
                    .map(|j| {
                        let h = fnv1a(&[salt as u8, i as u8, j as u8, 0x5a]);
                        charset[(h % charset.len() as u64) as usize] as char
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn similarity_grows_with_vocab_overlap() {
        // domains sharing a fraction rho of their word vocabulary embed
        // monotonically closer as rho rises through 0, 1/2, 1
        let base_words = make_words(b"abcdefgh", 40, 10);
        let other_words = make_words(b"12345678", 40, 11);
        let reference = word_docs(&base_words, 200, 30, 12);
        let refs: Vec<&str> = reference.iter().map(|s| s.as_str()).collect();
        let e_ref = embed_hashed_ngram(&corpus("ref", &refs), 128).unwrap();

        let mut sims = Vec::new();
        for rho in [0.0, 0.5, 1.0] {
            let shared = (40.0 * rho) as usize;
            let vocab: Vec<String> = base_words[..shared]
                .iter()
                .chain(other_words[..40 - shared].iter())
                .cloned()
                .collect();
            let docs = word_docs(&vocab, 200, 30, 13);
            let drefs: Vec<&str> = docs.iter().map(|s| s.as_str()).collect();
            let e = embed_hashed_ngram(&corpus("mix", &drefs), 128).unwrap();
            sims.push(cosine(&e.vector, &e_ref.vector));
        }
        assert!(sims[1] > sims[0] + 0.05, "{sims:?}");
        assert!(sims[2] > sims[1] + 0.05, "{sims:?}");
        assert!(sims[2] > 0.8, "{sims:?}");
    }

    #[test]
    fn seed_mean_caps_the_document_sample() {
        let many: Vec<String> = (0..600).map(|i| format!("doc number {i} text")).collect();
        let refs: Vec<&str> = many.iter().map(|s| s.as_str()).collect();
        let cfg = ModelConfig::toy();
        let model: DenseModelState<f32> = DenseModelState::init(cfg, 8).unwrap();
        let e = embed_seed_mean(&model, &corpus("big", &refs), 11).unwrap();
        assert_eq!(e.sample_count, SEED_MEAN_MAX_DOCS);
        // unit norm
        let n: f64 = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matrix_rejects_mixed_widths_and_duplicates() {
        let docs = charset_docs(b"xyz", 5, 30, 6);
        let refs: Vec<&str> = docs.iter().map(|s| s.as_str()).collect();
        let a = embed_hashed_ngram(&corpus("a", &refs), 64).unwrap();
        let b = embed_hashed_ngram(&corpus("b", &refs), 32).unwrap();
        assert!(matches!(
            embedding_matrix::<f32>(&[a.clone(), b]),
            Err(Error::ConfigMismatch { .. })
        ));
        assert!(matches!(
            embedding_matrix::<f32>(&[a.clone(), a.clone()]),
            Err(Error::DuplicateDomain(_))
        ));
        let c = embed_hashed_ngram(&corpus("c", &refs), 64).unwrap();
        let m = embedding_matrix::<f32>(&[a, c]).unwrap();
        assert_eq!(m.shape(), &[2, 64]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let docs = charset_docs(b"mnop", 8, 40, 9);
        let refs: Vec<&str> = docs.iter().map(|s| s.as_str()).collect();
        let e = vec![
            embed_hashed_ngram(&corpus("m1", &refs), 64).unwrap(),
            embed_hashed_ngram(&corpus("m2", &refs), 64).unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeds.json");
        write_embeddings(&path, &e).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let c = corpus("none", &[]);
        assert!(matches!(
            embed_hashed_ngram(&c, 64),
            Err(Error::EmptyCorpus(_))
        ));
    }
}
