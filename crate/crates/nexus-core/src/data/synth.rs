//! Synthetic multi-domain corpora.
//!
//! Each domain is a tiny word grammar over its own character set: a fixed
//! word list with Zipf-like frequencies plus per-word successor preferences,
//! so sequences have both unigram signal (for the distinguishability check
//! and hashed embeddings) and local structure (for the language model to
//! learn). Generation is deterministic per `(spec, seed)` and refuses to
//! produce domain sets that a unigram Bayes classifier cannot tell apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CorpusSet, DomainCorpus};
use crate::error::{Error, Result};

/// Reserved id for the mixed pseudo-domain built from all grammars.
pub const GENERAL_DOMAIN: &str = "general";

fn default_word_count() -> usize {
    40
}
fn default_word_len() -> [usize; 2] {
    [2, 6]
}
fn default_sentence_len() -> [usize; 2] {
    [4, 9]
}
fn default_doc_sentences() -> [usize; 2] {
    [3, 8]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainGrammar {
    pub id: String,
    /// Characters words are built from; ignored when `words` is given.
    #[serde(default)]
    pub charset: String,
    /// Explicit word list; overrides `charset` derivation.
    #[serde(default)]
    pub words: Vec<String>,
    #[serde(default = "default_word_count")]
    pub word_count: usize,
    #[serde(default = "default_word_len")]
    pub word_len: [usize; 2],
    #[serde(default = "default_sentence_len")]
    pub sentence_len: [usize; 2],
    #[serde(default = "default_doc_sentences")]
    pub doc_sentences: [usize; 2],
    /// Token (byte) budget for the generated documents.
    pub tokens: usize,
}

impl DomainGrammar {
    pub fn from_charset(id: impl Into<String>, charset: impl Into<String>, tokens: usize) -> Self {
        DomainGrammar {
            id: id.into(),
            charset: charset.into(),
            words: Vec::new(),
            word_count: default_word_count(),
            word_len: default_word_len(),
            sentence_len: default_sentence_len(),
            doc_sentences: default_doc_sentences(),
            tokens,
        }
    }

    pub fn from_words(id: impl Into<String>, words: Vec<String>, tokens: usize) -> Self {
        DomainGrammar {
            id: id.into(),
            charset: String::new(),
            words,
            word_count: default_word_count(),
            word_len: default_word_len(),
            sentence_len: default_sentence_len(),
            doc_sentences: default_doc_sentences(),
            tokens,
        }
    }
}

fn default_min_accuracy() -> f64 {
    0.95
}
fn default_include_general() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub domains: Vec<DomainGrammar>,
    /// Also emit a `general` corpus mixing every grammar.
    #[serde(default = "default_include_general")]
    pub include_general: bool,
    /// Byte budget for the general mix; defaults to the mean domain budget.
    #[serde(default)]
    pub general_tokens: Option<usize>,
    #[serde(default = "default_min_accuracy")]
    pub min_classifier_accuracy: f64,
}

/// FNV-1a, used to give each domain an independent RNG stream per seed.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct WordModel {
    words: Vec<String>,
    /// Zipf-like cumulative distribution over `words`.
    cumulative: Vec<f64>,
    /// Three preferred successors per word, fixed at setup.
    successors: Vec<[usize; 3]>,
    sentence_len: [usize; 2],
    doc_sentences: [usize; 2],
}

impl WordModel {
    fn build(g: &DomainGrammar, rng: &mut ChaCha8Rng) -> Result<Self> {
        let words = if !g.words.is_empty() {
            g.words.clone()
        } else {
            let chars: Vec<char> = g.charset.chars().collect();
            if chars.is_empty() {
                return Err(Error::invalid(format!(
                    "domain {:?} has neither words nor a charset",
                    g.id
                )));
            }
            let mut out: Vec<String> = Vec::with_capacity(g.word_count);
            let mut tries = 0;
            while out.len() < g.word_count && tries < g.word_count * 40 {
                tries += 1;
                let len = rng.random_range(g.word_len[0]..=g.word_len[1]);
                let w: String = (0..len)
                    .map(|_| chars[rng.random_range(0..chars.len())])
                    .collect();
                if !out.contains(&w) {
                    out.push(w);
                }
            }
            out
        };
        if words.is_empty() {
            return Err(Error::invalid(format!("domain {:?} has no words", g.id)));
        }
        let mut cumulative = Vec::with_capacity(words.len());
        let mut acc = 0.0;
        for rank in 0..words.len() {
            acc += 1.0 / (rank as f64 + 1.0);
            cumulative.push(acc);
        }
        for c in cumulative.iter_mut() {
            *c /= acc;
        }
        let successors = (0..words.len())
            .map(|_| {
                [
                    rng.random_range(0..words.len()),
                    rng.random_range(0..words.len()),
                    rng.random_range(0..words.len()),
                ]
            })
            .collect();
        Ok(WordModel {
            words,
            cumulative,
            successors,
            sentence_len: g.sentence_len,
            doc_sentences: g.doc_sentences,
        })
    }

    fn sample_word(&self, prev: Option<usize>, rng: &mut ChaCha8Rng) -> usize {
        if let Some(p) = prev {
            // local structure: mostly follow the fixed successor preferences
            if rng.random::<f64>() < 0.6 {
                return self.successors[p][rng.random_range(0..3)];
            }
        }
        let x: f64 = rng.random();
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&x).unwrap())
        {
            Ok(i) | Err(i) => i.min(self.words.len() - 1),
        }
    }

    fn sample_doc(&self, rng: &mut ChaCha8Rng) -> String {
        let sentences = rng.random_range(self.doc_sentences[0]..=self.doc_sentences[1]);
        let mut doc = String::new();
        for si in 0..sentences {
            if si > 0 {
                doc.push(' ');
            }
            let len = rng.random_range(self.sentence_len[0]..=self.sentence_len[1]);
            let mut prev = None;
            for wi in 0..len {
                if wi > 0 {
                    doc.push(' ');
                }
                let w = self.sample_word(prev, rng);
                doc.push_str(&self.words[w]);
                prev = Some(w);
            }
            doc.push('.');
        }
        doc
    }
}

/// Generates every configured domain (plus the optional `general` mix) and
/// verifies the domains are separable before returning them.
pub fn generate_corpora(spec: &CorpusSpec, seed: u64) -> Result<CorpusSet> {
    if spec.domains.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 domains so the distinguishability gate can run, got {}",
            spec.domains.len()
        )));
    }
    for g in &spec.domains {
        if g.id == GENERAL_DOMAIN {
            return Err(Error::invalid(format!(
                "domain id {GENERAL_DOMAIN:?} is reserved for the generated mix"
            )));
        }
    }
    let mut models = Vec::with_capacity(spec.domains.len());
    let mut domains = Vec::with_capacity(spec.domains.len() + 1);
    for g in &spec.domains {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(g.id.as_bytes()));
        let model = WordModel::build(g, &mut rng)?;
        let mut docs = Vec::new();
        let mut tokens = 0usize;
        while tokens < g.tokens {
            let doc = model.sample_doc(&mut rng);
            tokens += doc.len();
            docs.push(doc);
        }
        models.push(model);
        domains.push(DomainCorpus::new(g.id.clone(), docs));
    }

    let accuracy = UnigramBayes::split_accuracy(&domains)?;
    if accuracy < spec.min_classifier_accuracy {
        return Err(Error::IndistinguishableDomains {
            accuracy,
            required: spec.min_classifier_accuracy,
        });
    }

    if spec.include_general {
        let budget = spec.general_tokens.unwrap_or_else(|| {
            spec.domains.iter().map(|g| g.tokens).sum::<usize>() / spec.domains.len()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(GENERAL_DOMAIN.as_bytes()));
        let mut docs = Vec::new();
        let mut tokens = 0usize;
        while tokens < budget {
            let which = rng.random_range(0..models.len());
            let doc = models[which].sample_doc(&mut rng);
            tokens += doc.len();
            docs.push(doc);
        }
        domains.push(DomainCorpus::new(GENERAL_DOMAIN, docs));
    }

    Ok(CorpusSet { domains })
}

/// Byte-unigram naive Bayes with Laplace smoothing. Doubles as the
/// generation-time distinguishability gate and the oracle in tests.
pub struct UnigramBayes {
    ids: Vec<String>,
    log_prior: Vec<f64>,
    log_prob: Vec<[f64; 256]>,
}

impl UnigramBayes {
    pub fn fit(classes: &[(String, Vec<&str>)]) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        let total_docs: usize = classes.iter().map(|(_, d)| d.len()).sum();
        let mut ids = Vec::new();
        let mut log_prior = Vec::new();
        let mut log_prob = Vec::new();
        for (id, docs) in classes {
            if docs.is_empty() {
                return Err(Error::EmptyCorpus(id.clone()));
            }
            let mut counts = [1.0f64; 256]; // Laplace
            for doc in docs {
                for b in doc.bytes() {
                    counts[b as usize] += 1.0;
                }
            }
            let sum: f64 = counts.iter().sum();
            let mut lp = [0.0f64; 256];
            for (l, c) in lp.iter_mut().zip(counts.iter()) {
                *l = (c / sum).ln();
            }
            ids.push(id.clone());
            log_prior.push((docs.len() as f64 / total_docs as f64).ln());
            log_prob.push(lp);
        }
        Ok(UnigramBayes {
            ids,
            log_prior,
            log_prob,
        })
    }

    pub fn classify(&self, text: &str) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, lp) in self.log_prob.iter().enumerate() {
            let mut score = self.log_prior[k];
            for b in text.bytes() {
                score += lp[b as usize];
            }
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        best
    }

    pub fn class_ids(&self) -> &[String] {
        &self.ids
    }

    /// Fits on even-indexed documents, scores accuracy on odd-indexed ones.
    pub fn split_accuracy(domains: &[DomainCorpus]) -> Result<f64> {
        let mut train: Vec<(String, Vec<&str>)> = Vec::new();
        let mut test: Vec<(usize, &str)> = Vec::new();
        for (k, d) in domains.iter().enumerate() {
            if d.docs.len() < 2 {
                return Err(Error::invalid(format!(
                    "domain {:?} needs at least 2 documents for the separability check",
                    d.domain_id
                )));
            }
            let evens: Vec<&str> = d.docs.iter().step_by(2).map(String::as_str).collect();
            train.push((d.domain_id.clone(), evens));
            for doc in d.docs.iter().skip(1).step_by(2) {
                test.push((k, doc));
            }
        }
        let clf = UnigramBayes::fit(&train)?;
        let hits = test
            .iter()
            .filter(|(k, doc)| clf.classify(doc) == *k)
            .count();
        Ok(hits as f64 / test.len() as f64)
    }
}
