//! Text handling: byte-level tokens, domain-tagged corpora, JSONL I/O.
//!
//! The tokenizer is the identity over bytes plus three specials, so there is
//! nothing to train and round-trips are exact. Corpora stay grouped by domain
//! because every later stage (experts, embeddings, routing stats) is keyed by
//! domain id.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod sampler;
pub mod synth;

pub use sampler::{eval_windows, Batch, BatchSampler, MixtureMode, MixtureSpec};
pub use synth::{generate_corpora, CorpusSpec, DomainGrammar, UnigramBayes};

/// 256 byte values plus BOS/EOS/PAD.
pub const VOCAB_SIZE: usize = 259;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;

/// Byte-identity tokenization; never emits the special ids.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`tokenize`]; special ids are dropped, invalid UTF-8 (possible
/// only for ids that never came from `tokenize`) is replaced.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Documents of a single domain, in generation/file order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainCorpus {
    pub domain_id: String,
    pub docs: Vec<String>,
}

impl DomainCorpus {
    pub fn new(domain_id: impl Into<String>, docs: Vec<String>) -> Self {
        DomainCorpus {
            domain_id: domain_id.into(),
            docs,
        }
    }

    /// Total byte-token count across documents, excluding framing specials.
    pub fn token_count(&self) -> usize {
        self.docs.iter().map(|d| d.len()).sum()
    }

    /// Concatenates all documents into one id stream, framing each document
    /// as `BOS .. bytes .. EOS`.
    pub fn token_stream(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.token_count() + 2 * self.docs.len());
        for doc in &self.docs {
            out.push(BOS);
            out.extend(tokenize(doc));
            out.push(EOS);
        }
        out
    }

    /// Splits off every `every`-th document as a held-out set (deterministic,
    /// no RNG). The first split keeps the rest.
    pub fn split_heldout(&self, every: usize) -> (DomainCorpus, DomainCorpus) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, doc) in self.docs.iter().enumerate() {
            if every > 0 && i % every == every - 1 {
                held.push(doc.clone());
            } else {
                train.push(doc.clone());
            }
        }
        (
            DomainCorpus::new(self.domain_id.clone(), train),
            DomainCorpus::new(self.domain_id.clone(), held),
        )
    }
}

/// An ordered set of domain corpora; order defines expert order downstream.
#[derive(Clone, Debug, Default)]
pub struct CorpusSet {
    pub domains: Vec<DomainCorpus>,
}

impl CorpusSet {
    pub fn new(domains: Vec<DomainCorpus>) -> Self {
        CorpusSet { domains }
    }

    pub fn get(&self, domain_id: &str) -> Option<&DomainCorpus> {
        self.domains.iter().find(|d| d.domain_id == domain_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.domain_id.clone()).collect()
    }

    pub fn split_heldout(&self, every: usize) -> (CorpusSet, CorpusSet) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for d in &self.domains {
            let (t, h) = d.split_heldout(every);
            train.push(t);
            held.push(h);
        }
        (CorpusSet::new(train), CorpusSet::new(held))
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
    domain: String,
}

/// Reads `{"text", "domain"}` lines, grouping documents by domain in order of
/// first appearance.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<CorpusSet> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line)?;
        if !groups.contains_key(&rec.domain) {
            order.push(rec.domain.clone());
        }
        groups.entry(rec.domain).or_default().push(rec.text);
    }
    let domains = order
        .into_iter()
        .map(|id| {
            let docs = groups.remove(&id).unwrap_or_default();
            DomainCorpus::new(id, docs)
        })
        .collect();
    Ok(CorpusSet { domains })
}

/// Writes one corpus as JSONL, one document per line.
pub fn write_jsonl(corpus: &DomainCorpus, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for doc in &corpus.docs {
        let rec = JsonlRecord {
            text: doc.clone(),
            domain: corpus.domain_id.clone(),
        };
        serde_json::to_writer(&mut file, &rec)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads either a single `.jsonl` file or every `*.jsonl` in a directory
/// (sorted by file name for a stable domain order).
pub fn read_corpus_path(path: impl AsRef<Path>) -> Result<CorpusSet> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::invalid(format!(
                "no .jsonl files in {}",
                path.display()
            )));
        }
        let mut domains = Vec::new();
        for f in files {
            domains.extend(read_jsonl(&f)?.domains);
        }
        Ok(CorpusSet { domains })
    } else {
        read_jsonl(path)
    }
}
