//! Fixture builders shared by the criterion benchmarks: deterministic
//! tensors, a desk-scale routed layer, a small dense model with a ready
//! batch, and a two-domain corpus for the data-path benches.

use nexus_core::data::{generate_corpora, BatchSampler, CorpusSet, CorpusSpec, DomainGrammar, MixtureSpec};
use nexus_core::model::{DenseModelState, ModelConfig};
use nexus_core::moe::{DomainProjectionState, MoELayer, Router};
use nexus_core::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Matches the desk-scale training runs: 2 layers, width 64, 4 heads.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        d_ffn: 96,
        vocab_size: 259,
        max_seq_len: 128,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: Vec<usize>, std: f64, seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, std, &mut rng(seed))
}

/// A routed layer at training shape: four experts over the toy width, with a
/// projection router whose embeddings use `m` buckets.
pub fn routed_layer(n_experts: usize, m: usize, k: usize) -> MoELayer<f32> {
    let cfg = toy_config();
    let (h, f) = (cfg.d_model, cfg.d_ffn);
    let mut r = rng(7);
    let ffn = |r: &mut ChaCha8Rng| nexus_core::model::FeedForward {
        up: Tensor::randn(vec![h, 2 * f], 0.02, r),
        down: Tensor::randn(vec![f, h], 0.02, r),
    };
    let shared = ffn(&mut r);
    let experts = (0..n_experts).map(|_| ffn(&mut r)).collect();
    let domains = Tensor::randn(vec![n_experts, m], 1.0, &mut r);
    let router = Router::DomainProjection(
        DomainProjectionState::init(domains, h, &mut r).expect("valid projection shapes"),
    );
    MoELayer { shared, experts, router, k }
}

/// A dense model plus a token/target pair shaped like one training window.
pub fn dense_with_batch(batch: usize, seq: usize) -> (DenseModelState<f32>, Vec<u32>, Vec<u32>) {
    let cfg = toy_config();
    let model = DenseModelState::init(cfg.clone(), 11).expect("valid config");
    let mut r = rng(13);
    let tokens: Vec<u32> = (0..batch * seq)
        .map(|_| r.random_range(0..cfg.vocab_size as u32 - 3))
        .collect();
    let targets: Vec<u32> = tokens
        .iter()
        .skip(1)
        .chain(std::iter::once(&0))
        .copied()
        .collect();
    (model, tokens, targets)
}

/// Two synthetic domains over disjoint character sets, enough for sampler
/// and tokenizer throughput measurements.
pub fn small_corpora() -> CorpusSet {
    let spec = CorpusSpec {
        domains: vec![
            DomainGrammar::from_charset("alpha", "abcdefgh", 40_000),
            DomainGrammar::from_charset("beta", "01234567", 40_000),
        ],
        include_general: false,
        general_tokens: None,
        min_classifier_accuracy: 0.95,
    };
    generate_corpora(&spec, 17).expect("distinguishable synthetic domains")
}

pub fn sampler(set: &CorpusSet, batch: usize, seq: usize) -> BatchSampler {
    BatchSampler::new(set, &MixtureSpec::proportional(&set.ids()), batch, seq, 23)
        .expect("streams longer than one window")
}
