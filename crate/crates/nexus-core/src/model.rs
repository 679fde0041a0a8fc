//! Decoder-only dense transformer.
//!
//! Blocks are parallel-attention: `x + Attn(norm(x)) + FFN(norm(x))` with one
//! shared pre-norm per block, rotary positions on Q/K, no biases anywhere,
//! and the LM head tied to the token embedding. The FFN is a gated-linear
//! unit: `up` projects to twice the hidden width, the first half gates the
//! second, `down` projects back.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, ValueId};

pub const ROPE_BASE: f64 = 10_000.0;
pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale default: small enough to train on one core in minutes.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            vocab_size: crate::data::VOCAB_SIZE,
            max_seq_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::invalid(
                "head dim must be even for rotary positions".to_string(),
            ));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::invalid("vocab_size and max_seq_len must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    /// `[d_model, 2 * d_ffn]`; first half of the output gates the second.
    pub up: Tensor<T>,
    /// `[d_ffn, d_model]`
    pub down: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock<T> {
    /// Shared pre-norm gain for both the attention and FFN branches.
    pub norm: Tensor<T>,
    pub attn: Attention<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseModelState<T> {
    pub config: ModelConfig,
    /// `[vocab, d_model]`; also the LM head via weight tying.
    pub embedding: Tensor<T>,
    pub blocks: Vec<DenseBlock<T>>,
    pub final_norm: Tensor<T>,
}

impl<T: Scalar> Attention<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.wo"), &self.wo));
    }
}

impl<T: Scalar> FeedForward<T> {
    pub(crate) fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let f = config.d_ffn;
        FeedForward {
            up: Tensor::randn(vec![d, 2 * f], 1.0 / (d as f64).sqrt(), rng),
            down: Tensor::randn(vec![f, d], 1.0 / (f as f64).sqrt(), rng),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.up"), &self.up));
        out.push((format!("{prefix}.down"), &self.down));
    }
}

impl<T: Scalar> DenseModelState<T> {
    /// Seeded random init; identical seeds give bit-identical states.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embedding = Tensor::randn(vec![config.vocab_size, d], 0.02, &mut rng);
        let proj_std = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| DenseBlock {
                norm: Tensor::full(vec![d], T::ONE),
                attn: Attention {
                    wq: Tensor::randn(vec![d, d], proj_std, &mut rng),
                    wk: Tensor::randn(vec![d, d], proj_std, &mut rng),
                    wv: Tensor::randn(vec![d, d], proj_std, &mut rng),
                    wo: Tensor::randn(vec![d, d], proj_std, &mut rng),
                },
                ffn: FeedForward::init(&config, &mut rng),
            })
            .collect();
        Ok(DenseModelState {
            config,
            embedding,
            blocks,
            final_norm: Tensor::full(vec![d], T::ONE),
        })
    }

    /// Stable name/tensor walk; the order defines checkpoint manifests and
    /// optimizer slot layout, so it must never depend on map iteration.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.push(("embedding".into(), &self.embedding));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.norm"), &b.norm));
            b.attn.named(&format!("blocks.{i}.attn"), &mut out);
            b.ffn.named(&format!("blocks.{i}.ffn"), &mut out);
        }
        out.push(("final_norm".into(), &self.final_norm));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("embedding".into(), &mut self.embedding));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.norm"), &mut b.norm));
            out.push((format!("blocks.{i}.attn.wq"), &mut b.attn.wq));
            out.push((format!("blocks.{i}.attn.wk"), &mut b.attn.wk));
            out.push((format!("blocks.{i}.attn.wv"), &mut b.attn.wv));
            out.push((format!("blocks.{i}.attn.wo"), &mut b.attn.wo));
            out.push((format!("blocks.{i}.ffn.up"), &mut b.ffn.up));
            out.push((format!("blocks.{i}.ffn.down"), &mut b.ffn.down));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out
    }

    pub fn cast<U: Scalar>(&self) -> DenseModelState<U> {
        DenseModelState {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| DenseBlock {
                    norm: b.norm.cast(),
                    attn: Attention {
                        wq: b.attn.wq.cast(),
                        wk: b.attn.wk.cast(),
                        wv: b.attn.wv.cast(),
                        wo: b.attn.wo.cast(),
                    },
                    ffn: FeedForward {
                        up: b.ffn.up.cast(),
                        down: b.ffn.down.cast(),
                    },
                })
                .collect(),
            final_norm: self.final_norm.cast(),
        }
    }

    /// Leases all parameters onto a tape. `trainable` controls whether the
    /// leaves require grad (training) or are constants (evaluation).
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundDense {
        let lease = |tape: &mut Tape<T>, t: &Tensor<T>| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        BoundDense {
            config: self.config.clone(),
            embedding: lease(tape, &self.embedding),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    norm: lease(tape, &b.norm),
                    attn: BoundAttention {
                        wq: lease(tape, &b.attn.wq),
                        wk: lease(tape, &b.attn.wk),
                        wv: lease(tape, &b.attn.wv),
                        wo: lease(tape, &b.attn.wo),
                    },
                    ffn: BoundFfn {
                        up: lease(tape, &b.ffn.up),
                        down: lease(tape, &b.ffn.down),
                    },
                })
                .collect(),
            final_norm: lease(tape, &self.final_norm),
        }
    }

    /// Ordered leaf ids matching [`DenseModelState::named_params`].
    pub fn bound_ids(bound: &BoundDense) -> Vec<ValueId> {
        let mut ids = vec![bound.embedding];
        for b in &bound.blocks {
            ids.push(b.norm);
            ids.push(b.attn.wq);
            ids.push(b.attn.wk);
            ids.push(b.attn.wv);
            ids.push(b.attn.wo);
            ids.push(b.ffn.up);
            ids.push(b.ffn.down);
        }
        ids.push(bound.final_norm);
        ids
    }

    /// Convenience: logits for one token batch on a throwaway tape.
    pub fn logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let id = bound.forward(&mut tape, tokens, batch, seq)?;
        Ok(tape.value(id).clone())
    }

    /// Mean next-token NLL of one batch (no grads).
    pub fn batch_nll(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let loss = bound.loss(&mut tape, batch)?;
        Ok(tape.value(loss).item()?.to_f64())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub wq: ValueId,
    pub wk: ValueId,
    pub wv: ValueId,
    pub wo: ValueId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundFfn {
    pub up: ValueId,
    pub down: ValueId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub norm: ValueId,
    pub attn: BoundAttention,
    pub ffn: BoundFfn,
}

#[derive(Clone, Debug)]
pub struct BoundDense {
    pub config: ModelConfig,
    pub embedding: ValueId,
    pub blocks: Vec<BoundBlock>,
    pub final_norm: ValueId,
}

impl BoundDense {
    /// `tokens` is row-major `[batch, seq]`; returns logits `[batch, seq, V]`.
    pub fn forward(
        &self,
        tape: &mut Tape<impl Scalar>,
        tokens: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<ValueId> {
        if seq > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let mut x = tape.embed(self.embedding, tokens, batch, seq)?;
        for block in &self.blocks {
            x = block_forward(tape, x, block, &self.config)?;
        }
        let xn = tape.rms_norm(x, self.final_norm, NORM_EPS)?;
        tape.matmul_t(xn, self.embedding) // tied LM head
    }

    pub fn loss(&self, tape: &mut Tape<impl Scalar>, batch: &Batch) -> Result<ValueId> {
        let logits = self.forward(tape, &batch.tokens, batch.batch, batch.seq)?;
        tape.cross_entropy(logits, &batch.targets, PAD)
    }
}

fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    block: &BoundBlock,
    config: &ModelConfig,
) -> Result<ValueId> {
    let normed = tape.rms_norm(x, block.norm, NORM_EPS)?;
    let attn_out = attention(tape, normed, &block.attn, config)?;
    let ffn_out = ffn_forward(tape, normed, &block.ffn)?;
    let sum = tape.add(attn_out, ffn_out)?;
    tape.add(x, sum)
}

/// Multi-head causal self-attention with rotary positions on Q and K.
pub(crate) fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    x_norm: ValueId,
    attn: &BoundAttention,
    config: &ModelConfig,
) -> Result<ValueId> {
    let h = config.n_heads;
    let q = tape.matmul(x_norm, attn.wq)?;
    let k = tape.matmul(x_norm, attn.wk)?;
    let v = tape.matmul(x_norm, attn.wv)?;
    let qh = tape.split_heads(q, h)?;
    let kh = tape.split_heads(k, h)?;
    let vh = tape.split_heads(v, h)?;
    let qr = tape.rope(qh, ROPE_BASE)?;
    let kr = tape.rope(kh, ROPE_BASE)?;
    let raw = tape.bmm_t(qr, kr)?;
    let scores = tape.scale(raw, 1.0 / (config.head_dim() as f64).sqrt())?;
    let probs = tape.causal_softmax(scores)?;
    let ctx = tape.bmm(probs, vh)?;
    let merged = tape.merge_heads(ctx, h)?;
    tape.matmul(merged, attn.wo)
}

/// Gated-linear FFN: `down(swiglu(up(x)))`.
pub(crate) fn ffn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    ffn: &BoundFfn,
) -> Result<ValueId> {
    let up = tape.matmul(x, ffn.up)?;
    let gated = tape.swiglu(up)?;
    tape.matmul(gated, ffn.down)
}
