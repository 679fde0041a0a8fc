//! Training loops for dense experts and MoE models.
//!
//! One optimizer (decoupled-weight-decay adaptive moments), one schedule
//! (linear warmup into cosine decay), and three drivers: `train_dense`,
//! `train_moe`, and `finetune_extended` (an even split between the new
//! domain and everything older). Every run is deterministic given the
//! config seed: same seed, same batches, same updates, bit-identical
//! weights.
//!
//! MoE runs re-assert each step that the frozen domain embeddings did not
//! move (L2 change exactly zero), and any non-finite loss aborts the run
//! with the step at which it happened.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use crate::analysis::{collect_routing_stats, RoutingStats};
use crate::data::{eval_windows, Batch, BatchSampler, CorpusSet, MixtureSpec};
use crate::error::{Error, Result};
use crate::model::DenseModelState;
use crate::moe::MoEModelState;
use crate::tensor::{Scalar, Tape, Tensor, ValueId};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.95;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.1;
pub const DEFAULT_GRAD_CLIP: f64 = 1.0;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_tokens: usize,
    pub batch: usize,
    pub seq: usize,
    pub max_lr: f64,
    pub final_lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Load-balance factor; only MoE runs read it.
    pub alpha: f64,
    pub seed: u64,
    /// Steps between held-out evaluations; 0 evaluates only at the start
    /// and end.
    pub eval_every: usize,
    /// Held-out windows per domain per evaluation.
    pub eval_windows: usize,
    /// Windows per domain for routing snapshots at eval boundaries
    /// (MoE runs only); 0 disables snapshots.
    pub routing_snapshot_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_tokens: 65_536,
            batch: 8,
            seq: 64,
            max_lr: 1e-3,
            final_lr: 1e-4,
            warmup_fraction: 0.1,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            grad_clip: DEFAULT_GRAD_CLIP,
            alpha: 0.05,
            seed: 0,
            eval_every: 0,
            eval_windows: 32,
            routing_snapshot_samples: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.seq == 0 {
            return Err(Error::invalid("batch and seq must be positive"));
        }
        if self.total_tokens < self.batch * self.seq {
            return Err(Error::invalid(format!(
                "total_tokens {} is below one batch of {}",
                self.total_tokens,
                self.batch * self.seq
            )));
        }
        for (name, v) in [
            ("max_lr", self.max_lr),
            ("final_lr", self.final_lr),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("alpha", self.alpha),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.final_lr > self.max_lr {
            return Err(Error::invalid("final_lr must not exceed max_lr"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup_fraction must lie in [0, 1)"));
        }
        if self.eval_windows == 0 {
            return Err(Error::invalid("eval_windows must be positive"));
        }
        Ok(())
    }

    /// Optimizer steps the token budget affords (full batches only).
    pub fn steps(&self) -> usize {
        self.total_tokens / (self.batch * self.seq)
    }
}

/// Linear warmup from 0 to `max_lr`, then cosine decay to `final_lr`.
/// Exact at the three landmarks: 0 at step 0, `max_lr` at warmup end,
/// `final_lr` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} is outside the schedule (total {total_steps})"
        )));
    }
    let warmup = (self_warmup_steps(cfg.warmup_fraction, total_steps))?;
    if step <= warmup && warmup > 0 {
        return Ok(cfg.max_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(cfg.final_lr + 0.5 * (cfg.max_lr - cfg.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn self_warmup_steps(fraction: f64, total_steps: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("warmup_fraction must lie in [0, 1)"));
    }
    let warmup = (fraction * total_steps as f64).round() as usize;
    if warmup >= total_steps {
        return Err(Error::invalid(format!(
            "warmup of {warmup} steps consumes the whole {total_steps}-step run"
        )));
    }
    Ok(warmup)
}

// ---- optimizer ----

/// Adaptive moments with decoupled weight decay. Moments are kept in f64
/// regardless of the working precision; decay skips 1-D tensors (norm
/// gains). A step with lr = 0 leaves parameters bit-identical.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    t: usize,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64, grad_clip: f64) -> Self {
        AdamW {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            grad_clip,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over positionally aligned params and grads (`None` means
    /// the parameter was absent from the graph: its moments still decay).
    /// Returns the pre-clip global gradient norm.
    pub fn step<T: Scalar>(
        &mut self,
        lr: f64,
        params: Vec<(String, &mut Tensor<T>)>,
        grads: &[Option<Vec<f64>>],
    ) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let norm = {
            let sq: f64 = grads
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|&g| g * g)
                .sum();
            sq.sqrt()
        };
        let clip_scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((name, p), grad) in params.into_iter().zip(grads) {
            let n = p.numel();
            if let Some(g) = grad {
                if g.len() != n {
                    return Err(Error::invalid(format!(
                        "grad for {name:?} has {} elements, param has {n}",
                        g.len()
                    )));
                }
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; n]);
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let data = p.data_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i]) * clip_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                if lr != 0.0 {
                    let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                    let x = data[i].to_f64();
                    data[i] = T::from_f64(x - lr * (update + decay * x));
                }
            }
        }
        Ok(norm)
    }
}

// ---- reports ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub tokens_seen: usize,
    pub lr: f64,
    pub lm_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lb_loss: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    /// Held-out perplexity per domain.
    pub perplexity: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSnapshot {
    pub step: usize,
    pub stats: RoutingStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub routing_snapshots: Vec<RoutingSnapshot>,
    /// Training sequences drawn per domain over the whole run.
    pub sequence_counts: BTreeMap<String, usize>,
    pub total_tokens: usize,
    pub final_loss: f64,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    fn new() -> Self {
        TrainReport {
            steps: Vec::new(),
            evals: Vec::new(),
            routing_snapshots: Vec::new(),
            sequence_counts: BTreeMap::new(),
            total_tokens: 0,
            final_loss: f64::NAN,
            wall_clock_secs: 0.0,
        }
    }

    /// Fraction of training sequences drawn from one domain.
    pub fn domain_fraction(&self, domain: &str) -> f64 {
        let total: usize = self.sequence_counts.values().sum();
        if total == 0 {
            return 0.0;
        }
        *self.sequence_counts.get(domain).unwrap_or(&0) as f64 / total as f64
    }

    /// One JSON record per logged step.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Everything except the per-step records.
    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut summary = self.clone();
        summary.steps.clear();
        std::fs::write(path, serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }
}

/// Held-out perplexity per domain from deterministic non-overlapping
/// windows, token-weighted across batches.
pub fn per_domain_perplexity<F>(
    mut nll: F,
    holdout: &CorpusSet,
    seq: usize,
    max_windows: usize,
    batch: usize,
) -> Result<BTreeMap<String, f64>>
where
    F: FnMut(&Batch) -> Result<f64>,
{
    let mut out = BTreeMap::new();
    for corpus in &holdout.domains {
        let stream = corpus.token_stream();
        let windows = eval_windows(&stream, seq, max_windows);
        if windows.is_empty() {
            return Err(Error::EmptyCorpus(corpus.domain_id.clone()));
        }
        let mut nll_sum = 0.0;
        let mut token_sum = 0usize;
        for chunk in windows.chunks(batch) {
            let mut tokens = Vec::with_capacity(chunk.len() * seq);
            let mut targets = Vec::with_capacity(chunk.len() * seq);
            for (t, y) in chunk {
                tokens.extend_from_slice(t);
                targets.extend_from_slice(y);
            }
            let b = Batch {
                tokens,
                targets,
                labels: vec![corpus.domain_id.clone(); chunk.len()],
                batch: chunk.len(),
                seq,
            };
            let mean = nll(&b)?;
            nll_sum += mean * (chunk.len() * seq) as f64;
            token_sum += chunk.len() * seq;
        }
        out.insert(corpus.domain_id.clone(), (nll_sum / token_sum as f64).exp());
    }
    Ok(out)
}

// ---- shared loop plumbing ----

fn collect_grads<T: Scalar>(tape: &Tape<T>, ids: &[ValueId]) -> Vec<Option<Vec<f64>>> {
    ids.iter()
        .map(|&id| tape.grad(id).map(|g| g.iter().map(|x| x.to_f64()).collect()))
        .collect()
}

fn eval_now(step: usize, total: usize, eval_every: usize) -> bool {
    step == total || (eval_every > 0 && step % eval_every == 0)
}

/// NaN anywhere during a step is divergence, whether it surfaced as a
/// kernel error (debug scans) or a non-finite loss value.
fn diverged(step: usize, loss: f64) -> Error {
    Error::Diverged { step, loss }
}

fn map_nonfinite<V>(r: Result<V>, step: usize) -> Result<V> {
    match r {
        Err(Error::NonFinite { .. }) => Err(diverged(step, f64::NAN)),
        other => other,
    }
}

/// Trains a dense model in place on the mixture; evaluates on `holdout`.
pub fn train_dense<T: Scalar>(
    model: &mut DenseModelState<T>,
    train: &CorpusSet,
    holdout: &CorpusSet,
    mixture: &MixtureSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.config.validate()?;
    let t0 = Instant::now();
    let total = cfg.steps();
    let mut sampler = BatchSampler::new(train, mixture, cfg.batch, cfg.seq, cfg.seed)?;
    let mut opt = AdamW::new(cfg.weight_decay, cfg.grad_clip);
    let mut report = TrainReport::new();
    report.evals.push(EvalLog {
        step: 0,
        perplexity: map_nonfinite(
            per_domain_perplexity(
                |b| model.batch_nll(b),
                holdout,
                cfg.seq,
                cfg.eval_windows,
                cfg.batch,
            ),
            0,
        )?,
    });
    for step in 1..=total {
        let lr = lr_schedule(step, total, cfg)?;
        let batch = sampler.next_batch();
        for l in &batch.labels {
            *report.sequence_counts.entry(l.clone()).or_default() += 1;
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let loss_id = map_nonfinite(bound.loss(&mut tape, &batch), step)?;
        let loss = tape.value(loss_id).item()?.to_f64();
        if !loss.is_finite() {
            return Err(diverged(step, loss));
        }
        map_nonfinite(tape.backward(loss_id), step)?;
        let ids = DenseModelState::<T>::bound_ids(&bound);
        let grads = collect_grads(&tape, &ids);
        let grad_norm = opt.step(lr, model.named_params_mut(), &grads)?;
        if !grad_norm.is_finite() {
            return Err(diverged(step, loss));
        }
        report.steps.push(StepLog {
            step,
            tokens_seen: step * cfg.batch * cfg.seq,
            lr,
            lm_loss: loss,
            lb_loss: None,
            grad_norm,
        });
        if eval_now(step, total, cfg.eval_every) {
            report.evals.push(EvalLog {
                step,
                perplexity: map_nonfinite(
                    per_domain_perplexity(
                        |b| model.batch_nll(b),
                        holdout,
                        cfg.seq,
                        cfg.eval_windows,
                        cfg.batch,
                    ),
                    step,
                )?,
            });
        }
    }
    report.total_tokens = total * cfg.batch * cfg.seq;
    report.final_loss = report.steps.last().map_or(f64::NAN, |s| s.lm_loss);
    report.wall_clock_secs = t0.elapsed().as_secs_f64();
    Ok(report)
}

/// Trains an MoE in place; the balance term uses `cfg.alpha`. The frozen
/// domain embeddings are re-checked every step.
pub fn train_moe<T: Scalar>(
    moe: &mut MoEModelState<T>,
    train: &CorpusSet,
    holdout: &CorpusSet,
    mixture: &MixtureSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    moe.validate()?;
    let t0 = Instant::now();
    let total = cfg.steps();
    let mut sampler = BatchSampler::new(train, mixture, cfg.batch, cfg.seq, cfg.seed)?;
    let mut opt = AdamW::new(cfg.weight_decay, cfg.grad_clip);
    let frozen = moe.domain_embeddings().cloned();
    let mut report = TrainReport::new();
    let push_eval = |report: &mut TrainReport, moe: &MoEModelState<T>, step: usize| -> Result<()> {
        report.evals.push(EvalLog {
            step,
            perplexity: per_domain_perplexity(
                |b| moe.batch_nll(b),
                holdout,
                cfg.seq,
                cfg.eval_windows,
                cfg.batch,
            )?,
        });
        if cfg.routing_snapshot_samples > 0 {
            report.routing_snapshots.push(RoutingSnapshot {
                step,
                stats: collect_routing_stats(
                    moe,
                    holdout,
                    cfg.seq,
                    cfg.routing_snapshot_samples,
                    cfg.seed,
                )?,
            });
        }
        Ok(())
    };
    map_nonfinite(push_eval(&mut report, moe, 0), 0)?;
    for step in 1..=total {
        let lr = lr_schedule(step, total, cfg)?;
        let batch = sampler.next_batch();
        for l in &batch.labels {
            *report.sequence_counts.entry(l.clone()).or_default() += 1;
        }
        let mut tape = Tape::new();
        let bound = moe.bind(&mut tape, true);
        let losses = map_nonfinite(bound.loss(&mut tape, &batch, cfg.alpha), step)?;
        let total_loss = tape.value(losses.total).item()?.to_f64();
        let lm = tape.value(losses.lm).item()?.to_f64();
        let lb = tape.value(losses.lb_mean).item()?.to_f64();
        if !total_loss.is_finite() {
            return Err(diverged(step, total_loss));
        }
        map_nonfinite(tape.backward(losses.total), step)?;
        let ids = MoEModelState::<T>::bound_ids(&bound);
        let grads = collect_grads(&tape, &ids);
        let grad_norm = opt.step(lr, moe.named_params_mut(), &grads)?;
        if !grad_norm.is_finite() {
            return Err(diverged(step, total_loss));
        }
        moe.invalidate_router_caches();
        if let Some(f) = &frozen {
            let now = moe.domain_embeddings().expect("router kind is fixed");
            let drift: f64 = f
                .data()
                .iter()
                .zip(now.data())
                .map(|(a, b)| {
                    let d = a.to_f64() - b.to_f64();
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            if drift != 0.0 {
                return Err(Error::invalid(format!(
                    "frozen domain embeddings moved by {drift} at step {step}"
                )));
            }
        }
        report.steps.push(StepLog {
            step,
            tokens_seen: step * cfg.batch * cfg.seq,
            lr,
            lm_loss: lm,
            lb_loss: Some(lb),
            grad_norm,
        });
        if eval_now(step, total, cfg.eval_every) {
            map_nonfinite(push_eval(&mut report, moe, step), step)?;
        }
    }
    report.total_tokens = total * cfg.batch * cfg.seq;
    report.final_loss = report.steps.last().map_or(f64::NAN, |s| s.lm_loss);
    report.wall_clock_secs = t0.elapsed().as_secs_f64();
    Ok(report)
}

/// Post-extension finetune: half the sequences come from `new_domain`, the
/// other half uniformly from every other domain in `train`.
pub fn finetune_extended<T: Scalar>(
    moe: &mut MoEModelState<T>,
    train: &CorpusSet,
    holdout: &CorpusSet,
    new_domain: &str,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train.get(new_domain).is_none() {
        return Err(Error::invalid(format!(
            "new domain {new_domain:?} is not in the training corpora"
        )));
    }
    let old: Vec<String> = train.ids().into_iter().filter(|d| d != new_domain).collect();
    if old.is_empty() {
        return Err(Error::invalid("finetune needs at least one old domain"));
    }
    let mut weights = vec![(new_domain.to_string(), 0.5)];
    let share = 0.5 / old.len() as f64;
    weights.extend(old.into_iter().map(|d| (d, share)));
    let mixture = MixtureSpec::explicit(&weights);
    train_moe(moe, train, holdout, &mixture, cfg)
}
