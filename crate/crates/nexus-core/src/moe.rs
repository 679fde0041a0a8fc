//! Mixture-of-experts layer and model.
//!
//! Every MoE block owns a shared expert that all tokens pass through plus `n`
//! routed experts gated by router probabilities. Gates are the full-softmax
//! probabilities read at the top-k indices; they are deliberately not
//! renormalized over the selected set, so with k=1 the gate says how
//! confident the router actually was.
//!
//! Two router families exist: a plain linear score head, and a domain
//! projection that maps frozen per-domain embeddings through a small gated
//! MLP into per-layer expert embeddings. The projection output can be cached;
//! the cache is bit-identical to recomputation because both paths run the
//! same kernels.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::model::{
    attention, ffn_forward, Attention, BoundAttention, BoundFfn, FeedForward, ModelConfig,
    NORM_EPS,
};
use crate::tensor::{top_k, Scalar, Tape, Tensor, ValueId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    Linear,
    DomainProjection,
}

impl std::fmt::Display for RouterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RouterKind::Linear => write!(f, "linear"),
            RouterKind::DomainProjection => write!(f, "nexus"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearRouterState<T> {
    /// `[h, n]`: one score column per routed expert.
    pub weight: Tensor<T>,
}

/// Router weights start near zero so fresh routers score experts almost
/// uniformly; training owns the spread.
pub const ROUTER_INIT_STD: f64 = 0.02;

impl<T: Scalar> LinearRouterState<T> {
    pub fn init(d_model: usize, n_experts: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearRouterState {
            weight: Tensor::randn(vec![d_model, n_experts], ROUTER_INIT_STD, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainProjectionState<T> {
    /// `[n, m]` frozen domain embeddings, one row per routed expert.
    pub domain_embeddings: Tensor<T>,
    /// `[m, 2h]` first projection; its output is swiglu-gated down to `h`.
    pub proj_in: Tensor<T>,
    /// `[h, h]` second projection to the expert-embedding space.
    pub proj_out: Tensor<T>,
    /// Memoized `project_domains` output; always bit-equal to recomputing.
    pub cached_expert_embeddings: Option<Tensor<T>>,
}

impl<T: Scalar> DomainProjectionState<T> {
    pub fn init(domain_embeddings: Tensor<T>, d_model: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if domain_embeddings.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "domain_projection_init",
                shape: domain_embeddings.shape().to_vec(),
                reason: "domain embeddings must be [n, m]".into(),
            });
        }
        let m = domain_embeddings.shape()[1];
        let h = d_model;
        Ok(DomainProjectionState {
            domain_embeddings,
            proj_in: Tensor::randn(vec![m, 2 * h], 1.0 / (m as f64).sqrt(), rng),
            proj_out: Tensor::randn(vec![h, h], 1.0 / (h as f64).sqrt(), rng),
            cached_expert_embeddings: None,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.domain_embeddings.shape()[0]
    }

    /// Recomputes and stores the expert-embedding cache.
    pub fn refresh_cache(&mut self) -> Result<()> {
        self.cached_expert_embeddings = Some(project_domains_uncached(self)?);
        Ok(())
    }

    /// Cached matrix when present, otherwise a fresh projection.
    pub fn expert_embeddings(&self) -> Result<Tensor<T>> {
        match &self.cached_expert_embeddings {
            Some(e) => Ok(e.clone()),
            None => project_domains_uncached(self),
        }
    }
}

/// Projects the frozen domain embeddings into per-expert routing embeddings:
/// `swiglu(D @ proj_in) @ proj_out`, one row per expert.
pub fn project_domains<T: Scalar>(state: &DomainProjectionState<T>) -> Result<Tensor<T>> {
    state.expert_embeddings()
}

fn project_domains_uncached<T: Scalar>(state: &DomainProjectionState<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let d = tape.constant(&state.domain_embeddings);
    let w1 = tape.constant(&state.proj_in);
    let w2 = tape.constant(&state.proj_out);
    let e = project_on_tape(&mut tape, d, w1, w2)?;
    Ok(tape.value(e).clone())
}

fn project_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    domains: ValueId,
    proj_in: ValueId,
    proj_out: ValueId,
) -> Result<ValueId> {
    let hidden = tape.matmul(domains, proj_in)?;
    let gated = tape.swiglu(hidden)?;
    tape.matmul(gated, proj_out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Router<T> {
    Linear(LinearRouterState<T>),
    DomainProjection(DomainProjectionState<T>),
}

impl<T: Scalar> Router<T> {
    pub fn kind(&self) -> RouterKind {
        match self {
            Router::Linear(_) => RouterKind::Linear,
            Router::DomainProjection(_) => RouterKind::DomainProjection,
        }
    }

    pub fn n_experts(&self) -> usize {
        match self {
            Router::Linear(s) => s.weight.shape()[1],
            Router::DomainProjection(s) => s.n_experts(),
        }
    }
}

/// Routing outcome for one layer and one batch.
#[derive(Clone, Debug)]
pub struct RoutingDecision<T> {
    /// Full softmax over routed experts, `[batch, seq, n]`.
    pub probs: Tensor<T>,
    /// Selected expert ids, row-major `[batch, seq, k]`, descending score.
    pub top_indices: Vec<u32>,
    /// Probabilities at `top_indices` (not renormalized), `[batch, seq, k]`.
    pub gates: Tensor<T>,
    pub k: usize,
}

impl<T: Scalar> RoutingDecision<T> {
    fn from_probs(probs: Tensor<T>, k: usize) -> Result<Self> {
        let picked = top_k(&probs, k)?;
        Ok(RoutingDecision {
            probs,
            top_indices: picked.indices,
            gates: picked.values,
            k,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.probs.last_dim()
    }

    pub fn tokens(&self) -> usize {
        self.probs.numel() / self.n_experts()
    }
}

fn check_router_input<T: Scalar>(x: &Tensor<T>, h: usize, op: &'static str) -> Result<()> {
    if x.rank() != 3 || x.shape()[2] != h {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: format!("expected [batch, seq, {h}]"),
        });
    }
    Ok(())
}

/// Scores `x [B, S, h]` against the linear router: `softmax(x @ W)`.
pub fn route_linear<T: Scalar>(
    state: &LinearRouterState<T>,
    x: &Tensor<T>,
    k: usize,
) -> Result<RoutingDecision<T>> {
    check_router_input(x, state.weight.shape()[0], "route_linear")?;
    let mut tape = Tape::new();
    let xid = tape.constant(x);
    let w = tape.constant(&state.weight);
    let logits = tape.matmul(xid, w)?;
    let probs = tape.softmax(logits, 2)?;
    RoutingDecision::from_probs(tape.value(probs).clone(), k)
}

/// Scores `x [B, S, h]` against projected domain embeddings:
/// `softmax(x @ E^T)` with `E = project_domains(state)`.
pub fn route_nexus<T: Scalar>(
    state: &DomainProjectionState<T>,
    x: &Tensor<T>,
    k: usize,
) -> Result<RoutingDecision<T>> {
    check_router_input(x, state.proj_out.shape()[1], "route_nexus")?;
    let e = state.expert_embeddings()?;
    route_with_expert_embeddings(&e, x, k)
}

/// Routing math shared by the cached and uncached paths.
pub fn route_with_expert_embeddings<T: Scalar>(
    e: &Tensor<T>,
    x: &Tensor<T>,
    k: usize,
) -> Result<RoutingDecision<T>> {
    let mut tape = Tape::new();
    let xid = tape.constant(x);
    let eid = tape.constant(e);
    let logits = tape.matmul_t(xid, eid)?;
    let probs = tape.softmax(logits, 2)?;
    RoutingDecision::from_probs(tape.value(probs).clone(), k)
}

/// One MoE layer: shared expert plus routed experts behind a router.
#[derive(Clone, Debug, PartialEq)]
pub struct MoELayer<T> {
    pub shared: FeedForward<T>,
    pub experts: Vec<FeedForward<T>>,
    pub router: Router<T>,
    pub k: usize,
}

impl<T: Scalar> MoELayer<T> {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::invalid("MoE layer has no routed experts"));
        }
        if self.k == 0 || self.k > self.experts.len() {
            return Err(Error::invalid(format!(
                "k={} out of range for {} experts",
                self.k,
                self.experts.len()
            )));
        }
        if self.router.n_experts() != self.experts.len() {
            return Err(Error::invalid(format!(
                "router scores {} experts but layer has {}",
                self.router.n_experts(),
                self.experts.len()
            )));
        }
        Ok(())
    }
}

/// Routed-expert mix for one layer:
/// `y = FFN_shared(x) + sum_j gate_j * FFN_{e_j}(x)`.
///
/// The shared expert sits outside the router softmax and carries no gate.
/// Only selected experts are evaluated; the result still matches a dense
/// evaluation of all experts to float tolerance.
pub fn moe_forward<T: Scalar>(
    layer: &MoELayer<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, RoutingDecision<T>)> {
    layer.validate()?;
    check_router_input(x, layer.shared.up.shape()[0], "moe_forward")?;
    let mut tape = Tape::new();
    let bound = bind_layer(&mut tape, layer, false);
    let xid = tape.leaf(x.clone());
    let out = bound.forward(&mut tape, xid)?;
    let probs = tape.value(out.probs3).clone();
    let gates = Tensor::from_vec(
        vec![x.shape()[0], x.shape()[1], layer.k],
        out.gates.data().to_vec(),
    )?;
    let decision = RoutingDecision {
        probs,
        top_indices: out.top_indices,
        gates,
        k: layer.k,
    };
    Ok((tape.value(out.y).clone(), decision))
}

/// Switch-style load balance: `n * sum_i f_i * P_i` where `f_i` is the
/// fraction of tokens whose top-1 expert is `i` (even when k > 1) and `P_i`
/// the mean routing probability. Uniform f and P give exactly 1, total
/// collapse gives exactly n.
pub fn load_balance_loss<T: Scalar>(decision: &RoutingDecision<T>) -> Result<f64> {
    let n = decision.n_experts();
    let tokens = decision.tokens();
    if tokens == 0 || n == 0 {
        return Err(Error::invalid("load_balance_loss: empty decision"));
    }
    let mut counts = vec![0usize; n];
    for t in 0..tokens {
        let top1 = decision.top_indices[t * decision.k] as usize;
        counts[top1] += 1;
    }
    let mut mean_probs = vec![0.0f64; n];
    for row in decision.probs.data().chunks_exact(n) {
        for (m, &p) in mean_probs.iter_mut().zip(row) {
            *m += p.to_f64();
        }
    }
    let mut loss = 0.0;
    for i in 0..n {
        let f = counts[i] as f64 / tokens as f64;
        let p = mean_probs[i] / tokens as f64;
        loss += f * p;
    }
    Ok(loss * n as f64)
}

// ---- tape-level layer (shared by value ops and training) ----

#[derive(Clone, Debug)]
pub enum BoundRouter {
    Linear { weight: ValueId },
    DomainProjection { domains: ValueId, proj_in: ValueId, proj_out: ValueId },
}

#[derive(Clone, Debug)]
pub struct BoundMoELayer {
    pub shared: BoundFfn,
    pub experts: Vec<BoundFfn>,
    pub router: BoundRouter,
    pub k: usize,
}

/// Tape-side routing artifacts for one layer forward.
pub struct LayerForward<T> {
    pub y: ValueId,
    /// `[B, S, n]` softmax node (for reporting).
    pub probs3: ValueId,
    /// `[T, n]` flattened probs node (for the balance loss).
    pub probs2: ValueId,
    pub top_indices: Vec<u32>,
    pub gates: Tensor<T>,
}

pub(crate) fn bind_layer<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &MoELayer<T>,
    trainable: bool,
) -> BoundMoELayer {
    let lease = |tape: &mut Tape<T>, t: &Tensor<T>| {
        if trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        }
    };
    BoundMoELayer {
        shared: BoundFfn {
            up: lease(tape, &layer.shared.up),
            down: lease(tape, &layer.shared.down),
        },
        experts: layer
            .experts
            .iter()
            .map(|e| BoundFfn {
                up: lease(tape, &e.up),
                down: lease(tape, &e.down),
            })
            .collect(),
        router: match &layer.router {
            Router::Linear(s) => BoundRouter::Linear {
                weight: lease(tape, &s.weight),
            },
            Router::DomainProjection(s) => BoundRouter::DomainProjection {
                // domain embeddings are frozen: never a trainable leaf
                domains: tape.constant(&s.domain_embeddings),
                proj_in: lease(tape, &s.proj_in),
                proj_out: lease(tape, &s.proj_out),
            },
        },
        k: layer.k,
    }
}

impl BoundMoELayer {
    /// Routes and mixes `x [B, S, h]`. Only the selected experts appear in
    /// the graph, so unselected experts receive exactly zero gradient.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: ValueId) -> Result<LayerForward<T>> {
        let shape = tape.shape(x).to_vec();
        let (b, s, h) = (shape[0], shape[1], shape[2]);
        let tokens = b * s;
        let n = self.experts.len();

        let logits3 = match &self.router {
            BoundRouter::Linear { weight } => tape.matmul(x, *weight)?,
            BoundRouter::DomainProjection {
                domains,
                proj_in,
                proj_out,
            } => {
                let e = project_on_tape(tape, *domains, *proj_in, *proj_out)?;
                tape.matmul_t(x, e)?
            }
        };
        let probs3 = tape.softmax(logits3, 2)?;
        let probs2 = tape.reshape(probs3, vec![tokens, n])?;
        let picked = top_k(tape.value(probs2), self.k)?;

        let x2 = tape.reshape(x, vec![tokens, h])?;
        let mut y2 = ffn_forward(tape, x2, &self.shared)?;

        // group tokens by selected expert; slot order within a token follows
        // descending probability
        let mut rows_per_expert: Vec<Vec<usize>> = vec![Vec::new(); n];
        for t in 0..tokens {
            for slot in 0..self.k {
                let e = picked.indices[t * self.k + slot] as usize;
                rows_per_expert[e].push(t);
            }
        }
        for (e, rows) in rows_per_expert.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xe = tape.select_rows(x2, rows)?;
            let fe = ffn_forward(tape, xe, &self.experts[e])?;
            // gate for token t and expert e is probs[t, e] from the full softmax
            let gate_pos: Vec<usize> = rows.iter().map(|&t| t * n + e).collect();
            let ge = tape.select_index(probs2, &gate_pos)?;
            let weighted = tape.scale_rows(fe, ge)?;
            let scattered = tape.scatter_rows(weighted, rows, tokens)?;
            y2 = tape.add(y2, scattered)?;
        }
        let y = tape.reshape(y2, vec![b, s, h])?;
        Ok(LayerForward {
            y,
            probs3,
            probs2,
            top_indices: picked.indices,
            gates: picked.values,
        })
    }
}

/// Load-balance loss as a differentiable node: dispatch fractions are
/// constants, mean probabilities carry gradient.
pub fn load_balance_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    probs2: ValueId,
    top_indices: &[u32],
    k: usize,
) -> Result<ValueId> {
    let shape = tape.shape(probs2).to_vec();
    let (tokens, n) = (shape[0], shape[1]);
    let mut counts = vec![0usize; n];
    for t in 0..tokens {
        counts[top_indices[t * k] as usize] += 1;
    }
    let weights: Vec<T> = counts
        .iter()
        .map(|&c| T::from_f64(n as f64 * c as f64 / tokens as f64))
        .collect();
    let w = tape.constant(&Tensor::from_vec(vec![n], weights)?);
    let p = tape.mean_axis0(probs2)?;
    let prod = tape.mul(p, w)?;
    tape.sum_all(prod)
}

// ---- full MoE model ----

#[derive(Clone, Debug, PartialEq)]
pub struct MoEBlock<T> {
    pub norm: Tensor<T>,
    pub attn: Attention<T>,
    pub moe: MoELayer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEModelState<T> {
    pub config: ModelConfig,
    pub embedding: Tensor<T>,
    pub blocks: Vec<MoEBlock<T>>,
    pub final_norm: Tensor<T>,
    /// Domain attached to each routed expert, in expert order.
    pub expert_domains: Vec<String>,
    /// Balance-loss factor this model is meant to train with.
    pub lb_factor: f64,
}

impl<T: Scalar> MoEModelState<T> {
    pub fn router_kind(&self) -> RouterKind {
        self.blocks[0].moe.router.kind()
    }

    pub fn n_experts(&self) -> usize {
        self.blocks[0].moe.n_experts()
    }

    pub fn k(&self) -> usize {
        self.blocks[0].moe.k
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for b in &self.blocks {
            b.moe.validate()?;
        }
        if self.expert_domains.len() != self.n_experts() {
            return Err(Error::invalid(format!(
                "{} expert domains for {} experts",
                self.expert_domains.len(),
                self.n_experts()
            )));
        }
        Ok(())
    }

    /// Trainable parameters; frozen domain embeddings are excluded.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.push(("embedding".into(), &self.embedding));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.norm"), &b.norm));
            out.push((format!("blocks.{i}.attn.wq"), &b.attn.wq));
            out.push((format!("blocks.{i}.attn.wk"), &b.attn.wk));
            out.push((format!("blocks.{i}.attn.wv"), &b.attn.wv));
            out.push((format!("blocks.{i}.attn.wo"), &b.attn.wo));
            out.push((format!("blocks.{i}.moe.shared.up"), &b.moe.shared.up));
            out.push((format!("blocks.{i}.moe.shared.down"), &b.moe.shared.down));
            for (j, e) in b.moe.experts.iter().enumerate() {
                out.push((format!("blocks.{i}.moe.experts.{j}.up"), &e.up));
                out.push((format!("blocks.{i}.moe.experts.{j}.down"), &e.down));
            }
            match &b.moe.router {
                Router::Linear(r) => {
                    out.push((format!("blocks.{i}.moe.router.weight"), &r.weight));
                }
                Router::DomainProjection(r) => {
                    out.push((format!("blocks.{i}.moe.router.proj_in"), &r.proj_in));
                    out.push((format!("blocks.{i}.moe.router.proj_out"), &r.proj_out));
                }
            }
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
            out.push((format!("blocks.{i}.moe.shared.up"), &mut b.moe.shared.up));
            out.push((format!("blocks.{i}.moe.shared.down"), &mut b.moe.shared.down));
            for (j, e) in b.moe.experts.iter_mut().enumerate() {
                out.push((format!("blocks.{i}.moe.experts.{j}.up"), &mut e.up));
                out.push((format!("blocks.{i}.moe.experts.{j}.down"), &mut e.down));
            }
            match &mut b.moe.router {
                Router::Linear(r) => {
                    out.push((format!("blocks.{i}.moe.router.weight"), &mut r.weight));
                }
                Router::DomainProjection(r) => {
                    out.push((format!("blocks.{i}.moe.router.proj_in"), &mut r.proj_in));
                    out.push((format!("blocks.{i}.moe.router.proj_out"), &mut r.proj_out));
                }
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out
    }

    /// Ordered leaf ids matching [`MoEModelState::named_params`]. The frozen
    /// domain embeddings bind as constants and are not listed.
    pub fn bound_ids(bound: &BoundMoE) -> Vec<ValueId> {
        let mut ids = vec![bound.embedding];
        for b in &bound.blocks {
            ids.push(b.norm);
            ids.push(b.attn.wq);
            ids.push(b.attn.wk);
            ids.push(b.attn.wv);
            ids.push(b.attn.wo);
            ids.push(b.moe.shared.up);
            ids.push(b.moe.shared.down);
            for e in &b.moe.experts {
                ids.push(e.up);
                ids.push(e.down);
            }
            match &b.moe.router {
                BoundRouter::Linear { weight } => ids.push(*weight),
                BoundRouter::DomainProjection {
                    proj_in, proj_out, ..
                } => {
                    ids.push(*proj_in);
                    ids.push(*proj_out);
                }
            }
        }
        ids.push(bound.final_norm);
        ids
    }

    /// The frozen domain-embedding matrix (block 0; all blocks hold the same
    /// values by construction).
    pub fn domain_embeddings(&self) -> Option<&Tensor<T>> {
        match &self.blocks[0].moe.router {
            Router::DomainProjection(r) => Some(&r.domain_embeddings),
            Router::Linear(_) => None,
        }
    }

    /// Drops every per-block projection cache (call after optimizer steps).
    pub fn invalidate_router_caches(&mut self) {
        for b in &mut self.blocks {
            if let Router::DomainProjection(r) = &mut b.moe.router {
                r.cached_expert_embeddings = None;
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundMoE {
        let lease = |tape: &mut Tape<T>, t: &Tensor<T>| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        BoundMoE {
            config: self.config.clone(),
            embedding: lease(tape, &self.embedding),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundMoEBlock {
                    norm: lease(tape, &b.norm),
                    attn: BoundAttention {
                        wq: lease(tape, &b.attn.wq),
                        wk: lease(tape, &b.attn.wk),
                        wv: lease(tape, &b.attn.wv),
                        wo: lease(tape, &b.attn.wo),
                    },
                    moe: bind_layer(tape, &b.moe, trainable),
                })
                .collect(),
            final_norm: lease(tape, &self.final_norm),
        }
    }

    /// Logits plus per-block routing, on a throwaway tape (no grads).
    pub fn forward_routed(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<(Tensor<T>, Vec<RoutingDecision<T>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (logits, routing) = bound.forward(&mut tape, tokens, batch, seq)?;
        let decisions = routing
            .into_iter()
            .map(|r| RoutingDecision {
                probs: tape.value(r.probs3).clone(),
                top_indices: r.top_indices,
                gates: r.gates,
                k: self.k(),
            })
            .collect();
        Ok((tape.value(logits).clone(), decisions))
    }

    pub fn batch_nll(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (logits, _) = bound.forward(&mut tape, &batch.tokens, batch.batch, batch.seq)?;
        let loss = tape.cross_entropy(logits, &batch.targets, PAD)?;
        Ok(tape.value(loss).item()?.to_f64())
    }
}

#[derive(Clone, Debug)]
pub struct BoundMoEBlock {
    pub norm: ValueId,
    pub attn: BoundAttention,
    pub moe: BoundMoELayer,
}

#[derive(Clone, Debug)]
pub struct BoundMoE {
    pub config: ModelConfig,
    pub embedding: ValueId,
    pub blocks: Vec<BoundMoEBlock>,
    pub final_norm: ValueId,
}

impl BoundMoE {
    /// Returns logits and the per-block routing artifacts.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        tokens: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<(ValueId, Vec<LayerForward<T>>)> {
        if seq > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let mut x = tape.embed(self.embedding, tokens, batch, seq)?;
        let mut routings = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let normed = tape.rms_norm(x, block.norm, NORM_EPS)?;
            let attn_out = attention(tape, normed, &block.attn, &self.config)?;
            let layer_out = block.moe.forward(tape, normed)?;
            let sum = tape.add(attn_out, layer_out.y)?;
            x = tape.add(x, sum)?;
            routings.push(layer_out);
        }
        let xn = tape.rms_norm(x, self.final_norm, NORM_EPS)?;
        let logits = tape.matmul_t(xn, self.embedding)?;
        Ok((logits, routings))
    }

    /// LM loss plus `alpha * mean` of per-block balance losses. With
    /// `alpha == 0` the balance term is absent from the graph entirely, so
    /// its gradient contribution is exactly zero.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        alpha: f64,
    ) -> Result<MoELoss> {
        let (logits, routings) = self.forward(tape, &batch.tokens, batch.batch, batch.seq)?;
        let lm = tape.cross_entropy(logits, &batch.targets, PAD)?;
        let mut lb_terms = Vec::with_capacity(routings.len());
        for r in &routings {
            lb_terms.push(load_balance_on_tape(
                tape,
                r.probs2,
                &r.top_indices,
                self.blocks[0].moe.k,
            )?);
        }
        let mut lb_sum = lb_terms[0];
        for &t in &lb_terms[1..] {
            lb_sum = tape.add(lb_sum, t)?;
        }
        let lb_mean = tape.scale(lb_sum, 1.0 / lb_terms.len() as f64)?;
        let total = if alpha == 0.0 {
            lm
        } else {
            let scaled = tape.scale(lb_mean, alpha)?;
            tape.add(lm, scaled)?
        };
        Ok(MoELoss {
            total,
            lm,
            lb_mean,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MoELoss {
    pub total: ValueId,
    pub lm: ValueId,
    pub lb_mean: ValueId,
}
