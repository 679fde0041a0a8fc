//! Checkpoint surgery: dense experts in, mixture models out.
//!
//! Three operations, all pure state-to-state:
//!
//! * [`upcycle`] merges a seed model and `n` domain experts into an MoE:
//!   the seed FFN becomes the shared expert, each expert FFN becomes a
//!   routed expert, and every non-FFN parameter is the elementwise mean of
//!   the experts' values. Routers start from scratch.
//! * [`dense_merge`] is the flat baseline: every parameter averaged over
//!   the seed and all experts.
//! * [`extend_moe`] / [`extend_moe_linear`] append one more routed expert
//!   to an existing MoE, blending non-FFN parameters with weight
//!   `1/(n+1)` toward the newcomer. The projection router keeps its
//!   weights and just gains a domain row; the linear baseline has its
//!   score matrix re-initialized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Attention, DenseModelState, FeedForward, ModelConfig};
use crate::moe::{
    DomainProjectionState, LinearRouterState, MoEBlock, MoELayer, MoEModelState, Router,
    RouterKind,
};
use crate::tensor::{Scalar, Tensor};

/// A dense model trained on one domain's data.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainExpert<T> {
    pub domain: String,
    pub model: DenseModelState<T>,
}

#[derive(Clone, Debug)]
pub struct UpcycleOptions<T> {
    pub router: RouterKind,
    /// Experts mixed per token.
    pub k: usize,
    /// Balance-loss factor the resulting model should train with.
    pub lb_factor: f64,
    /// Average the seed into non-FFN parameters along with the experts.
    pub include_seed_in_merge: bool,
    /// Frozen domain matrix `[n, m]`, one row per expert in matching order.
    /// Required by the projection router, rejected by the linear one.
    pub domain_matrix: Option<Tensor<T>>,
    /// Router initialization seed.
    pub seed: u64,
}

impl<T> Default for UpcycleOptions<T> {
    fn default() -> Self {
        UpcycleOptions {
            router: RouterKind::DomainProjection,
            k: 1,
            lb_factor: 0.05,
            include_seed_in_merge: false,
            domain_matrix: None,
            seed: 0,
        }
    }
}

/// Field-by-field config comparison; returns human-readable divergences.
fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |name: &str, x: usize, y: usize| {
        if x != y {
            out.push(format!("{name}: {x} vs {y}"));
        }
    };
    check("n_layers", a.n_layers, b.n_layers);
    check("d_model", a.d_model, b.d_model);
    check("n_heads", a.n_heads, b.n_heads);
    check("d_ffn", a.d_ffn, b.d_ffn);
    check("vocab_size", a.vocab_size, b.vocab_size);
    check("max_seq_len", a.max_seq_len, b.max_seq_len);
    out
}

fn require_same_config<T: Scalar>(
    seed: &DenseModelState<T>,
    experts: &[DomainExpert<T>],
) -> Result<()> {
    let mut fields = Vec::new();
    for e in experts {
        for d in config_diff(&seed.config, &e.model.config) {
            fields.push(format!("{}: {d}", e.domain));
        }
    }
    if fields.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigMismatch { fields })
    }
}

fn require_unique_domains<T>(experts: &[DomainExpert<T>]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for e in experts {
        if !seen.insert(e.domain.as_str()) {
            return Err(Error::DuplicateDomain(e.domain.clone()));
        }
    }
    Ok(())
}

fn mean_attention<T: Scalar>(members: &[&DenseModelState<T>], block: usize) -> Result<Attention<T>> {
    let collect = |f: fn(&Attention<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = members.iter().map(|m| f(&m.blocks[block].attn)).collect();
        Tensor::mean_of(&refs)
    };
    Ok(Attention {
        wq: collect(|a| &a.wq)?,
        wk: collect(|a| &a.wk)?,
        wv: collect(|a| &a.wv)?,
        wo: collect(|a| &a.wo)?,
    })
}

/// Builds an MoE from a seed model and per-domain experts.
///
/// Per block: shared expert = seed FFN (copied), routed expert `i` =
/// expert `i`'s FFN (copied), non-FFN parameters = elementwise mean over
/// the experts (optionally including the seed). Routers are freshly
/// initialized; the projection router installs `domain_matrix` frozen.
pub fn upcycle<T: Scalar>(
    seed: &DenseModelState<T>,
    experts: &[DomainExpert<T>],
    opts: &UpcycleOptions<T>,
) -> Result<MoEModelState<T>> {
    if experts.is_empty() {
        return Err(Error::invalid("upcycle: need at least one expert"));
    }
    require_same_config(seed, experts)?;
    require_unique_domains(experts)?;
    let n = experts.len();
    if opts.k == 0 || opts.k > n {
        return Err(Error::invalid(format!(
            "upcycle: k={} out of range for {n} experts",
            opts.k
        )));
    }
    if opts.lb_factor < 0.0 {
        return Err(Error::invalid("upcycle: lb_factor must be nonnegative"));
    }
    match (&opts.router, &opts.domain_matrix) {
        (RouterKind::DomainProjection, None) => {
            return Err(Error::invalid(
                "upcycle: projection router requires a domain matrix",
            ));
        }
        (RouterKind::DomainProjection, Some(d)) if d.rank() != 2 || d.shape()[0] != n => {
            return Err(Error::InvalidShape {
                op: "upcycle",
                shape: d.shape().to_vec(),
                reason: format!("domain matrix must be [{n}, m]"),
            });
        }
        (RouterKind::Linear, Some(_)) => {
            return Err(Error::invalid(
                "upcycle: linear router takes no domain matrix",
            ));
        }
        _ => {}
    }

    let mut members: Vec<&DenseModelState<T>> = experts.iter().map(|e| &e.model).collect();
    if opts.include_seed_in_merge {
        members.push(seed);
    }
    let config = seed.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let embedding = {
        let refs: Vec<&Tensor<T>> = members.iter().map(|m| &m.embedding).collect();
        Tensor::mean_of(&refs)?
    };
    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let norm = {
            let refs: Vec<&Tensor<T>> = members.iter().map(|m| &m.blocks[i].norm).collect();
            Tensor::mean_of(&refs)?
        };
        let router = match opts.router {
            RouterKind::Linear => Router::Linear(LinearRouterState::init(config.d_model, n, &mut rng)),
            RouterKind::DomainProjection => Router::DomainProjection(DomainProjectionState::init(
                opts.domain_matrix.clone().expect("checked above"),
                config.d_model,
                &mut rng,
            )?),
        };
        blocks.push(MoEBlock {
            norm,
            attn: mean_attention(&members, i)?,
            moe: MoELayer {
                shared: seed.blocks[i].ffn.clone(),
                experts: experts.iter().map(|e| e.model.blocks[i].ffn.clone()).collect(),
                router,
                k: opts.k,
            },
        });
    }
    let final_norm = {
        let refs: Vec<&Tensor<T>> = members.iter().map(|m| &m.final_norm).collect();
        Tensor::mean_of(&refs)?
    };
    let out = MoEModelState {
        config,
        embedding,
        blocks,
        final_norm,
        expert_domains: experts.iter().map(|e| e.domain.clone()).collect(),
        lb_factor: opts.lb_factor,
    };
    out.validate()?;
    Ok(out)
}

/// Flat-average baseline: every parameter is the mean over the seed and all
/// experts (`n + 1` members).
pub fn dense_merge<T: Scalar>(
    seed: &DenseModelState<T>,
    experts: &[DomainExpert<T>],
) -> Result<DenseModelState<T>> {
    if experts.is_empty() {
        return Err(Error::invalid("dense_merge: need at least one expert"));
    }
    require_same_config(seed, experts)?;
    let mut members: Vec<&DenseModelState<T>> = vec![seed];
    members.extend(experts.iter().map(|e| &e.model));
    let config = seed.config.clone();

    let mean = |f: &dyn Fn(&DenseModelState<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = members.iter().map(|m| f(m)).collect();
        Tensor::mean_of(&refs)
    };
    let embedding = mean(&|m| &m.embedding)?;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        blocks.push(crate::model::DenseBlock {
            norm: mean(&|m| &m.blocks[i].norm)?,
            attn: mean_attention(&members, i)?,
            ffn: FeedForward {
                up: mean(&|m| &m.blocks[i].ffn.up)?,
                down: mean(&|m| &m.blocks[i].ffn.down)?,
            },
        });
    }
    let final_norm = mean(&|m| &m.final_norm)?;
    Ok(DenseModelState {
        config,
        embedding,
        blocks,
        final_norm,
    })
}

/// Shared scaffolding for both extension flavors: blends non-FFN parameters
/// toward the newcomer with weight `lambda = 1/(n+1)`, appends the new FFN
/// as routed expert `n`, and leaves the shared expert untouched.
fn extend_common<T: Scalar>(
    moe: &MoEModelState<T>,
    new: &DomainExpert<T>,
    mut make_router: impl FnMut(usize, &Router<T>) -> Result<Router<T>>,
) -> Result<MoEModelState<T>> {
    moe.validate()?;
    let diffs = config_diff(&moe.config, &new.model.config);
    if !diffs.is_empty() {
        return Err(Error::ConfigMismatch {
            fields: diffs.into_iter().map(|d| format!("{}: {d}", new.domain)).collect(),
        });
    }
    if moe.expert_domains.iter().any(|d| d == &new.domain) {
        return Err(Error::DuplicateDomain(new.domain.clone()));
    }
    let n = moe.n_experts();
    let lambda = 1.0 / (n as f64 + 1.0);

    let embedding = Tensor::lerp(&moe.embedding, &new.model.embedding, lambda)?;
    let mut blocks = Vec::with_capacity(moe.blocks.len());
    for (i, b) in moe.blocks.iter().enumerate() {
        let nb = &new.model.blocks[i];
        let mut experts = b.moe.experts.clone();
        experts.push(nb.ffn.clone());
        blocks.push(MoEBlock {
            norm: Tensor::lerp(&b.norm, &nb.norm, lambda)?,
            attn: Attention {
                wq: Tensor::lerp(&b.attn.wq, &nb.attn.wq, lambda)?,
                wk: Tensor::lerp(&b.attn.wk, &nb.attn.wk, lambda)?,
                wv: Tensor::lerp(&b.attn.wv, &nb.attn.wv, lambda)?,
                wo: Tensor::lerp(&b.attn.wo, &nb.attn.wo, lambda)?,
            },
            moe: MoELayer {
                shared: b.moe.shared.clone(),
                experts,
                router: make_router(i, &b.moe.router)?,
                k: b.moe.k,
            },
        });
    }
    let mut expert_domains = moe.expert_domains.clone();
    expert_domains.push(new.domain.clone());
    let out = MoEModelState {
        config: moe.config.clone(),
        embedding,
        blocks,
        final_norm: Tensor::lerp(&moe.final_norm, &new.model.final_norm, lambda)?,
        expert_domains,
        lb_factor: moe.lb_factor,
    };
    out.validate()?;
    Ok(out)
}

/// Appends a routed expert to a projection-routed MoE. The new domain vector
/// becomes row `n` of the frozen matrix; projection weights are carried over
/// unchanged, so the old experts' embeddings stay bit-identical. The
/// projection cache is dropped (the matrix changed).
pub fn extend_moe<T: Scalar>(
    moe: &MoEModelState<T>,
    new: &DomainExpert<T>,
    d_new: &[f64],
) -> Result<MoEModelState<T>> {
    if moe.router_kind() != RouterKind::DomainProjection {
        return Err(Error::UnsupportedRouter(
            "extend_moe needs a projection router; use extend_moe_linear".into(),
        ));
    }
    extend_common(moe, new, |_, router| {
        let Router::DomainProjection(state) = router else {
            unreachable!("router kind checked above");
        };
        let m = state.domain_embeddings.shape()[1];
        if d_new.len() != m {
            return Err(Error::invalid(format!(
                "extend_moe: new domain vector has {} entries, matrix width is {m}",
                d_new.len()
            )));
        }
        let n = state.domain_embeddings.shape()[0];
        let mut data = state.domain_embeddings.data().to_vec();
        data.extend(d_new.iter().map(|&v| T::from_f64(v)));
        Ok(Router::DomainProjection(DomainProjectionState {
            domain_embeddings: Tensor::from_vec(vec![n + 1, m], data)?,
            proj_in: state.proj_in.clone(),
            proj_out: state.proj_out.clone(),
            cached_expert_embeddings: None,
        }))
    })
}

/// Appends a routed expert to a linear-routed MoE. The score matrix is
/// re-initialized from `seed` with `n + 1` columns; everything else follows
/// [`extend_moe`].
pub fn extend_moe_linear<T: Scalar>(
    moe: &MoEModelState<T>,
    new: &DomainExpert<T>,
    seed: u64,
) -> Result<MoEModelState<T>> {
    if moe.router_kind() != RouterKind::Linear {
        return Err(Error::UnsupportedRouter(
            "extend_moe_linear needs a linear router; use extend_moe".into(),
        ));
    }
    let d_model = moe.config.d_model;
    let n = moe.n_experts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    extend_common(moe, new, move |_, _| {
        Ok(Router::Linear(LinearRouterState::init(
            d_model,
            n + 1,
            &mut rng,
        )))
    })
}
