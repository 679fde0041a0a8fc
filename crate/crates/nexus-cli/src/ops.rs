//! Subcommand implementations. Each command resolves its settings as
//! CLI flag, then experiment-file section, then built-in default; loads
//! inputs through the workdir; and prints checkpoint hashes so reruns can
//! be compared byte-for-byte.

use clap::Args;
use serde::Deserialize;
use std::path::{Path, PathBuf};

use nexus_core::analysis::{
    collect_routing_stats, routing_stats_file_name, similarity_file_name, similarity_report,
    write_routing_csv, write_routing_json, write_similarity_json,
};
use nexus_core::checkpoint::{checkpoint_hash, load_dense, load_moe, save_dense, save_moe};
use nexus_core::data::{read_corpus_path, write_jsonl, CorpusSet, CorpusSpec, MixtureSpec};
use nexus_core::embed::{
    embed_hashed_ngram, embed_seed_mean, embedding_matrix, read_embeddings, write_embeddings,
    DomainEmbedding, EmbedMethod, DEFAULT_NGRAM_BUCKETS,
};
use nexus_core::model::{DenseModelState, ModelConfig};
use nexus_core::moe::{MoEModelState, RouterKind};
use nexus_core::train::{
    finetune_extended, train_dense, train_moe, TrainConfig, TrainReport,
};
use nexus_core::upcycle::{
    dense_merge, extend_moe, extend_moe_linear, upcycle, DomainExpert, UpcycleOptions,
};
use nexus_core::{Error, Result, Scalar};

use crate::experiment::{
    load_experiment, pick, pick_vec, read_config_file, require, section, Workspace,
};
use crate::{Cli, Command};

/// `println!` that tolerates a closed stdout (e.g. piping into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

// ---- argument structs (clap flags and experiment-file keys share names) ----

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataArgs {
    /// Grammar spec file (TOML/JSON) for the synthetic domains.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; one JSONL file per domain.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Model/training config file with [model] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus: .jsonl file or directory (repeatable).
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    /// Held-out corpus for evaluation; defaults to the training corpus.
    #[arg(long)]
    pub holdout: Vec<PathBuf>,
    /// Starting checkpoint; fresh initialization when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Token budget override; 0 passes the checkpoint through untouched.
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedArgs {
    /// seed_mean (needs --model) or hashed_ngram.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    /// Seed checkpoint whose embedding table seed_mean pools.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Hash buckets (embedding width) for hashed_ngram.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSON file holding one embedding per domain.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpcycleArgs {
    #[arg(long)]
    pub seed_ckpt: Option<PathBuf>,
    /// Expert as domain=checkpoint, in expert order (repeatable).
    #[arg(long)]
    pub expert_ckpt: Vec<String>,
    /// nexus (domain-projection) or linear.
    #[arg(long)]
    pub router: Option<String>,
    /// Domain-embedding JSON (required by nexus, rejected by linear).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Experts mixed per token.
    #[arg(long)]
    pub k: Option<usize>,
    /// Load-balance factor recorded for training.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Average the seed into non-FFN parameters along with experts.
    #[arg(long)]
    pub include_seed_in_merge: bool,
    /// Router initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseMergeArgs {
    #[arg(long)]
    pub seed_ckpt: Option<PathBuf>,
    /// Expert checkpoint directories (repeatable).
    #[arg(long)]
    pub expert_ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainMoeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub holdout: Vec<PathBuf>,
    /// proportional (default) or uniform over the corpus domains.
    #[arg(long)]
    pub mixture: Option<String>,
    /// Balance factor; defaults to the value recorded in the checkpoint.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtendArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// New expert as domain=checkpoint.
    #[arg(long)]
    pub new: Option<String>,
    /// Embedding JSON containing the new domain (nexus router only).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Fresh-router seed (linear router only).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub holdout: Vec<PathBuf>,
    /// Domain that receives half of all training sequences.
    #[arg(long)]
    pub new_domain: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    /// Windows per domain.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Window length in tokens.
    #[arg(long)]
    pub seq: Option<usize>,
    /// Block for the similarity report; defaults to the last.
    #[arg(long)]
    pub block: Option<usize>,
    /// Tag in the routing-stats file name.
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ---- CLI-over-file merging ----

impl GenDataArgs {
    fn or_file(self, f: Self) -> Self {
        GenDataArgs {
            spec: pick(self.spec, f.spec),
            seed: pick(self.seed, f.seed),
            out: pick(self.out, f.out),
        }
    }
}

impl TrainArgs {
    fn or_file(self, f: Self) -> Self {
        TrainArgs {
            config: pick(self.config, f.config),
            corpus: pick_vec(self.corpus, f.corpus),
            holdout: pick_vec(self.holdout, f.holdout),
            init: pick(self.init, f.init),
            tokens: pick(self.tokens, f.tokens),
            seed: pick(self.seed, f.seed),
            out: pick(self.out, f.out),
        }
    }
}

impl EmbedArgs {
    fn or_file(self, f: Self) -> Self {
        EmbedArgs {
            method: pick(self.method, f.method),
            corpus: pick_vec(self.corpus, f.corpus),
            model: pick(self.model, f.model),
            m: pick(self.m, f.m),
            seed: pick(self.seed, f.seed),
            out: pick(self.out, f.out),
        }
    }
}

impl UpcycleArgs {
    fn or_file(self, f: Self) -> Self {
        UpcycleArgs {
            seed_ckpt: pick(self.seed_ckpt, f.seed_ckpt),
            expert_ckpt: pick_vec(self.expert_ckpt, f.expert_ckpt),
            router: pick(self.router, f.router),
            embeddings: pick(self.embeddings, f.embeddings),
            k: pick(self.k, f.k),
            alpha: pick(self.alpha, f.alpha),
            include_seed_in_merge: self.include_seed_in_merge || f.include_seed_in_merge,
            seed: pick(self.seed, f.seed),
            out: pick(self.out, f.out),
        }
    }
}

impl DenseMergeArgs {
    fn or_file(self, f: Self) -> Self {
        DenseMergeArgs {
            seed_ckpt: pick(self.seed_ckpt, f.seed_ckpt),
            expert_ckpt: pick_vec(self.expert_ckpt, f.expert_ckpt),
            out: pick(self.out, f.out),
        }
    }
}

impl TrainMoeArgs {
    fn or_file(self, f: Self) -> Self {
        TrainMoeArgs {
            config: pick(self.config, f.config),
            ckpt: pick(self.ckpt, f.ckpt),
            corpus: pick_vec(self.corpus, f.corpus),
            holdout: pick_vec(self.holdout, f.holdout),
            mixture: pick(self.mixture, f.mixture),
            alpha: pick(self.alpha, f.alpha),
            tokens: pick(self.tokens, f.tokens),
            seed: pick(self.seed, f.seed),
            out: pick(self.out, f.out),
        }
    }
}

impl ExtendArgs {
    fn or_file(self, f: Self) -> Self {
        ExtendArgs {
            ckpt: pick(self.ckpt, f.ckpt),
            new: pick(self.new, f.new),
            embeddings: pick(self.embeddings, f.embeddings),
            seed: pick(self.seed, f.seed),
            out: pick(self.out, f.out),
        }
    }
}

impl FinetuneArgs {
    fn or_file(self, f: Self) -> Self {
        FinetuneArgs {
            config: pick(self.config, f.config),
            ckpt: pick(self.ckpt, f.ckpt),
            corpus: pick_vec(self.corpus, f.corpus),
            holdout: pick_vec(self.holdout, f.holdout),
            new_domain: pick(self.new_domain, f.new_domain),
            alpha: pick(self.alpha, f.alpha),
            tokens: pick(self.tokens, f.tokens),
            seed: pick(self.seed, f.seed),
            out: pick(self.out, f.out),
        }
    }
}

impl AnalyzeArgs {
    fn or_file(self, f: Self) -> Self {
        AnalyzeArgs {
            ckpt: pick(self.ckpt, f.ckpt),
            corpus: pick_vec(self.corpus, f.corpus),
            samples: pick(self.samples, f.samples),
            seq: pick(self.seq, f.seq),
            block: pick(self.block, f.block),
            tag: pick(self.tag, f.tag),
            seed: pick(self.seed, f.seed),
            out: pick(self.out, f.out),
        }
    }
}

// ---- dispatch ----

#[derive(Clone, Copy)]
enum Precision {
    F32,
    F64,
}

fn resolve_precision(flag: Option<&str>) -> Result<Precision> {
    let v = match flag {
        Some(s) => Some(s.to_string()),
        None => std::env::var("NEXUS_PRECISION").ok(),
    };
    match v.as_deref() {
        None | Some("32") => Ok(Precision::F32),
        Some("64") => Ok(Precision::F64),
        Some(other) => Err(Error::invalid(format!(
            "precision must be 32 or 64, got {other:?}"
        ))),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ws = Workspace::new(cli.workdir.clone());
    let exp = match &cli.experiment {
        Some(p) => Some(load_experiment(&ws.path(p))?),
        None => None,
    };
    let exp = exp.as_ref();
    let prec = resolve_precision(cli.precision.as_deref())?;
    macro_rules! with_prec {
        ($cmd:ident, $args:expr) => {
            match prec {
                Precision::F32 => $cmd::<f32>(&ws, $args),
                Precision::F64 => $cmd::<f64>(&ws, $args),
            }
        };
        ($cmd:ident, $args:expr, $extra:expr) => {
            match prec {
                Precision::F32 => $cmd::<f32>(&ws, $args, $extra),
                Precision::F64 => $cmd::<f64>(&ws, $args, $extra),
            }
        };
    }
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&ws, a.or_file(section(exp, "gen_data")?)),
        Command::TrainSeed(a) => {
            let a = a.or_file(section(exp, "train_seed")?);
            with_prec!(cmd_train, a, false)
        }
        Command::TrainExpert(a) => {
            let a = a.or_file(section(exp, "train_expert")?);
            with_prec!(cmd_train, a, true)
        }
        Command::Embed(a) => {
            let a = a.or_file(section(exp, "embed")?);
            with_prec!(cmd_embed, a)
        }
        Command::Upcycle(a) => {
            let a = a.or_file(section(exp, "upcycle")?);
            with_prec!(cmd_upcycle, a)
        }
        Command::DenseMerge(a) => {
            let a = a.or_file(section(exp, "dense_merge")?);
            with_prec!(cmd_dense_merge, a)
        }
        Command::TrainMoe(a) => {
            let a = a.or_file(section(exp, "train_moe")?);
            with_prec!(cmd_train_moe, a)
        }
        Command::Extend(a) => {
            let a = a.or_file(section(exp, "extend")?);
            with_prec!(cmd_extend, a)
        }
        Command::Finetune(a) => {
            let a = a.or_file(section(exp, "finetune")?);
            with_prec!(cmd_finetune, a)
        }
        Command::Analyze(a) => {
            let a = a.or_file(section(exp, "analyze")?);
            with_prec!(cmd_analyze, a)
        }
    }
}

// ---- shared helpers ----

/// Model and training tables of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn load_train_config(ws: &Workspace, path: &Option<PathBuf>) -> Result<TrainFileConfig> {
    match path {
        Some(p) => read_config_file(&ws.path(p)),
        None => Ok(TrainFileConfig::default()),
    }
}

fn load_corpora(ws: &Workspace, paths: &[PathBuf], flag: &str) -> Result<CorpusSet> {
    if paths.is_empty() {
        return Err(Error::invalid(format!("missing required {flag}")));
    }
    let mut set = CorpusSet::default();
    for p in paths {
        for d in read_corpus_path(ws.path(p))?.domains {
            if set.get(&d.domain_id).is_some() {
                return Err(Error::DuplicateDomain(d.domain_id));
            }
            set.domains.push(d);
        }
    }
    Ok(set)
}

fn load_holdout(ws: &Workspace, holdout: &[PathBuf], train: &CorpusSet) -> Result<CorpusSet> {
    if holdout.is_empty() {
        Ok(train.clone())
    } else {
        load_corpora(ws, holdout, "--holdout")
    }
}

/// Splits "domain=path" expert references.
fn parse_expert_ref(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((d, p)) if !d.is_empty() && !p.is_empty() => Ok((d.to_string(), PathBuf::from(p))),
        _ => Err(Error::invalid(format!(
            "expert reference {s:?} must be domain=checkpoint"
        ))),
    }
}

fn parse_router(s: Option<&str>) -> Result<RouterKind> {
    match s.unwrap_or("nexus") {
        "nexus" => Ok(RouterKind::DomainProjection),
        "linear" => Ok(RouterKind::Linear),
        other => Err(Error::invalid(format!(
            "unknown router {other:?} (expected nexus or linear)"
        ))),
    }
}

fn save_and_report_dense<T: Scalar>(out: &Path, model: &DenseModelState<T>) -> Result<String> {
    save_dense(out, model)?;
    let hash = checkpoint_hash(out)?;
    say!("checkpoint {}: hash {hash}", out.display());
    Ok(hash)
}

fn save_and_report_moe<T: Scalar>(out: &Path, moe: &MoEModelState<T>) -> Result<String> {
    save_moe(out, moe)?;
    let hash = checkpoint_hash(out)?;
    say!("checkpoint {}: hash {hash}", out.display());
    Ok(hash)
}

fn write_reports(out: &Path, report: &TrainReport) -> Result<()> {
    report.write_jsonl(&out.join("report.jsonl"))?;
    report.write_summary(&out.join("report.json"))?;
    Ok(())
}

fn print_eval_summary(report: &TrainReport) {
    if let (Some(first), Some(last)) = (report.evals.first(), report.evals.last()) {
        for (domain, after) in &last.perplexity {
            let before = first.perplexity.get(domain).copied().unwrap_or(f64::NAN);
            say!("heldout ppl {domain}: {before:.4} -> {after:.4}");
        }
    }
    say!(
        "final loss {:.6} after {} tokens in {:.1}s",
        report.final_loss, report.total_tokens, report.wall_clock_secs
    );
}

/// The effective training config: file values, then flag overrides.
fn resolve_train_cfg(file: &TrainFileConfig, tokens: Option<usize>, seed: Option<u64>, alpha: Option<f64>) -> TrainConfig {
    let mut cfg = file.train.clone().unwrap_or_default();
    if let Some(t) = tokens {
        cfg.total_tokens = t;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    cfg
}

// ---- commands ----

fn cmd_gen_data(ws: &Workspace, args: GenDataArgs) -> Result<()> {
    let spec_path = ws.path(require(args.spec, "--spec")?);
    let spec: CorpusSpec = read_config_file(&spec_path)?;
    let set = nexus_core::data::generate_corpora(&spec, args.seed.unwrap_or(0))?;
    let out = ws.path(require(args.out, "--out")?);
    std::fs::create_dir_all(&out)?;
    for d in &set.domains {
        let path = out.join(format!("{}.jsonl", d.domain_id));
        write_jsonl(d, &path)?;
        say!(
            "wrote {} docs ({} tokens) to {}",
            d.docs.len(),
            d.token_count(),
            path.display()
        );
    }
    Ok(())
}

fn cmd_train<T: Scalar>(ws: &Workspace, args: TrainArgs, require_init: bool) -> Result<()> {
    let file = load_train_config(ws, &args.config)?;
    let cfg = resolve_train_cfg(&file, args.tokens, args.seed, None);
    let out = ws.path(require(args.out, "--out")?);
    let mut model: DenseModelState<T> = match &args.init {
        Some(ckpt) => {
            let dir = ws.path(ckpt);
            say!("init checkpoint hash: {}", checkpoint_hash(&dir)?);
            load_dense(&dir)?
        }
        None => {
            if require_init {
                return Err(Error::invalid(
                    "train-expert requires --init with the seed checkpoint",
                ));
            }
            let mc = file.model.clone().ok_or_else(|| {
                Error::invalid("fresh initialization needs a [model] table in --config")
            })?;
            DenseModelState::init(mc, cfg.seed)?
        }
    };
    if cfg.total_tokens == 0 {
        save_and_report_dense(&out, &model)?;
        say!("token budget 0: checkpoint passed through untrained");
        return Ok(());
    }
    let corpus = load_corpora(ws, &args.corpus, "--corpus")?;
    let holdout = load_holdout(ws, &args.holdout, &corpus)?;
    let mixture = MixtureSpec::proportional(&corpus.ids());
    let report = train_dense(&mut model, &corpus, &holdout, &mixture, &cfg)?;
    save_and_report_dense(&out, &model)?;
    write_reports(&out, &report)?;
    print_eval_summary(&report);
    Ok(())
}

fn cmd_embed<T: Scalar>(ws: &Workspace, args: EmbedArgs) -> Result<()> {
    let method = match args.method.as_deref().unwrap_or("seed_mean") {
        "seed_mean" => EmbedMethod::SeedMean,
        "hashed_ngram" => EmbedMethod::HashedNgram,
        other => {
            return Err(Error::invalid(format!(
                "unknown method {other:?} (expected seed_mean or hashed_ngram)"
            )))
        }
    };
    let corpora = load_corpora(ws, &args.corpus, "--corpus")?;
    let out = ws.path(require(args.out, "--out")?);
    let seed = args.seed.unwrap_or(0);
    let model: Option<DenseModelState<T>> = match method {
        EmbedMethod::SeedMean => {
            let ckpt = require(args.model, "--model (seed_mean pools its embedding table)")?;
            Some(load_dense(&ws.path(ckpt))?)
        }
        EmbedMethod::HashedNgram => None,
    };
    let mut embeds: Vec<DomainEmbedding> = Vec::new();
    for d in &corpora.domains {
        let e = match method {
            EmbedMethod::SeedMean => embed_seed_mean(model.as_ref().expect("loaded above"), d, seed)?,
            EmbedMethod::HashedNgram => {
                embed_hashed_ngram(d, args.m.unwrap_or(DEFAULT_NGRAM_BUCKETS))?
            }
        };
        say!("embedded {} ({} docs, m={})", d.domain_id, e.sample_count, e.m);
        embeds.push(e);
    }
    write_embeddings(&out, &embeds)?;
    say!("wrote {} embeddings to {}", embeds.len(), out.display());
    Ok(())
}

fn cmd_upcycle<T: Scalar>(ws: &Workspace, args: UpcycleArgs) -> Result<()> {
    let seed_model: DenseModelState<T> = load_dense(&ws.path(require(args.seed_ckpt, "--seed-ckpt")?))?;
    if args.expert_ckpt.is_empty() {
        return Err(Error::invalid("missing required --expert-ckpt domain=dir"));
    }
    let mut experts = Vec::with_capacity(args.expert_ckpt.len());
    for s in &args.expert_ckpt {
        let (domain, path) = parse_expert_ref(s)?;
        experts.push(DomainExpert {
            domain,
            model: load_dense::<T>(&ws.path(path))?,
        });
    }
    let router = parse_router(args.router.as_deref())?;
    let domain_matrix = match router {
        RouterKind::DomainProjection => {
            let file = require(args.embeddings, "--embeddings (the nexus router projects them)")?;
            let all = read_embeddings(&ws.path(file))?;
            let chosen: Vec<DomainEmbedding> = experts
                .iter()
                .map(|e| {
                    all.iter()
                        .find(|d| d.domain_id == e.domain)
                        .cloned()
                        .ok_or_else(|| {
                            Error::invalid(format!(
                                "embeddings file has no entry for domain {:?}",
                                e.domain
                            ))
                        })
                })
                .collect::<Result<_>>()?;
            Some(embedding_matrix::<T>(&chosen)?)
        }
        RouterKind::Linear => {
            if args.embeddings.is_some() {
                return Err(Error::invalid(
                    "--embeddings only applies to the nexus router",
                ));
            }
            None
        }
    };
    let opts = UpcycleOptions {
        router,
        k: args.k.unwrap_or(1),
        lb_factor: args.alpha.unwrap_or(0.05),
        include_seed_in_merge: args.include_seed_in_merge,
        domain_matrix,
        seed: args.seed.unwrap_or(0),
    };
    let moe = upcycle(&seed_model, &experts, &opts)?;
    say!(
        "upcycled {} experts, router {}, k={}",
        moe.n_experts(),
        moe.router_kind(),
        moe.k()
    );
    save_and_report_moe(&ws.path(require(args.out, "--out")?), &moe)?;
    Ok(())
}

fn cmd_dense_merge<T: Scalar>(ws: &Workspace, args: DenseMergeArgs) -> Result<()> {
    let seed_model: DenseModelState<T> = load_dense(&ws.path(require(args.seed_ckpt, "--seed-ckpt")?))?;
    if args.expert_ckpt.is_empty() {
        return Err(Error::invalid("missing required --expert-ckpt"));
    }
    let experts: Vec<DomainExpert<T>> = args
        .expert_ckpt
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(DomainExpert {
                domain: format!("expert{i}"),
                model: load_dense::<T>(&ws.path(p))?,
            })
        })
        .collect::<Result<_>>()?;
    let merged = dense_merge(&seed_model, &experts)?;
    say!("merged {} experts with the seed", experts.len());
    save_and_report_dense(&ws.path(require(args.out, "--out")?), &merged)?;
    Ok(())
}

fn cmd_train_moe<T: Scalar>(ws: &Workspace, args: TrainMoeArgs) -> Result<()> {
    let mut moe: MoEModelState<T> = load_moe(&ws.path(require(args.ckpt, "--ckpt")?))?;
    let file = load_train_config(ws, &args.config)?;
    let mut cfg = resolve_train_cfg(&file, args.tokens, args.seed, args.alpha);
    if args.alpha.is_none() && file.train.is_none() {
        cfg.alpha = moe.lb_factor;
    }
    let out = ws.path(require(args.out, "--out")?);
    if cfg.total_tokens == 0 {
        save_and_report_moe(&out, &moe)?;
        say!("token budget 0: checkpoint passed through untrained");
        return Ok(());
    }
    let corpus = load_corpora(ws, &args.corpus, "--corpus")?;
    let holdout = load_holdout(ws, &args.holdout, &corpus)?;
    let mixture = match args.mixture.as_deref().unwrap_or("proportional") {
        "proportional" => MixtureSpec::proportional(&corpus.ids()),
        "uniform" => MixtureSpec::uniform(&corpus.ids()),
        other => {
            return Err(Error::invalid(format!(
                "unknown mixture {other:?} (expected proportional or uniform)"
            )))
        }
    };
    let report = train_moe(&mut moe, &corpus, &holdout, &mixture, &cfg)?;
    moe.lb_factor = cfg.alpha;
    save_and_report_moe(&out, &moe)?;
    write_reports(&out, &report)?;
    print_eval_summary(&report);
    Ok(())
}

fn cmd_extend<T: Scalar>(ws: &Workspace, args: ExtendArgs) -> Result<()> {
    let moe: MoEModelState<T> = load_moe(&ws.path(require(args.ckpt, "--ckpt")?))?;
    let (domain, path) = parse_expert_ref(&require(args.new, "--new domain=checkpoint")?)?;
    let new = DomainExpert {
        domain: domain.clone(),
        model: load_dense::<T>(&ws.path(path))?,
    };
    let extended = match moe.router_kind() {
        RouterKind::DomainProjection => {
            let file = require(args.embeddings, "--embeddings (nexus appends the new row)")?;
            let all = read_embeddings(&ws.path(file))?;
            let emb = all
                .iter()
                .find(|d| d.domain_id == domain)
                .ok_or_else(|| {
                    Error::invalid(format!("embeddings file has no entry for domain {domain:?}"))
                })?;
            extend_moe(&moe, &new, &emb.vector)?
        }
        RouterKind::Linear => {
            say!(
                "router reset: fresh linear scores over {} experts",
                moe.n_experts() + 1
            );
            extend_moe_linear(&moe, &new, args.seed.unwrap_or(0))?
        }
    };
    say!(
        "extended {} -> {} experts (new expert {:?} at index {})",
        moe.n_experts(),
        extended.n_experts(),
        domain,
        extended.n_experts() - 1
    );
    save_and_report_moe(&ws.path(require(args.out, "--out")?), &extended)?;
    Ok(())
}

fn cmd_finetune<T: Scalar>(ws: &Workspace, args: FinetuneArgs) -> Result<()> {
    let mut moe: MoEModelState<T> = load_moe(&ws.path(require(args.ckpt, "--ckpt")?))?;
    let file = load_train_config(ws, &args.config)?;
    let mut cfg = resolve_train_cfg(&file, args.tokens, args.seed, args.alpha);
    if args.alpha.is_none() && file.train.is_none() {
        cfg.alpha = moe.lb_factor;
    }
    let new_domain = require(args.new_domain, "--new-domain")?;
    let out = ws.path(require(args.out, "--out")?);
    if cfg.total_tokens == 0 {
        save_and_report_moe(&out, &moe)?;
        say!("token budget 0: checkpoint passed through untrained");
        return Ok(());
    }
    let corpus = load_corpora(ws, &args.corpus, "--corpus")?;
    let holdout = load_holdout(ws, &args.holdout, &corpus)?;
    let report = finetune_extended(&mut moe, &corpus, &holdout, &new_domain, &cfg)?;
    moe.lb_factor = cfg.alpha;
    save_and_report_moe(&out, &moe)?;
    write_reports(&out, &report)?;
    say!(
        "new-domain sequence fraction: {:.4}",
        report.domain_fraction(&new_domain)
    );
    print_eval_summary(&report);
    Ok(())
}

fn cmd_analyze<T: Scalar>(ws: &Workspace, args: AnalyzeArgs) -> Result<()> {
    let moe: MoEModelState<T> = load_moe(&ws.path(require(args.ckpt, "--ckpt")?))?;
    let corpora = load_corpora(ws, &args.corpus, "--corpus")?;
    let out = ws.path(require(args.out, "--out")?);
    std::fs::create_dir_all(&out)?;
    let tag = args.tag.unwrap_or_else(|| "eval".to_string());
    let stats = collect_routing_stats(
        &moe,
        &corpora,
        args.seq.unwrap_or(64),
        args.samples.unwrap_or(nexus_core::analysis::DEFAULT_SAMPLES_PER_DOMAIN),
        args.seed.unwrap_or(0),
    )?;
    let csv_path = out.join(routing_stats_file_name(&tag));
    write_routing_csv(&stats, &csv_path)?;
    write_routing_json(&stats, &out.join(format!("routing_stats_{tag}.json")))?;
    say!("routing stats: {}", csv_path.display());
    for domain in stats.domains.keys() {
        if let Some(e) = stats.argmax_dispatch(domain) {
            let matching = moe
                .expert_domains
                .iter()
                .position(|d| d == domain)
                .is_some_and(|m| m == e);
            let fracs = stats.cross_block_dispatch(domain).expect("domain exists");
            let probs = stats.cross_block_mean_prob(domain).expect("domain exists");
            say!(
                "domain {domain}: expert {e} takes {:.1}% of tokens (mean prob {:.3}){}",
                100.0 * fracs[e],
                probs[e],
                if matching { ", matching its expert" } else { "" }
            );
        }
    }
    match similarity_report(&moe, args.block) {
        Ok(report) => {
            let path = out.join(similarity_file_name(report.block));
            write_similarity_json(&report, &path)?;
            say!(
                "similarity report (block {}): rank correlation {:.3} -> {}",
                report.block,
                report.rank_correlation,
                path.display()
            );
        }
        Err(Error::UnsupportedRouter(_)) => {
            say!("similarity report skipped: linear router has no domain embeddings");
        }
        Err(e) => return Err(e),
    }
    Ok(())
}
