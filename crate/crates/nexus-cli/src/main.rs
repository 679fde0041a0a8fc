//! Pipeline driver: one subcommand per phase, composable from the shell.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 training
//! divergence. Every command is deterministic given `--seed`; checkpoint
//! hashes are printed so reruns can be compared. Relative paths resolve
//! against `--workdir`, and an optional `--experiment` TOML/JSON file
//! supplies per-subcommand flag defaults (explicit flags win).

mod experiment;
mod ops;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use nexus_core::Error;
use ops::{
    AnalyzeArgs, DenseMergeArgs, EmbedArgs, ExtendArgs, FinetuneArgs, GenDataArgs, TrainArgs,
    TrainMoeArgs,
};

#[derive(Parser, Debug)]
#[command(name = "nexus", version, about = "Domain-expert MoE pipeline")]
struct Cli {
    /// Base directory; every relative path flag resolves against it.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Working precision in bits; the NEXUS_PRECISION environment variable
    /// sets the default (32 when unset).
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// TOML or JSON file whose sections (e.g. [train_moe]) default any flag
    /// of the matching subcommand.
    #[arg(long, global = true)]
    experiment: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic domain corpora from a grammar spec.
    GenData(GenDataArgs),
    /// Train (or pass through) a dense seed model.
    TrainSeed(TrainArgs),
    /// Branch a dense domain expert from a seed checkpoint.
    TrainExpert(TrainArgs),
    /// Compute frozen domain embeddings for corpora.
    Embed(EmbedArgs),
    /// Assemble an MoE from a seed and dense experts.
    Upcycle(UpcycleArgsWrap),
    /// Average seed and experts into one dense model (baseline).
    DenseMerge(DenseMergeArgs),
    /// Continue training an upcycled MoE on a domain mixture.
    TrainMoe(TrainMoeArgs),
    /// Append a new expert (and domain embedding) to a trained MoE.
    Extend(ExtendArgs),
    /// Finetune an extended MoE, half on the new domain.
    Finetune(FinetuneArgs),
    /// Export routing statistics and embedding-similarity reports.
    Analyze(AnalyzeArgs),
}

// clap needs a concrete type here; the alias keeps Command readable.
type UpcycleArgsWrap = ops::UpcycleArgs;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match ops::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            use std::io::Write;
            let _ = writeln!(std::io::stderr(), "error: {e}");
            if matches!(e, Error::Diverged { .. }) {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
