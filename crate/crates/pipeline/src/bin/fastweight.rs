use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fastweight_pipeline::alloc::CountingAllocator;
use fastweight_pipeline::report::emit_report;
use fastweight_pipeline::run::{run_steps, Step};
use fastweight_pipeline::{Ablation, RunConfig};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

#[derive(Parser)]
#[command(name = "fastweight", about = "Prototype fast-weight retrieval: memory construction, retrieval training and reports")]
struct Cli {
    /// JSON run configuration; the desk preset when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the full-scale preset instead of the desk preset.
    #[arg(long, global = true)]
    full_scale: bool,
    /// Output directory; defaults to the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and partition the synthetic corpus.
    Generate,
    /// Build, merge and certify the prototype memory.
    Phase1,
    /// Train and evaluate retrieval, including the support-size sweep.
    Phase2,
    /// Support ridge, nearest centroid and the query-ridge reference.
    Baselines,
    /// Ablation variants (all when none are given).
    Ablate { variants: Vec<String> },
    /// Motif null calibration, screening, power and threshold calibration.
    Motifs,
    /// Approximation, task and generalisation terms of the risk bound.
    Riskbound,
    /// Every stage, including the seed sweep and ablations.
    Report,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = match (&cli.config, cli.full_scale) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, true) => RunConfig::full_scale(),
        (None, false) => RunConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    let mut ablations = Vec::new();
    let steps: Vec<Step> = match &cli.command {
        Command::Generate => vec![Step::Generate],
        Command::Phase1 => vec![Step::Phase1],
        Command::Phase2 => vec![Step::Phase2, Step::FewShot],
        Command::Baselines => vec![Step::Baselines],
        Command::Ablate { variants } => {
            for v in variants {
                match Ablation::parse(v) {
                    Some(a) => ablations.push(a),
                    None => bail!("unknown ablation {v:?}"),
                }
            }
            if ablations.is_empty() {
                ablations = Ablation::ALL.to_vec();
            }
            vec![Step::Ablate]
        }
        Command::Motifs => vec![Step::Motifs],
        Command::Riskbound => vec![Step::Riskbound],
        Command::Report => {
            ablations = Ablation::ALL.to_vec();
            Step::ALL.to_vec()
        }
    };
    let run = run_steps(&cfg, &steps, &ablations)?;
    let dir = cfg.output_dir.clone();
    let files = emit_report(&cfg, &run, &dir).with_context(|| format!("writing report to {}", dir.display()))?;
    println!("config {} wrote {} files to {}", cfg.hash(), files.len(), dir.display());
    for f in files {
        println!("  {f}");
    }
    Ok(())
}
