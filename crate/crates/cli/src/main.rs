use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use hgcl::pipeline::{load_config, run_sweep, threads_from_env, Pipeline, RunOptions, Stage, StageStatus};

#[derive(Parser)]
#[command(name = "hgcl", version, about = "Hierarchical graph contrastive learning for recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pre-training on the user-item graph.
    Pretrain(Args),
    /// t-SNE projection of pre-trained item embeddings.
    Reduce(Args),
    /// Polar partition of the projected items.
    Cluster(Args),
    /// Joint training on the user-item and user-cluster graphs.
    Finetune(Args),
    /// Top-K metrics and connecting-strength statistics.
    Evaluate(Args),
    /// Reduce through evaluate for every (rho, theta, perplexity) grid cell.
    Sweep(Args),
    /// All five stages in order.
    All(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Rerun stages even when their inputs are unchanged.
    #[arg(long)]
    force: bool,
    /// Overrides the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Command {
    fn args(&self) -> &Args {
        match self {
            Command::Pretrain(a)
            | Command::Reduce(a)
            | Command::Cluster(a)
            | Command::Finetune(a)
            | Command::Evaluate(a)
            | Command::Sweep(a)
            | Command::All(a) => a,
        }
    }

    fn stages(&self) -> Vec<Stage> {
        match self {
            Command::Pretrain(_) => vec![Stage::Pretrain],
            Command::Reduce(_) => vec![Stage::Reduce],
            Command::Cluster(_) => vec![Stage::Cluster],
            Command::Finetune(_) => vec![Stage::Finetune],
            Command::Evaluate(_) => vec![Stage::Evaluate],
            Command::All(_) => Stage::ALL.to_vec(),
            Command::Sweep(_) => Vec::new(),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let args = cli.command.args();
    let mut cfg = load_config(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    let opts = RunOptions {
        force: args.force,
        threads: threads_from_env(),
    };
    if let Command::Sweep(_) = cli.command {
        let rows = run_sweep(&cfg, opts)?;
        for r in rows {
            println!(
                "rho={} theta={} perplexity={} recall={:.5} ndcg={:.5}",
                r.rho, r.theta, r.perplexity, r.recall, r.ndcg
            );
        }
        return Ok(());
    }
    let mut pipeline = Pipeline::new(cfg, opts)?;
    for (stage, status) in pipeline.run(&cli.command.stages())? {
        let what = match status {
            StageStatus::Ran => "done",
            StageStatus::Skipped => "up to date",
        };
        println!("{}: {what}", stage.name());
    }
    println!("artifacts in {}", pipeline.out_dir().display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
