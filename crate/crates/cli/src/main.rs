use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seqregen::pipeline::{self, PipelineConfig, Variant};

/// Regenerate and personalise sequential-recommendation training data.
#[derive(Debug, Parser)]
#[command(name = "seqregen", version)]
struct Cli {
    /// TOML pipeline config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Config override, e.g. `--set target.embed_dim=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mine patterns and pre-training pairs from the training split.
    Mine,
    /// Pre-train the regenerator.
    Pretrain,
    /// Regenerate the training split.
    Regenerate,
    /// Train one target-model variant and report its metrics.
    Train {
        #[arg(long, default_value = "dr4sr_plus")]
        variant: Variant,
    },
    /// Evaluate a trained target checkpoint.
    Evaluate {
        #[arg(long, default_value = "dr4sr_plus")]
        variant: Variant,
        /// Checkpoint to evaluate instead of `<out>/train/<variant>/model.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Every stage for the configured seed.
    Run,
    /// All variants over `compare.seeds`, summarised as mean ± std.
    Compare,
    /// Print the effective config.
    Config,
}

fn effective_config(cli: &Cli) -> seqregen::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.with_overrides(&cli.overrides)
}

fn run(cli: &Cli) -> seqregen::Result<()> {
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::Mine => {
            let s = pipeline::cmd_mine(&cfg)?;
            println!("patterns = {}\npairs = {}", s.num_patterns, s.num_pairs);
        }
        Command::Pretrain => {
            let r = pipeline::cmd_pretrain(&cfg)?;
            println!("epochs = {}\nbest_epoch = {}\nfinal_train_loss = {:.6}", r.epochs_run, r.best_epoch, r.final_train_loss);
        }
        Command::Regenerate => {
            let s = pipeline::cmd_regenerate(&cfg)?;
            println!("patterns = {}\nmean_length = {:.4}", s.patterns, s.mean_length);
        }
        Command::Train { variant } => {
            let s = pipeline::cmd_train(&cfg, *variant)?;
            print!("{}", s.report.to_text());
            if let Some(w) = s.mean_weight {
                println!("mean_weight = {w:.6}");
            }
        }
        Command::Evaluate { variant, checkpoint } => {
            print!("{}", pipeline::cmd_evaluate(&cfg, *variant, checkpoint.as_deref())?.to_text());
        }
        Command::Run => {
            for s in pipeline::run_all(&cfg)? {
                println!("{:<12} test/ndcg@10 = {:.6}", s.variant.name(), s.report.get("test/ndcg@10").unwrap_or(f64::NAN));
            }
        }
        Command::Compare => print!("{}", pipeline::cmd_compare(&cfg)?.table()),
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
