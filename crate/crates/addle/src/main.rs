use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use addle::config::ExperimentConfig;
use addle::model::Mode;
use addle::pipeline;
use addle::Error;

const AFTER_HELP: &str = "\
CONFIG DEFAULTS (every key is optional; TOML):
    master_seed = 1
    [simulator]  num_samples = 4000, num_features = 16, num_classes = 4,
                 num_raters = 8, group_size = 1, feature_jitter = 0.1,
                 assignment = \"uniform\" | \"power-law\", power_law_exponent = 1.0,
                 threshold_sigma = 0.5, feature_sigma = 0.3, noise_sigma = 0.3,
                 oracle_rater = 0, nonlinear_mix = 0.0
    [splits]     train = 0.7, val_stop = 0.1, val_gold = 0.1, test = 0.1
    [backbone]   hidden = [32, 32], conv = { channels, kernel } (off by default)
    [[backbone.injections]]  layer = 1, mode = \"dense\" | \"spatial\"
    [latent]     dim = 10, sigma2 = 1.0
    [train]      learning_rate = 0.01, batch_size = 64, epochs = 150,
                 patience = 20, optimizer = \"momentum\" | \"sgd\", momentum = 0.9,
                 modes = [\"addle\", \"baseline\", \"multi-head\", \"jlsl\"]
    [finetune]   enabled = true, steps = 60, initial_step = 0.1
    [eval]       fpr_max = 0.30, greedy_metric = \"jt-index\", sweep_points = 9

EXIT CODES: 0 success, 1 configuration error, 2 runtime failure.";

/// Experiment harness for per-rater latent-embedding models trained on
/// single-rater ordinal labels.
#[derive(Parser)]
#[command(name = "addle", version, after_long_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML; missing keys take defaults)
    #[arg(long)]
    config: PathBuf,
    /// Directory for all artifacts
    #[arg(long)]
    out: PathBuf,
    /// Override the config's master seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset, metadata, and the four splits
    GenData(Common),
    /// Train one mode (or every enabled mode) on the train split
    Train {
        #[command(flatten)]
        common: Common,
        /// addle | baseline | multi-head | jlsl (default: all enabled modes)
        #[arg(long)]
        mode: Option<String>,
    },
    /// Fine-tune each rater's latent code with shared weights frozen
    FinetuneRaters(Common),
    /// Greedily select raters on the gold validation split
    GreedySelect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate trained models on the test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Latent-space analysis: interpolation, PCA, sweeps, norms
    AnalyzeLatent(Common),
    /// Full pipeline: gen-data, train, finetune, select, eval, analyze
    Run(Common),
}

fn load_config(common: &Common) -> addle::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(cfg)
}

fn selected_modes(cfg: &ExperimentConfig, flag: &Option<String>) -> addle::Result<Vec<Mode>> {
    match flag {
        Some(name) => Ok(vec![Mode::from_str(name)?]),
        None => Ok(cfg.train.modes.clone()),
    }
}

fn run(cli: Cli) -> addle::Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            pipeline::gen_data(&cfg, &common.out)?;
            println!("dataset written to {}", common.out.display());
        }
        Command::Train { common, mode } => {
            let cfg = load_config(&common)?;
            for mode in selected_modes(&cfg, &mode)? {
                pipeline::train_stage(&cfg, &common.out, mode)?;
                println!("trained {}", mode.as_str());
            }
        }
        Command::FinetuneRaters(common) => {
            let cfg = load_config(&common)?;
            let records = pipeline::finetune_stage(&cfg, &common.out)?;
            for rec in &records {
                if rec.skipped {
                    eprintln!(
                        "warning: rater {} has no training samples; code left unchanged",
                        rec.rater
                    );
                }
            }
            println!(
                "fine-tuned {} rater codes",
                records.iter().filter(|r| !r.skipped).count()
            );
        }
        Command::GreedySelect { common, mode } => {
            let cfg = load_config(&common)?;
            for mode in selected_modes(&cfg, &mode)? {
                if mode == Mode::Baseline {
                    continue;
                }
                let set = pipeline::greedy_stage(&cfg, &common.out, mode)?;
                println!(
                    "{}: selected raters {:?} ({} = {:.4})",
                    mode.as_str(),
                    set.raters,
                    set.metric,
                    set.step_scores.last().copied().unwrap_or(f64::NAN)
                );
            }
        }
        Command::Eval { common, mode } => {
            let cfg = load_config(&common)?;
            let modes = selected_modes(&cfg, &mode)?;
            let reports = pipeline::eval_stage(&cfg, &common.out, &modes)?;
            for r in &reports {
                println!("{}: JT {:.4}", r.model, r.jt_index);
            }
        }
        Command::AnalyzeLatent(common) => {
            let cfg = load_config(&common)?;
            let summary = pipeline::analyze_stage(&cfg, &common.out)?;
            println!(
                "worst rater {} (JT {:.4}), best rater {} (JT {:.4}); norms in [{:.3}, {:.3}]",
                summary.worst_rater,
                summary.worst_jt,
                summary.best_rater,
                summary.best_jt,
                summary.norm_min,
                summary.norm_max
            );
        }
        Command::Run(common) => {
            let cfg = load_config(&common)?;
            let manifest = pipeline::run_pipeline(&cfg, &common.out)?;
            println!(
                "pipeline complete: {} artifacts in {}",
                manifest.artifacts.len(),
                common.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match e {
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
