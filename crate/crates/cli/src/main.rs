//! `mdrec`: prepare data, train, evaluate, analyze and run recipes from one
//! TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdrec::config::ExperimentConfig;
use mdrec::experiment::{
    cmd_analyze, cmd_evaluate, cmd_prepare, cmd_recipe, cmd_train, AnalyzeOptions, EvaluateOptions,
    Recipe, TrainOptions,
};
use mdrec::pipeline::Role;

#[derive(Parser, Debug)]
#[command(name = "mdrec", version, about = "Multi-domain text-based sequential recommendation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.batch_size=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter and split the corpus; write manifest, vocabulary and stats.
    Prepare,
    /// Train on a prepared manifest.
    Train {
        /// Continue from the saved training state.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps (resumable).
        #[arg(long)]
        halt_at: Option<u64>,
    },
    /// Score a checkpoint and write JSON and CSV reports.
    Evaluate {
        /// Checkpoint directory (default: the run's best checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Add Same/Mix/Diff rows.
        #[arg(long)]
        partitions: bool,
        /// Require the test domains to be disjoint from the training domains.
        #[arg(long)]
        zero_shot: bool,
        #[arg(long, value_enum, default_value = "test")]
        role: RoleArg,
        /// Comma-separated cutoffs, e.g. `1,10`.
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
        /// Report file stem.
        #[arg(long, default_value = "test")]
        name: String,
    },
    /// Popularity buckets, exposure, relative improvement and embedding dump.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Baseline checkpoint for the relative-improvement table.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Run a named multi-run study.
    Recipe {
        #[arg(value_enum)]
        name: RecipeArg,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum RoleArg {
    Train,
    Valid,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
enum RecipeArg {
    MixStrategyStudy,
    PartitionStudy,
    ColdstartStudy,
    PeftStudy,
    AblationStudy,
}

impl From<RecipeArg> for Recipe {
    fn from(r: RecipeArg) -> Self {
        match r {
            RecipeArg::MixStrategyStudy => Recipe::MixStrategyStudy,
            RecipeArg::PartitionStudy => Recipe::PartitionStudy,
            RecipeArg::ColdstartStudy => Recipe::ColdstartStudy,
            RecipeArg::PeftStudy => Recipe::PeftStudy,
            RecipeArg::AblationStudy => Recipe::AblationStudy,
        }
    }
}

fn load_config(common: &Common, extra: &[String]) -> mdrec::Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    match &common.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::from_toml_str("", &overrides),
    }
}

fn run(cli: Cli) -> mdrec::Result<()> {
    match cli.command {
        Command::Prepare => {
            let cfg = load_config(&cli.common, &[])?;
            let out = cmd_prepare(&cfg)?;
            println!(
                "{} users, {} items, {} interactions; {} test instances -> {}",
                out.stats.users,
                out.stats.items,
                out.stats.interactions,
                out.stats.test_instances,
                out.dir.display()
            );
        }
        Command::Train { resume, halt_at } => {
            let cfg = load_config(&cli.common, &[])?;
            let s = cmd_train(&cfg, &TrainOptions { resume, halt_at })?;
            println!(
                "steps {} (finished: {}), best step {}, best valid recall@10 {}, trainable parameters {}",
                s.steps,
                s.finished,
                s.best_step,
                s.best_valid_recall_at_10.map_or("-".into(), |v| format!("{v:.5}")),
                s.trainable_parameters
            );
        }
        Command::Evaluate {
            checkpoint,
            partitions,
            zero_shot,
            role,
            cutoffs,
            name,
        } => {
            let extra: Vec<String> = cutoffs
                .map(|c| {
                    let list: Vec<String> = c.iter().map(usize::to_string).collect();
                    vec![format!("eval.cutoffs=[{}]", list.join(","))]
                })
                .unwrap_or_default();
            let cfg = load_config(&cli.common, &extra)?;
            let role = match role {
                RoleArg::Train => Role::Train,
                RoleArg::Valid => Role::Valid,
                RoleArg::Test => Role::Test,
            };
            let report = cmd_evaluate(
                &cfg,
                &EvaluateOptions {
                    checkpoint,
                    role,
                    partitions,
                    zero_shot,
                    name,
                },
            )?;
            for (k, v) in &report.aggregate.metrics {
                println!("{k}\t{v:.5}");
            }
        }
        Command::Analyze { checkpoint, compare } => {
            let cfg = load_config(&cli.common, &[])?;
            let out = cmd_analyze(&cfg, &AnalyzeOptions { checkpoint, compare })?;
            for row in &out.buckets {
                println!(
                    "{}\t{}\t{}",
                    row.bucket,
                    row.count,
                    row.recall_at_10.map_or("-".into(), |v| format!("{v:.5}"))
                );
            }
        }
        Command::Recipe { name } => {
            let cfg = load_config(&cli.common, &[])?;
            let report = cmd_recipe(&cfg, name.into())?;
            println!("{} cells", report.rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
