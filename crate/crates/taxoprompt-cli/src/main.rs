//! Config-driven command line for the prompt-optimization pipeline.
//!
//! Exit codes: 0 success, 2 config error, 4 stale artifact, 3 any other
//! stage failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use taxoprompt::artifacts::filenames;
use taxoprompt::model::{category_stats, DatasetRole};
use taxoprompt::pipeline::{
    render_error_reduction, render_eval_report, render_selection_table, render_token_summary,
    Ablation, Pipeline, PipelineError, PromptKind, ShortCircuit,
};
use taxoprompt::templates::TemplateSet;
use taxoprompt::PipelineConfig;

#[derive(Parser)]
#[command(
    name = "taxoprompt",
    version,
    about = "Collect an LLM's failed traces, build an error taxonomy, and append targeted guidance to the system prompt"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory of template overrides (falls back per file to the built-in
    /// templates).
    #[arg(long)]
    templates_dir: Option<PathBuf>,
    /// Override the maximum number of in-flight attempts.
    #[arg(long)]
    max_parallel: Option<usize>,
    /// Override the sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    RawSampling,
    DirectCategories,
    ShortGuidance,
}

impl From<AblationArg> for Ablation {
    fn from(arg: AblationArg) -> Self {
        match arg {
            AblationArg::RawSampling => Ablation::RawSampling,
            AblationArg::DirectCategories => Ablation::DirectCategories,
            AblationArg::ShortGuidance => Ablation::ShortGuidance,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptArg {
    Base,
    Optimized,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: collect, taxonomize, select, guide, assemble.
    Optimize {
        #[command(flatten)]
        common: CommonArgs,
        /// Pipeline variant: raw-sampling, direct-categories, or
        /// short-guidance.
        #[arg(long)]
        ablation: Option<AblationArg>,
    },
    /// Collect failed traces for the base prompt.
    Collect {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Build the error taxonomy from the persisted failure log.
    Taxonomize {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Rank error categories and persist the selection table.
    Select {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate guidance and assemble the optimized prompt.
    Guide {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ablation: Option<AblationArg>,
    },
    /// Evaluate a prompt over several full passes of a dataset.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Which prompt to evaluate.
        #[arg(long, value_enum, default_value_t = PromptArg::Optimized)]
        prompt: PromptArg,
        /// Which dataset split to evaluate on.
        #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
        split: SplitArg,
        /// Full passes over the dataset.
        #[arg(long, default_value_t = 3)]
        runs: u32,
    },
    /// Compare per-category failure counts before and after optimization.
    ErrorReduction {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of top original categories to compare.
        #[arg(long, default_value_t = 6)]
        top_n: usize,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Optimize { common, .. }
            | Command::Collect { common }
            | Command::Taxonomize { common }
            | Command::Select { common }
            | Command::Guide { common, .. }
            | Command::Eval { common, .. }
            | Command::ErrorReduction { common, .. } => common,
        }
    }
}

fn build_pipeline(common: &CommonArgs) -> Result<Pipeline, PipelineError> {
    let mut config = PipelineConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if let Some(max_parallel) = common.max_parallel {
        config.execution.max_parallel = max_parallel.max(1);
    }
    if let Some(seed) = common.seed {
        config.run.seed = seed;
    }
    let templates = match &common.templates_dir {
        Some(dir) => TemplateSet::with_overrides(dir).map_err(|e| {
            PipelineError::Config(taxoprompt::config::ConfigError::Invalid(e.to_string()))
        })?,
        None => TemplateSet::embedded(),
    };
    Ok(Pipeline::new(config, templates))
}

fn run(command: Command) -> Result<(), PipelineError> {
    let pipeline = build_pipeline(command.common())?;
    let out_dir = pipeline.config.out_dir.clone();
    match command {
        Command::Optimize { ablation, .. } => {
            let outcome = pipeline.cmd_optimize(ablation.map(Into::into).unwrap_or_default())?;
            match outcome.short_circuit {
                Some(ShortCircuit::ZeroFailures) => {
                    println!(
                        "no failed traces collected; the optimized prompt equals the base prompt"
                    );
                }
                Some(ShortCircuit::NoCategoriesSelected) => {
                    println!("no category survived the problem-count filter; the optimized prompt equals the base prompt");
                }
                None => {
                    println!(
                        "optimized prompt assembled with {} guidance block(s)",
                        outcome.artifact.guidance_items.len()
                    );
                }
            }
            print!("{}", render_token_summary(&pipeline.ledger));
            println!(
                "assembled prompt: {}",
                out_dir.join(filenames::OPTIMIZED_PROMPT).display()
            );
        }
        Command::Collect { .. } => {
            let log = pipeline.cmd_collect()?;
            println!(
                "collected {} failed trace(s) out of {} attempts -> {}",
                log.len(),
                log.total_attempts,
                out_dir.join(filenames::FAILURE_LOG).display()
            );
            print!("{}", render_token_summary(&pipeline.ledger));
        }
        Command::Taxonomize { .. } => {
            let taxonomy = pipeline.cmd_taxonomize()?;
            println!(
                "taxonomy with {} categories over {} traces -> {}",
                taxonomy.categories.len(),
                taxonomy.total_assignments(),
                out_dir.join(filenames::TAXONOMY).display()
            );
            for stats in category_stats(&taxonomy) {
                println!(
                    "  {} (failures: {}, problems: {})",
                    stats.name, stats.failure_count, stats.problem_count
                );
            }
            print!("{}", render_token_summary(&pipeline.ledger));
        }
        Command::Select { .. } => {
            let rows = pipeline.cmd_select()?;
            print!("{}", render_selection_table(&rows));
            println!("-> {}", out_dir.join(filenames::SELECTION).display());
        }
        Command::Guide { ablation, .. } => {
            let artifact = pipeline.cmd_guide(ablation.map(Into::into).unwrap_or_default())?;
            if artifact.guidance_items.is_empty() {
                println!("no guidance generated; the optimized prompt equals the base prompt");
            } else {
                println!(
                    "assembled prompt with {} guidance block(s)",
                    artifact.guidance_items.len()
                );
            }
            print!("{}", render_token_summary(&pipeline.ledger));
            println!(
                "assembled prompt: {}",
                out_dir.join(filenames::OPTIMIZED_PROMPT).display()
            );
        }
        Command::Eval {
            prompt,
            split,
            runs,
            ..
        } => {
            let kind = match prompt {
                PromptArg::Base => PromptKind::Base,
                PromptArg::Optimized => PromptKind::Optimized,
            };
            let role = match split {
                SplitArg::Validation => DatasetRole::Validation,
                SplitArg::Test => DatasetRole::Test,
            };
            let report = pipeline.cmd_eval(kind, role, runs)?;
            print!("{}", render_eval_report(&report));
            let filename = match kind {
                PromptKind::Base => filenames::EVAL_BASE,
                PromptKind::Optimized => filenames::EVAL_OPTIMIZED,
            };
            println!("-> {}", out_dir.join(filename).display());
        }
        Command::ErrorReduction { top_n, .. } => {
            let report = pipeline.cmd_error_reduction(top_n)?;
            print!("{}", render_error_reduction(&report));
            println!("-> {}", out_dir.join(filenames::ERROR_REDUCTION).display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => {}
        Err(error) => {
            eprintln!("error: {error}");
            std::process::exit(error.exit_code());
        }
    }
}
