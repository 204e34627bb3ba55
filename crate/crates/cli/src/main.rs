//! `perfforge`: curate slow/fast code pairs, annotate and balance them by
//! optimization strategy, pack training data, drive planner/optimizer
//! models and judge the code they produce.

mod config;
mod error;
mod model;
mod output;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::error::StageResult;
use crate::stages::Ctx;

#[derive(Debug, Parser)]
#[command(name = "perfforge", version, about)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build slow/fast pairs from accepted submissions.
    Curate(stages::CurateArgs),
    /// Extract and categorize optimization strategies for each pair.
    Annotate(model::AnnotateArgs),
    /// Select a category-balanced subset of annotated pairs.
    Balance(stages::BalanceArgs),
    /// Serialize annotated pairs into instruction-tuning examples.
    Pack(stages::PackArgs),
    /// Compile, test and time candidate programs.
    Eval(stages::EvalArgs),
    /// Aggregate evaluation results into a metrics table.
    Report(stages::ReportArgs),
    /// Recompute rewards and group advantages for sampled groups.
    Reward(stages::RewardArgs),
    /// Evaluate the GRPO objective on groups carrying log-probabilities.
    GrpoObjective(stages::ObjectiveArgs),
    /// Ask the planner for strategies only.
    Plan(model::PlanArgs),
    /// Generate optimized programs (single-step or planner + optimizer).
    Optimize(model::OptimizeArgs),
    /// Sample, evaluate and reward groups of two-step candidates.
    GrpoSample(model::GrpoSampleArgs),
    /// Serve a scripted chat-completions endpoint.
    ServeMock(model::ServeMockArgs),
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("PERFFORGE_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn run(cli: Cli) -> StageResult<()> {
    let config = PipelineConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let ctx = Ctx { config, seed };
    match cli.command {
        Command::Curate(a) => stages::curate(&ctx, a),
        Command::Annotate(a) => model::annotate(&ctx, a),
        Command::Balance(a) => stages::balance(&ctx, a),
        Command::Pack(a) => stages::pack(&ctx, a),
        Command::Eval(a) => stages::eval(&ctx, a),
        Command::Report(a) => stages::report(&ctx, a),
        Command::Reward(a) => stages::reward(&ctx, a),
        Command::GrpoObjective(a) => stages::grpo_objective(&ctx, a),
        Command::Plan(a) => model::plan(&ctx, a),
        Command::Optimize(a) => model::optimize(&ctx, a),
        Command::GrpoSample(a) => model::grpo_sample(&ctx, a),
        Command::ServeMock(a) => model::serve_mock(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.kind as u8)
        }
    }
}
