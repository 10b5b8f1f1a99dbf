mod commands;
mod error;
mod files;
mod pipeline;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use d2m_core::par::Execution;

use commands::*;
use error::{Error, Result};
use pipeline::{pipeline_cmd, PipelineArgs};

/// Dense-to-MoE layer fusion: find redundant layers, fuse them into sparse
/// layers, and rank candidate architectures by cost.
#[derive(Parser, Debug)]
#[command(name = "d2m", version)]
struct Cli {
    /// Worker threads; 1 runs everything sequentially. Defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic activation trace with planted redundant layers.
    SynthTrace(SynthTraceArgs),
    /// Write a randomly initialized dense model.
    InitModel(InitModelArgs),
    /// Capture the activation trace of a model on random tokens.
    Trace(TraceArgs),
    /// Build similarity matrices from a trace.
    Analyze(AnalyzeArgs),
    /// Search redundant blocks, or sweep a threshold grid.
    Search(SearchArgs),
    /// Fuse redundant layers into sparse layers.
    Fuse(FuseArgs),
    /// Estimate latency and memory of model configurations.
    Estimate(EstimateArgs),
    /// Score candidates with the latency-penalized reward and extract the Pareto frontier.
    Pareto(ParetoArgs),
    /// Winner-takes-all metrics of a per-layer routing log.
    Diagnose(DiagnoseArgs),
    /// Train the routers and experts of a fused toy model.
    TrainToy(TrainToyArgs),
    /// Run every stage on a toy model and write a hashed manifest.
    Pipeline(PipelineArgs),
}

fn execution(jobs: Option<usize>) -> Result<Execution> {
    match jobs {
        Some(0) => Err(Error::Usage("--jobs must be at least 1".into())),
        Some(1) => Ok(Execution::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Internal(e.to_string()))?;
            Ok(Execution::Parallel)
        }
        None => Ok(Execution::Parallel),
    }
}

fn run(cli: Cli) -> Result<Vec<String>> {
    let exec = execution(cli.jobs)?;
    let line = match &cli.command {
        Command::SynthTrace(a) => synth_trace_cmd(a)?,
        Command::InitModel(a) => init_model_cmd(a)?,
        Command::Trace(a) => trace_cmd(a)?,
        Command::Analyze(a) => analyze_cmd(a, exec)?,
        Command::Search(a) => search_cmd(a, exec)?,
        Command::Fuse(a) => fuse_cmd(a)?,
        Command::Estimate(a) => estimate_cmd(a)?,
        Command::Pareto(a) => pareto_cmd(a)?,
        Command::Diagnose(a) => diagnose_cmd(a, exec)?,
        Command::TrainToy(a) => train_toy_cmd(a, exec)?,
        Command::Pipeline(a) => return pipeline_cmd(a, exec),
    };
    Ok(vec![line])
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
