use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajopt::pipeline::{
    compare_solvers, comparison_csv, exit_code, run_pipeline, PipelineConfig, RunOptions, SolverKind, StageKind,
};
use trajopt::{Error, Result};

/// Coverage-optimal X-ray view selection and evaluation.
#[derive(Parser)]
#[command(name = "trajopt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize the phantom.
    Phantom(Common),
    /// Generate the candidate views.
    Candidates(Common),
    /// Simulate projections for every candidate.
    Project(Common),
    /// Build the coverage matrix and absorption metric.
    Coverage(Common),
    /// Select views with the configured solvers.
    Select(Common),
    /// Reconstruct from each selection.
    Recon(Common),
    /// Score reconstructions inside the ROI.
    Evaluate(Common),
    /// Run every stage.
    Run(Common),
    /// Run every stage and print the comparison table.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use only this solver: circular, greedy, ip or oracle.
    #[arg(long)]
    solver: Option<String>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, short)]
    verbose: bool,
}

fn execute(command: Command) -> Result<()> {
    let (common, until, compare) = match command {
        Command::Phantom(c) => (c, Some(StageKind::Phantom), false),
        Command::Candidates(c) => (c, Some(StageKind::Candidates), false),
        Command::Project(c) => (c, Some(StageKind::Project), false),
        Command::Coverage(c) => (c, Some(StageKind::Coverage), false),
        Command::Select(c) => (c, Some(StageKind::Select), false),
        Command::Recon(c) => (c, Some(StageKind::Recon), false),
        Command::Evaluate(c) | Command::Run(c) => (c, None, false),
        Command::Compare(c) => (c, None, true),
    };
    let level = if common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let solvers = common.solver.as_deref().map(|s| s.parse::<SolverKind>().map(|k| vec![k])).transpose()?;
    let cfg = PipelineConfig::load(&common.config)?;
    let out = common
        .out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    let opts = RunOptions { until, solvers };
    if compare {
        let rows = compare_solvers(&cfg, &out, &opts)?;
        print!("{}", comparison_csv(&rows));
    } else {
        let manifest = run_pipeline(&cfg, &out, &opts)?;
        for s in &manifest.stages {
            println!(
                "{:<18} {:<6} {:>9.3}s{}",
                s.name,
                s.status,
                s.wall_time_s,
                if s.cache_hit { "  (cached)" } else { "" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
