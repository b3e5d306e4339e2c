//! `icl-lab`: run experiments, print closed-form optima, emit heatmap data
//! and verify the identity suite.
//!
//! Exit codes: 0 success, 1 failed acceptance assertion, 2 parse error,
//! 3 validation error, 4 i/o or numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icl_lab::checks::{run_criterion, FAST_CRITERIA};
use icl_lab::cli_io::{
    cmd_closed_form, cmd_run, heatmap, load_weights, CliError, CliResult, Experiment, ExperimentConfig, MatrixKind,
    Overrides,
};
use icl_lab::sampler::CovarianceFile;

#[derive(Parser, Debug)]
#[command(
    name = "icl-lab",
    version,
    about = "Linear transformers for in-context linear regression"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `heatmap`, the CSV file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "ICL_LAB_THREADS")]
    threads: Option<usize>,
    /// Prompts per fixed batch.
    #[arg(long, global = true)]
    batch: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment from a JSON config, or with defaults by name.
    Run {
        /// Path to an experiment config.
        config: Option<PathBuf>,
        /// Experiment to run with default settings when no config is given.
        #[arg(long, conflicts_with = "config")]
        experiment: Option<Experiment>,
    },
    /// Print the optimal single-layer scales and write optimum.json.
    ClosedForm {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        n: usize,
        /// Comma-separated entries of D in Σ = Uᵀ D² U (default: all ones).
        #[arg(long, value_delimiter = ',')]
        entries: Option<Vec<f64>>,
        /// Seed of a Haar-random U (default: U = I).
        #[arg(long)]
        basis_seed: Option<u64>,
    },
    /// Write one weight matrix from weights.json as a CSV grid.
    Heatmap {
        weights: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Which run of the file (0-based).
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long, default_value = "A")]
        matrix: MatrixKind,
        /// Conjugate by Σ^{1/2} first.
        #[arg(long)]
        whitened: bool,
    },
    /// Run acceptance checks; by default the fast ones (1-4, 8, 9).
    Verify {
        /// Criterion ids to run instead, 1 to 10.
        #[arg(long = "criterion", value_parser = clap::value_parser!(u8).range(1..=10))]
        criteria: Vec<u8>,
    },
}

fn closed_form(
    global: &Global,
    d: usize,
    n: usize,
    entries: Option<Vec<f64>>,
    basis_seed: Option<u64>,
) -> CliResult<i32> {
    let entries = entries.unwrap_or_else(|| vec![1.0; d]);
    let spec = CovarianceFile {
        d,
        d_entries: entries,
        u_seed: basis_seed,
        u: None,
    };
    let out = global.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let (text, path) = cmd_closed_form(&spec, n, &out)?;
    print!("{text}");
    eprintln!("wrote {}", path.display());
    Ok(0)
}

fn run(global: &Global, config: Option<PathBuf>, experiment: Option<Experiment>) -> CliResult<i32> {
    let cfg = match (config, experiment) {
        (Some(path), _) => ExperimentConfig::load(&path)?,
        (None, Some(e)) => ExperimentConfig::new(e),
        (None, None) => return Err(CliError::Parse("give a config path or --experiment".into())),
    };
    let mut plan = cfg.resolve()?;
    plan.apply(&Overrides {
        seed: global.seed,
        batch: global.batch,
        out: global.out.clone(),
    })?;
    let report = cmd_run(&plan)?;
    println!("{}", report.outcome);
    eprintln!("wrote {} files under {}", report.files.len(), plan.output.display());
    Ok(if report.outcome.passed { 0 } else { 1 })
}

fn emit_heatmap(
    global: &Global,
    weights: PathBuf,
    layer: usize,
    run: usize,
    matrix: MatrixKind,
    whitened: bool,
) -> CliResult<i32> {
    let csv = heatmap(&load_weights(&weights)?, run, layer, matrix, whitened)?;
    match &global.out {
        Some(path) => std::fs::write(path, csv).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(0)
}

fn verify(criteria: Vec<u8>) -> CliResult<i32> {
    let ids = if criteria.is_empty() {
        FAST_CRITERIA.to_vec()
    } else {
        criteria
    };
    let mut ok = true;
    for id in ids {
        let c = run_criterion(id)?;
        println!("{c}");
        ok &= c.passed;
    }
    Ok(if ok { 0 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(t) = cli.global.threads {
        if t == 0 {
            eprintln!("invalid input: --threads must be at least 1");
            return ExitCode::from(3);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("could not start the thread pool: {e}");
            return ExitCode::from(4);
        }
    }
    let result = match cli.command {
        Command::Run { config, experiment } => run(&cli.global, config, experiment),
        Command::ClosedForm {
            d,
            n,
            entries,
            basis_seed,
        } => closed_form(&cli.global, d, n, entries, basis_seed),
        Command::Heatmap {
            weights,
            layer,
            run,
            matrix,
            whitened,
        } => emit_heatmap(&cli.global, weights, layer, run, matrix, whitened),
        Command::Verify { criteria } => verify(criteria),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
