use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wiselab::harness::{execute, exit_code, outcome_code, persist, Command, ExperimentConfig, EXIT_USAGE};

const EXIT_CODES: &str = "\
Exit codes:
  0  success, every asserted check passed
  1  verification failed (an asserted check or sanity band did not hold)
  2  usage error (bad flags or arguments)
  3  configuration error (invalid-config, json, delta-out-of-range, invalid-density-params, unsupported-order, quadrature-too-coarse)
  4  input/output error (io, csv, table-format)
  5  numerical failure (cascade-init, resolution-cap, level-too-fine, window-too-small, degenerate-window, eigen-failure, mean-projection-required)
  6  partial failure: some rows raised errors and were skipped, the rest were written
  7  sample error (empty-sample, need-two-points, trajectory-too-short)";

#[derive(Parser, Debug)]
#[command(name = "wiselab", version, about = "Linear wavelet density estimator experiments: ISE limit laws, covariance spectra, tail bounds", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Fit one estimate and write grid values, coefficients and ISE.
    Estimate(Common),
    /// Replicated t_n statistics and their Kolmogorov distance to N(0,1).
    Clt(Common),
    /// L_n trajectory diagnostic with block-constant levels.
    Lil(Common),
    /// Basis, kernel, covariance-integral, martingale and tail checks over a matrix.
    Lemmas(Common),
    /// Empirical tail frequencies against the bounds, plus moment scaling.
    Tails(Common),
    /// Covariance-operator spectra and the chaos comparison.
    Spectrum(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config (schema_version 1); defaults are used for absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores). Outputs do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Use the oracle (grid quadrature) paths.
    #[arg(long)]
    brute: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Estimate(c) => (Command::Estimate, c),
        Sub::Clt(c) => (Command::Clt, c),
        Sub::Lil(c) => (Command::Lil, c),
        Sub::Lemmas(c) => (Command::Lemmas, c),
        Sub::Tails(c) => (Command::Tails, c),
        Sub::Spectrum(c) => (Command::Spectrum, c),
    };
    if let Some(t) = common.threads {
        if t == 0 || rayon::ThreadPoolBuilder::new().num_threads(t).build_global().is_err() {
            eprintln!("error: --threads must be a positive integer");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    }
    let code = run(command, common);
    ExitCode::from(code as u8)
}

fn run(command: Command, common: Common) -> i32 {
    let mut cfg = match &common.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        },
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = common.out_dir {
        cfg.out_dir = dir;
    }
    cfg.brute |= common.brute;
    let outcome = match execute(command, &cfg) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    if let Err(e) = persist(&cfg.out_dir, &cfg, &outcome) {
        return fail(&e);
    }
    println!("{}", outcome.summary);
    println!("wrote {} files and manifest.json to {}", outcome.files.len(), cfg.out_dir.display());
    outcome_code(&outcome)
}

fn fail(err: &wiselab::Error) -> i32 {
    eprintln!("error [{}]: {err}", err.code());
    exit_code(err)
}
