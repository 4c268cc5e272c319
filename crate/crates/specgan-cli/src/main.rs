//! Command-line front end: train runs, spectrum exports, the gradient-check
//! suite, and the generalization-bound calculator.
//!
//! Exit codes: 0 success, 1 check or training failure, 2 bad input,
//! 3 corrupt artifact.

mod config;
mod plot;

use clap::{Args, Parser, Subcommand};
use specgan::evalsuite::{
    append_genbound_csv, excess_gen_bound, spectrum_report, write_spectra_csv, EvalError,
    GenBoundInput,
};
use specgan::gradcheck;
use specgan::optim::{train, TrainError};
use specgan::svdnet::Checkpoint;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CHECK_FAILURE: u8 = 1;
const EXIT_BAD_INPUT: u8 = 2;
const EXIT_CORRUPT_ARTIFACT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "specgan",
    about = "Adversarial training with spectrum-controlled discriminator layers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment from a JSON config.
    Train(TrainArgs),
    /// Export per-layer singular-value spectra from a checkpoint.
    Spectra(SpectraArgs),
    /// Verify every hand-derived gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate the excess generalization bound and log it.
    Genbound(GenboundArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the run config (JSON; unknown keys rejected, missing keys take
    /// documented defaults).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SpectraArgs {
    /// Checkpoint to read.
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
    /// Also render a decay plot (SVG) next to the CSV.
    #[arg(long, default_value_t = false)]
    plot: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenboundArgs {
    /// Sample count n.
    #[arg(long)]
    n: u64,
    /// Max layer width d.
    #[arg(long)]
    d: u64,
    /// Depth L.
    #[arg(long, name = "depth")]
    depth: u64,
    /// Input norm bound B_x.
    #[arg(long)]
    bx: f64,
    /// Per-layer spectral norm bounds, comma separated (length = depth).
    #[arg(long, value_delimiter = ',')]
    bw: Vec<f64>,
    /// Lipschitz constant of the outer loss transform.
    #[arg(long)]
    rho: f64,
    /// Failure probability in (0,1).
    #[arg(long)]
    delta: f64,
    /// Optimization accuracy added verbatim to the bound.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// CSV to append to.
    #[arg(long, default_value = "genbound.csv")]
    out: PathBuf,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(&args.config),
        Command::Spectra(args) => cmd_spectra(&args.checkpoint, &args.out, args.plot),
        Command::Gradcheck(args) => cmd_gradcheck(args.seed),
        Command::Genbound(args) => cmd_genbound(&args),
    }
}

fn cmd_train(config_path: &Path) -> ExitCode {
    let text = match std::fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(err) => {
            eprintln!("cannot read config {}: {err}", config_path.display());
            return ExitCode::from(EXIT_BAD_INPUT);
        }
    };
    let resolved = match config::resolve(&text) {
        Ok(r) => r,
        Err(err) => {
            eprintln!("bad config: {err}");
            return ExitCode::from(EXIT_BAD_INPUT);
        }
    };
    if let Err(err) = resolved.train.validate() {
        eprintln!("bad config: {err}");
        return ExitCode::from(EXIT_BAD_INPUT);
    }
    let out_dir = resolved.out_dir.clone();
    if let Err(err) = std::fs::create_dir_all(&out_dir) {
        eprintln!("cannot create {}: {err}", out_dir.display());
        return ExitCode::from(EXIT_BAD_INPUT);
    }
    // Manifest first, so even a faulted run records what was asked of it.
    if let Err(err) = resolved.write_manifest(&out_dir.join("manifest.json")) {
        eprintln!("cannot write manifest: {err}");
        return ExitCode::from(EXIT_BAD_INPUT);
    }
    match train(&resolved.train, Some(&out_dir)) {
        Ok(outcome) => {
            if resolved.plot {
                if let Some(report) = outcome.reports.last() {
                    let path = out_dir.join("decay.svg");
                    if let Err(err) = plot::write_decay_svg(&path, report) {
                        eprintln!("plot failed (run artifacts are intact): {err}");
                    }
                }
            }
            println!(
                "trained {} iterations; artifacts in {}",
                resolved.train.iters,
                out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(TrainError::Config { what }) => {
            eprintln!("bad config: {what}");
            ExitCode::from(EXIT_BAD_INPUT)
        }
        Err(err) => {
            eprintln!("training failed: {err}");
            ExitCode::from(EXIT_CHECK_FAILURE)
        }
    }
}

fn cmd_spectra(checkpoint_path: &Path, out_path: &Path, render: bool) -> ExitCode {
    let ckpt = match Checkpoint::load(checkpoint_path) {
        Ok(c) => c,
        Err(err) => {
            eprintln!("corrupt checkpoint {}: {err}", checkpoint_path.display());
            return ExitCode::from(EXIT_CORRUPT_ARTIFACT);
        }
    };
    let net = match ckpt.restore_disc() {
        Ok(n) => n,
        Err(err) => {
            eprintln!("corrupt checkpoint {}: {err}", checkpoint_path.display());
            return ExitCode::from(EXIT_CORRUPT_ARTIFACT);
        }
    };
    let report = match spectrum_report(&net, &ckpt.controller, ckpt.iteration) {
        Ok(r) => r,
        Err(err) => {
            eprintln!("cannot build spectra: {err}");
            return ExitCode::from(EXIT_CORRUPT_ARTIFACT);
        }
    };
    if let Err(err) = write_spectra_csv(out_path, &report) {
        eprintln!("cannot write {}: {err}", out_path.display());
        return ExitCode::from(EXIT_BAD_INPUT);
    }
    if render {
        let svg = out_path.with_extension("svg");
        if let Err(err) = plot::write_decay_svg(&svg, &report) {
            eprintln!("plot failed (CSV is intact): {err}");
        }
    }
    println!(
        "wrote {} rows to {}",
        report.layers.iter().map(|l| l.values.len()).sum::<usize>(),
        out_path.display()
    );
    ExitCode::SUCCESS
}

fn cmd_gradcheck(seed: u64) -> ExitCode {
    let reports = gradcheck::run_suite(seed, None);
    for r in &reports {
        println!(
            "{:32} rel err {:>12.3e}  {}",
            r.component,
            r.rel_err,
            if r.rel_err <= 1e-5 { "ok" } else { "FAIL" }
        );
    }
    let worst = gradcheck::worst(&reports);
    println!(
        "worst: {} at rel err {:.3e}",
        worst.component, worst.rel_err
    );
    if reports.iter().all(|r| r.rel_err <= 1e-5) {
        ExitCode::SUCCESS
    } else {
        eprintln!(
            "gradient check failed: {} rel err {:.3e}",
            worst.component, worst.rel_err
        );
        ExitCode::from(EXIT_CHECK_FAILURE)
    }
}

fn cmd_genbound(args: &GenboundArgs) -> ExitCode {
    let input = GenBoundInput {
        n: args.n,
        d: args.d,
        depth: args.depth,
        b_x: args.bx,
        b_w: args.bw.clone(),
        rho_phi: args.rho,
        delta: args.delta,
        epsilon: args.epsilon,
    };
    let bound = match excess_gen_bound(&input) {
        Ok(b) => b,
        Err(EvalError::Domain { what }) => {
            eprintln!("bad input: {what}");
            return ExitCode::from(EXIT_BAD_INPUT);
        }
        Err(err) => {
            eprintln!("bound evaluation failed: {err}");
            return ExitCode::from(EXIT_BAD_INPUT);
        }
    };
    println!("excess generalization bound: {bound}");
    println!("beta = {}", input.beta());
    if input.b_w.iter().all(|&b| b == 1.0) {
        println!("spectrum-constrained regime: every layer bound is 1, so beta equals B_x");
    }
    if let Err(err) = append_genbound_csv(&args.out, &input, bound) {
        eprintln!("cannot append {}: {err}", args.out.display());
        return ExitCode::from(EXIT_BAD_INPUT);
    }
    ExitCode::SUCCESS
}
