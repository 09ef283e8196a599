//! `headflow` — head- and token-level attribution of image-to-text
//! information flow in toy multimodal transformers.
//!
//! Every run is driven by one resolved configuration (defaults, then an
//! optional JSON config file, then dotted-name flags), and every command
//! that writes artifacts also writes a manifest with SHA-256 digests of its
//! inputs, so artifacts are byte-reproducible.
//!
//! Exit codes: 0 success; 1 usage or configuration problems; 2 input I/O or
//! format problems; 3 numerical degeneracies and unreachable thresholds;
//! 4 oracle transport or evaluation failures.

mod commands;
mod config;
mod context;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use headflow::Error;

use commands::{attribute, evaluate, gen, lens, oracle, report, synthetic, tokens};
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "headflow", version, about = "Head and token attribution for image-to-text flow")]
struct Cli {
    /// JSON configuration file; dotted-name flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate model weights, task sets, or calibration pools.
    #[command(subcommand)]
    Gen(GenCmd),
    /// Average image K/V over a calibration pool into a baseline file.
    Calibrate(gen::CalibrateArgs),
    /// Self-tests of the planted-wiring constructions.
    #[command(subcommand)]
    Synthetic(SyntheticCmd),
    /// Fit ablation-mask attributions.
    #[command(subcommand)]
    Attribute(AttributeCmd),
    /// Evaluate rankings with faithfulness/completeness curves and sweeps.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Select the core head set and measure per-text-token effects.
    Tokens(tokens::TokensArgs),
    /// Project per-head outputs through the unembedding (logit lens).
    Lens(lens::LensArgs),
    /// Serve or cross-check oracles over the NDJSON stdio protocol.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Cross-run head similarity and coefficient-vs-attention scatters.
    Report(report::ReportArgs),
}

#[derive(Subcommand)]
enum GenCmd {
    /// Random or copy-head-wired model weights.
    Model(gen::GenModelArgs),
    /// Task sequences for a weights file.
    Tasks(gen::GenTasksArgs),
    /// A calibration pool (class-balanced for wired models).
    Calibration(gen::GenTasksArgs),
}

#[derive(Subcommand)]
enum SyntheticCmd {
    /// Rebuild the construction grid and check its ground truth.
    Verify,
}

#[derive(Subcommand)]
enum AttributeCmd {
    /// Per-head coefficients from head-ablation masks.
    Heads,
    /// Per-image-token coefficients inside a fixed (x*, u*) context.
    ImageTokens(attribute::ImageTokensArgs),
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Faithfulness/completeness curves and min-heads for named rankings.
    Curves(evaluate::EvalArgs),
    /// Threshold × ranking grid plus re-attribution across ablation fractions.
    Sweep(evaluate::EvalArgs),
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Answer NDJSON mask queries on stdin until EOF.
    Serve,
    /// Compare an external oracle command against the in-process one.
    Verify(oracle::VerifyArgs),
}

fn dispatch(cli: Cli) -> headflow::Result<()> {
    let config = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Gen(GenCmd::Model(args)) => gen::gen_model(&config, args),
        Command::Gen(GenCmd::Tasks(args)) => gen::gen_sequences(&config, args, false),
        Command::Gen(GenCmd::Calibration(args)) => gen::gen_sequences(&config, args, true),
        Command::Calibrate(args) => gen::calibrate(&config, args),
        Command::Synthetic(SyntheticCmd::Verify) => synthetic::verify(&config),
        Command::Attribute(AttributeCmd::Heads) => attribute::heads(&config),
        Command::Attribute(AttributeCmd::ImageTokens(args)) => {
            attribute::image_tokens(&config, args)
        }
        Command::Eval(EvalCmd::Curves(args)) => evaluate::run_curves(&config, args),
        Command::Eval(EvalCmd::Sweep(args)) => evaluate::run_sweep(&config, args),
        Command::Tokens(args) => tokens::run(&config, args),
        Command::Lens(args) => lens::run(&config, args),
        Command::Oracle(OracleCmd::Serve) => oracle::serve(&config),
        Command::Oracle(OracleCmd::Verify(args)) => oracle::verify(&config, args),
        Command::Report(args) => report::run(&config, args),
    }
}

/// Failure-domain → exit-code mapping; documented in the crate header and
/// relied on by callers scripting the tool.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Shape(_) => 1,
        Error::Io(_) | Error::Format(_) => 2,
        Error::Degenerate(_) | Error::NotAchievable(_) => 3,
        Error::Transport(_) | Error::Oracle(_) => 4,
    }
}

fn main() {
    // Die quietly on a closed pipe (`headflow lens | head`) instead of
    // panicking mid-println.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; everything else is usage.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
