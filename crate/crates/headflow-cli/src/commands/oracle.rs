//! Oracle transport commands: serve the in-process oracle over NDJSON on
//! stdio, or cross-check it against an external oracle command.

use std::time::Duration;

use headflow::oracle::{serve_ndjson, verify_pair, ExternalOracle};
use headflow::{Error, Result};

use crate::config::RunConfig;
use crate::context::OracleContext;

pub fn serve(config: &RunConfig) -> Result<()> {
    let ctx = OracleContext::load(config)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve_ndjson(&ctx.oracle, stdin.lock(), &mut stdout.lock())
}

#[derive(Debug, Clone, clap::Args)]
pub struct VerifyArgs {
    /// Shell command that speaks the NDJSON oracle protocol on its stdio.
    #[arg(long, value_name = "COMMAND")]
    pub cmd: String,
    /// Number of random queries to compare.
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    /// Per-response timeout for the external command, in seconds.
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
    /// Transport-level retries per query batch.
    #[arg(long, default_value_t = 0)]
    pub retries: u32,
}

pub fn verify(config: &RunConfig, args: &VerifyArgs) -> Result<()> {
    let ctx = OracleContext::load(config)?;
    let external = ExternalOracle::spawn(&args.cmd, Duration::from_secs(args.timeout_secs))?
        .with_retries(args.retries);
    let outcome = verify_pair(&ctx.oracle, &external, args.queries, config.seed)?;

    for mm in &outcome.mismatches {
        println!(
            "mismatch at query {}: reference {:?} vs candidate {:?}",
            mm.index, mm.reference, mm.candidate
        );
    }
    println!("verified {}/{} queries", outcome.matched, outcome.total);
    if !outcome.all_matched() {
        return Err(Error::oracle(format!(
            "{} of {} queries disagreed with the reference",
            outcome.total - outcome.matched,
            outcome.total
        )));
    }
    Ok(())
}
