//! Self-test of the copy-head constructions: rebuilds the shipped grid of
//! wired models and checks their ground-truth properties by direct forward
//! passes.

use headflow::synthetic::verify_construction;
use headflow::{report, Error, Result};

use crate::config::RunConfig;
use crate::manifest::Manifest;

pub fn verify(config: &RunConfig) -> Result<()> {
    let cases = verify_construction(config.seed)?;
    let mut failed = 0usize;
    for case in &cases {
        let verdict = if case.passed { "PASS" } else { "FAIL" };
        println!("{verdict}  {}", case.label);
        for check in &case.checks {
            if !check.passed {
                println!("      {}: {}", check.name, check.detail);
            }
        }
        if !case.passed {
            failed += 1;
        }
    }
    println!("{} of {} constructions verified", cases.len() - failed, cases.len());

    let dir = config.out_dir()?;
    report::write_json(dir.join("verify.json"), &cases)?;
    let mut m = Manifest::new("synthetic verify", config);
    m.output("verify.json");
    m.write(dir)?;

    if failed > 0 {
        return Err(Error::degenerate(format!("{failed} construction(s) failed verification")));
    }
    Ok(())
}
