//! Token-level flow: pick the core head set from a head attribution, then
//! measure per-text-token causal effects inside it.

use std::path::PathBuf;

use headflow::attribution::AttributionResult;
use headflow::tokenflow::{select_core_heads, text_token_effects, CoreHeadSet, TokenEffectReport};
use headflow::{report, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::context::OracleContext;
use crate::manifest::Manifest;

/// Contents of `tokens.json`; `attribute image-tokens` reads it back to fix
/// its (x*, u*) context.
#[derive(Debug, Serialize, Deserialize)]
pub struct TokensArtifact {
    pub core: CoreHeadSet,
    pub report: TokenEffectReport,
    /// Always false: negative per-token effects are reported as-is.
    pub negative_effects_clipped: bool,
}

#[derive(Debug, Clone, clap::Args)]
pub struct TokensArgs {
    /// Head attribution artifact (result.json) to select the core set from.
    #[arg(long, value_name = "FILE")]
    pub result: PathBuf,
}

pub fn run(config: &RunConfig, args: &TokensArgs) -> Result<()> {
    let ctx = OracleContext::load(config)?;
    let result: AttributionResult = super::read_json(&args.result)?;
    let core = select_core_heads(&ctx.oracle, &result, config.thresholds.faithfulness)?;
    let effects = text_token_effects(&ctx.oracle, &core.x_star, config.thresholds.token)?;

    println!(
        "core set {} reaches faithfulness {:.4}",
        core.x_star.0.to_bit_string(),
        core.achieved_faithfulness
    );
    println!(
        "important text tokens {} retain ratio {:.4}",
        effects.important.0.to_bit_string(),
        effects.retained_ratio
    );

    let artifact =
        TokensArtifact { core, report: effects, negative_effects_clipped: false };
    let dir = config.out_dir()?;
    report::write_json(dir.join("tokens.json"), &artifact)?;

    let mut m = Manifest::new("tokens", config).with_args(serde_json::json!({
        "result": args.result.display().to_string(),
    }));
    m.input("weights", config.weights_path()?)?;
    m.input("tasks", config.tasks_path()?)?;
    m.input("baseline", config.baseline_path()?)?;
    m.input("result", &args.result)?;
    m.output("tokens.json");
    m.write(dir)
}
