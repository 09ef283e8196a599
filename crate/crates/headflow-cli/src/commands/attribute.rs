//! Attribution commands: fit per-head coefficients from head-ablation
//! masks, or per-image-token coefficients inside a fixed (x*, u*) context.

use std::path::PathBuf;

use headflow::attribution::{attribute, AttributionTarget, HeadComponents};
use headflow::intervention::{BitMask, HeadMask, TextMask};
use headflow::model::forward;
use headflow::tokenflow::{image_token_attribution, theta_attention_correlation, weighted_attention_map};
use headflow::{report, Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::context::OracleContext;
use crate::manifest::Manifest;

use super::tokens::TokensArtifact;

pub fn heads(config: &RunConfig) -> Result<()> {
    let ctx = OracleContext::load(config)?;
    let n_heads = ctx.model.cfg.n_total_heads();
    let spec = config.sampling_spec(n_heads);
    let space = HeadComponents::new(&ctx.oracle);
    let result = attribute(&space, &spec, &config.en_params(), AttributionTarget::Heads)?;

    println!(
        "fit over {} heads: train R² {:.6}, test R² {:.6}{}",
        n_heads,
        result.train_r2,
        result.test_r2,
        if result.converged { "" } else { " (iteration cap hit)" }
    );

    let dir = config.out_dir()?;
    report::write_json(dir.join("result.json"), &result)?;

    let mut m = Manifest::new("attribute heads", config);
    m.input("weights", config.weights_path()?)?;
    m.input("tasks", config.tasks_path()?)?;
    m.input("baseline", config.baseline_path()?)?;
    m.output("result.json");
    m.write(dir)
}

#[derive(Debug, Clone, clap::Args)]
pub struct ImageTokensArgs {
    /// tokens.json artifact fixing the (x*, u*) context; also enables the
    /// effect-weighted attention map.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["head_mask", "text_mask"])]
    pub tokens: Option<PathBuf>,
    /// Explicit head mask (bit string, index 0 first) instead of --tokens.
    #[arg(long, value_name = "BITS", requires = "text_mask")]
    pub head_mask: Option<String>,
    /// Explicit text mask (bit string) instead of --tokens.
    #[arg(long, value_name = "BITS", requires = "head_mask")]
    pub text_mask: Option<String>,
}

/// Contents of `imgattr.json`.
#[derive(Debug, Serialize)]
struct ImageArtifact {
    x_star: HeadMask,
    u_star: TextMask,
    attribution: headflow::tokenflow::ImageAttribution,
    /// Effect-weighted attention mass per image token, grid-shaped; present
    /// only when --tokens supplied the per-token effects it needs.
    weighted_map: Option<Vec<Vec<f64>>>,
    theta_attention_pearson: Option<f64>,
    /// Always false: negative map weights are reported as-is.
    negative_weights_clipped: bool,
}

pub fn image_tokens(config: &RunConfig, args: &ImageTokensArgs) -> Result<()> {
    let ctx = OracleContext::load(config)?;
    let cfg = &ctx.model.cfg;

    let (x_star, u_star, token_report) = match (&args.tokens, &args.head_mask, &args.text_mask) {
        (Some(path), None, None) => {
            let artifact: TokensArtifact = super::read_json(path)?;
            (artifact.core.x_star, artifact.report.important.clone(), Some(artifact.report))
        }
        (None, Some(h), Some(t)) => (
            HeadMask(BitMask::from_bit_string(h)?),
            TextMask(BitMask::from_bit_string(t)?),
            None,
        ),
        _ => {
            return Err(Error::invalid(
                "pass either --tokens FILE or both --head-mask and --text-mask".to_string(),
            ))
        }
    };

    let spec = config.sampling_spec(cfg.n_image);
    let attribution =
        image_token_attribution(&ctx.oracle, &x_star, &u_star, &spec, &config.en_params())?;

    // The weighted attention map needs per-token effects; with explicit
    // masks there are none, so it is skipped rather than recomputed.
    let (weighted_map, pearson) = match &token_report {
        Some(rep) => {
            let trace = forward(cfg, &ctx.model.weights, ctx.model.task(), None, true)?
                .trace
                .expect("trace requested");
            let map = weighted_attention_map(cfg, &trace, &attribution.result, &x_star, rep)?;
            let pearson = theta_attention_correlation(&map, attribution.theta_img())?;
            (Some(headflow::tokenflow::grid_from_flat(&map)?), Some(pearson))
        }
        None => (None, None),
    };

    println!(
        "image fit: test R² {:.6}, top token {}",
        attribution.result.test_r2,
        headflow::attribution::coefficient_ranking(attribution.theta_img())[0]
    );

    let artifact = ImageArtifact {
        x_star,
        u_star,
        attribution,
        weighted_map,
        theta_attention_pearson: pearson,
        negative_weights_clipped: false,
    };
    let dir = config.out_dir()?;
    report::write_json(dir.join("imgattr.json"), &artifact)?;

    let mut m = Manifest::new("attribute image-tokens", config).with_args(serde_json::json!({
        "tokens": args.tokens.as_ref().map(|p| p.display().to_string()),
        "head_mask": args.head_mask,
        "text_mask": args.text_mask,
    }));
    m.input("weights", config.weights_path()?)?;
    m.input("tasks", config.tasks_path()?)?;
    m.input("baseline", config.baseline_path()?)?;
    if let Some(path) = &args.tokens {
        m.input("tokens", path)?;
    }
    m.output("imgattr.json");
    m.write(dir)
}
