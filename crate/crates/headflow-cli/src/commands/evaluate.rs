//! Evaluation commands: faithfulness/completeness curves for a set of head
//! rankings, and the threshold × ranking × ablation-fraction sweep.

use std::path::PathBuf;

use headflow::attribution::{coefficient_ranking, AttributionResult};
use headflow::evaluation::{
    attention_ranking, causal_ranking, curves, default_ablate_fractions,
    default_completeness_thresholds, default_faithfulness_thresholds, min_components,
    random_ranking, sweep, CurveCriterion, CurvePair, ThresholdCell,
};
use headflow::model::{forward, image_attention_per_head};
use headflow::{report, Error, Result};

use crate::config::RunConfig;
use crate::context::OracleContext;
use crate::manifest::Manifest;

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    /// Head attribution artifact (result.json) whose coefficients seed the
    /// rankings.
    #[arg(long, value_name = "FILE")]
    pub result: PathBuf,
    /// Comma-separated rankings to evaluate: any of coefficient, causal,
    /// attention, random.
    #[arg(long, default_value = "coefficient,causal,attention,random", value_name = "NAMES")]
    pub rankings: String,
}

/// Resolves ranking names against the loaded context.
fn build_rankings(
    ctx: &OracleContext,
    result: &AttributionResult,
    names: &str,
    seed: u64,
) -> Result<Vec<(String, Vec<usize>)>> {
    let n = ctx.model.cfg.n_total_heads();
    let mut out = Vec::new();
    for name in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let ranking = match name {
            "coefficient" => coefficient_ranking(&result.theta),
            "causal" => causal_ranking(&ctx.oracle)?,
            "attention" => {
                let trace = forward(&ctx.model.cfg, &ctx.model.weights, ctx.model.task(), None, true)?
                    .trace
                    .expect("trace requested");
                let w = image_attention_per_head(
                    &ctx.model.cfg,
                    &trace,
                    ctx.model.task().text_tokens.len(),
                )?;
                attention_ranking(&w)
            }
            "random" => random_ranking(n, seed),
            other => {
                return Err(Error::invalid(format!(
                    "unknown ranking `{other}` (expected coefficient, causal, attention, random)"
                )))
            }
        };
        out.push((name.to_string(), ranking));
    }
    if out.is_empty() {
        return Err(Error::invalid("no rankings requested".to_string()));
    }
    Ok(out)
}

pub fn run_curves(config: &RunConfig, args: &EvalArgs) -> Result<()> {
    let ctx = OracleContext::load(config)?;
    let result: AttributionResult = super::read_json(&args.result)?;
    let rankings = build_rankings(&ctx, &result, &args.rankings, config.seed)?;

    let mut pairs: Vec<(String, CurvePair)> = Vec::new();
    let mut cells: Vec<ThresholdCell> = Vec::new();
    for (name, ranking) in &rankings {
        let pair = curves(&ctx.oracle, ranking)?;
        cells.push(ThresholdCell {
            ranking: name.clone(),
            criterion: CurveCriterion::FaithfulnessAbove,
            threshold: config.thresholds.faithfulness,
            min_heads: min_components(
                &pair.faithfulness,
                CurveCriterion::FaithfulnessAbove,
                config.thresholds.faithfulness,
            )?,
        });
        cells.push(ThresholdCell {
            ranking: name.clone(),
            criterion: CurveCriterion::CompletenessBelow,
            threshold: config.thresholds.completeness,
            min_heads: min_components(
                &pair.completeness,
                CurveCriterion::CompletenessBelow,
                config.thresholds.completeness,
            )?,
        });
        pairs.push((name.clone(), pair));
    }

    for cell in &cells {
        let shown = cell.min_heads.map_or("-".to_string(), |k| k.to_string());
        println!(
            "{:<12} {} @ {:.2}: min heads {}",
            cell.ranking, cell.criterion, cell.threshold, shown
        );
    }

    let dir = config.out_dir()?;
    report::write_curves_csv(dir.join("curves.csv"), &pairs)?;
    report::write_minheads_csv(dir.join("minheads.csv"), &cells)?;

    let mut m = Manifest::new("eval curves", config).with_args(serde_json::json!({
        "result": args.result.display().to_string(),
        "rankings": args.rankings,
    }));
    m.input("weights", config.weights_path()?)?;
    m.input("tasks", config.tasks_path()?)?;
    m.input("baseline", config.baseline_path()?)?;
    m.input("result", &args.result)?;
    m.output("curves.csv");
    m.output("minheads.csv");
    m.write(dir)
}

pub fn run_sweep(config: &RunConfig, args: &EvalArgs) -> Result<()> {
    let ctx = OracleContext::load(config)?;
    let result: AttributionResult = super::read_json(&args.result)?;
    let rankings = build_rankings(&ctx, &result, &args.rankings, config.seed)?;

    let base = config.sampling_spec(ctx.model.cfg.n_total_heads());
    let sweep_report = sweep(
        &ctx.oracle,
        &rankings,
        &default_faithfulness_thresholds(),
        &default_completeness_thresholds(),
        &base,
        &config.en_params(),
        &default_ablate_fractions(),
    )?;

    println!(
        "sweep: {} threshold cells, {} fraction cells",
        sweep_report.threshold_cells.len(),
        sweep_report.fraction_cells.len()
    );

    let dir = config.out_dir()?;
    report::write_json(dir.join("sweep.json"), &sweep_report)?;
    report::write_minheads_csv(dir.join("minheads.csv"), &sweep_report.threshold_cells)?;

    let mut m = Manifest::new("eval sweep", config).with_args(serde_json::json!({
        "result": args.result.display().to_string(),
        "rankings": args.rankings,
    }));
    m.input("weights", config.weights_path()?)?;
    m.input("tasks", config.tasks_path()?)?;
    m.input("baseline", config.baseline_path()?)?;
    m.input("result", &args.result)?;
    m.output("sweep.json");
    m.output("minheads.csv");
    m.write(dir)
}
