//! Cross-run reporting: head-vector similarity/clustering over several
//! attributions, and the coefficient-vs-attention scatter for one.

use std::path::PathBuf;

use headflow::attribution::AttributionResult;
use headflow::evaluation::{head_similarity_and_cluster, HeadVectorSet, SimilarityReport};
use headflow::model::{forward, image_attention_per_head};
use headflow::{report, Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::context::ModelContext;
use crate::manifest::Manifest;

#[derive(Debug, Clone, clap::Args)]
pub struct ReportArgs {
    /// Two or more head attribution artifacts to cluster head vectors over.
    #[arg(long, value_name = "FILES", num_args = 1.., value_delimiter = ',')]
    pub results: Vec<PathBuf>,
    /// Number of clusters to cut the merge tree at.
    #[arg(long, default_value_t = 2)]
    pub clusters: usize,
    /// One attribution artifact for a coefficient-vs-attention scatter of
    /// the configured task.
    #[arg(long, value_name = "FILE")]
    pub scatter: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SimilarityArtifact {
    sample_ids: Vec<String>,
    n_clusters: usize,
    report: SimilarityReport,
}

pub fn run(config: &RunConfig, args: &ReportArgs) -> Result<()> {
    if args.results.len() < 2 && args.scatter.is_none() {
        return Err(Error::invalid(
            "nothing to report: pass --results with at least two files and/or --scatter"
                .to_string(),
        ));
    }

    let dir = config.out_dir()?;
    let mut m = Manifest::new("report", config).with_args(serde_json::json!({
        "results": args.results.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "clusters": args.clusters,
        "scatter": args.scatter.as_ref().map(|p| p.display().to_string()),
    }));

    if args.results.len() >= 2 {
        let mut ids = Vec::with_capacity(args.results.len());
        let mut thetas = Vec::with_capacity(args.results.len());
        for path in &args.results {
            let result: AttributionResult = super::read_json(path)?;
            ids.push(path.display().to_string());
            thetas.push(result.theta);
        }
        let set = HeadVectorSet::from_thetas(ids.clone(), &thetas)?;
        let sim = head_similarity_and_cluster(&set, args.clusters)?;
        println!(
            "clustered {} heads over {} runs into {} clusters",
            set.vectors.len(),
            ids.len(),
            args.clusters
        );
        report::write_headsim_csv(dir.join("headsim.csv"), &sim)?;
        report::write_json(
            dir.join("headsim.json"),
            &SimilarityArtifact { sample_ids: ids, n_clusters: args.clusters, report: sim },
        )?;
        for (i, path) in args.results.iter().enumerate() {
            m.input(&format!("result{i}"), path)?;
        }
        m.output("headsim.csv");
        m.output("headsim.json");
    }

    if let Some(path) = &args.scatter {
        let ctx = ModelContext::load(config)?;
        let result: AttributionResult = super::read_json(path)?;
        let trace = forward(&ctx.cfg, &ctx.weights, ctx.task(), None, true)?
            .trace
            .expect("trace requested");
        let attn =
            image_attention_per_head(&ctx.cfg, &trace, ctx.task().text_tokens.len())?;
        if attn.len() != result.theta.len() {
            return Err(Error::shape(format!(
                "attribution covers {} heads, model has {}",
                result.theta.len(),
                attn.len()
            )));
        }
        let rows: Vec<(usize, f64, f64)> = result
            .theta
            .iter()
            .zip(&attn)
            .enumerate()
            .map(|(n, (&t, &a))| (n, t, a))
            .collect();
        report::write_scatter_csv(
            dir.join("scatter.csv"),
            ["head", "theta", "image_attention"],
            &rows,
        )?;
        println!("wrote coefficient-vs-attention scatter for {} heads", rows.len());
        m.input("scatter_result", path)?;
        m.input("weights", config.weights_path()?)?;
        m.input("tasks", config.tasks_path()?)?;
        m.output("scatter.csv");
    }

    m.write(dir)
}
