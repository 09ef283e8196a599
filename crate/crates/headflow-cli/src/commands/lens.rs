//! Logit lens over per-head outputs: projects what each head writes at a
//! text position straight through the final norm and unembedding.

use headflow::model::{forward, logit_lens_head};
use headflow::{report, Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::context::ModelContext;
use crate::manifest::Manifest;

#[derive(Debug, Clone, clap::Args)]
pub struct LensArgs {
    /// Text position to read (offset into the text span; default: final).
    #[arg(long, value_name = "POS")]
    pub position: Option<usize>,
    /// Number of top tokens to keep per head.
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

#[derive(Debug, Serialize)]
struct LensEntry {
    token: u32,
    logit: f32,
}

#[derive(Debug, Serialize)]
struct HeadLens {
    layer: usize,
    head: usize,
    top: Vec<LensEntry>,
}

#[derive(Debug, Serialize)]
struct LensArtifact {
    position: usize,
    top_k: usize,
    heads: Vec<HeadLens>,
}

pub fn run(config: &RunConfig, args: &LensArgs) -> Result<()> {
    let ctx = ModelContext::load(config)?;
    let cfg = &ctx.cfg;
    let n_text = ctx.task().text_tokens.len();
    let position = args.position.unwrap_or(n_text - 1);
    if position >= n_text {
        return Err(Error::invalid(format!(
            "position {position} outside the task's {n_text} text tokens"
        )));
    }

    let trace = forward(cfg, &ctx.weights, ctx.task(), None, true)?
        .trace
        .expect("trace requested");
    let abs = cfg.n_image + position;

    let mut heads = Vec::with_capacity(cfg.n_total_heads());
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            let n = cfg.head_index(l, h);
            let row = trace.head_outputs[n].row(abs);
            let top = logit_lens_head(row, &ctx.weights, args.top_k)?
                .into_iter()
                .map(|(token, logit)| LensEntry { token, logit })
                .collect();
            heads.push(HeadLens { layer: l, head: h, top });
        }
    }

    for hl in &heads {
        let shown: Vec<String> =
            hl.top.iter().map(|e| format!("{}:{:+.3}", e.token, e.logit)).collect();
        println!("L{}H{}  {}", hl.layer, hl.head, shown.join("  "));
    }

    let artifact = LensArtifact { position, top_k: args.top_k, heads };
    let dir = config.out_dir()?;
    report::write_json(dir.join("lens.json"), &artifact)?;

    let mut m = Manifest::new("lens", config).with_args(serde_json::json!({
        "position": position,
        "top_k": args.top_k,
    }));
    m.input("weights", config.weights_path()?)?;
    m.input("tasks", config.tasks_path()?)?;
    m.output("lens.json");
    m.write(dir)
}
