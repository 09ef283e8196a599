//! Generation commands: model weights, task sets, calibration pools, and
//! the calibration-averaged baseline.

use std::path::{Path, PathBuf};

use headflow::container;
use headflow::intervention::compute_baseline_kv;
use headflow::model::{ModelConfig, WeightSet};
use headflow::synthetic::{
    desk_config, gen_calibration_pool, gen_copyhead_model, gen_random_model, gen_random_tasks,
    gen_tasks,
};
use headflow::{Error, Result};

use crate::config::RunConfig;
use crate::context::parse_wiring;
use crate::manifest::Manifest;

/// Model dimensions; defaults are the reference desk-scale setup.
#[derive(Debug, Clone, clap::Args)]
pub struct DimArgs {
    #[arg(long, default_value_t = desk_config().n_layers)]
    pub layers: usize,
    #[arg(long, default_value_t = desk_config().n_heads)]
    pub heads: usize,
    #[arg(long, default_value_t = desk_config().d_model)]
    pub dim: usize,
    #[arg(long, default_value_t = desk_config().d_head)]
    pub head_dim: usize,
    #[arg(long, default_value_t = desk_config().vocab_size)]
    pub vocab: usize,
    #[arg(long, default_value_t = desk_config().n_image)]
    pub image_tokens: usize,
    #[arg(long, default_value_t = desk_config().n_text_max)]
    pub text_max: usize,
}

impl DimArgs {
    pub fn to_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            n_layers: self.layers,
            n_heads: self.heads,
            d_model: self.dim,
            d_head: self.head_dim,
            vocab_size: self.vocab,
            n_image: self.image_tokens,
            n_text_max: self.text_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn as_json(&self) -> serde_json::Value {
        serde_json::json!({
            "layers": self.layers,
            "heads": self.heads,
            "dim": self.dim,
            "head_dim": self.head_dim,
            "vocab": self.vocab,
            "image_tokens": self.image_tokens,
            "text_max": self.text_max,
        })
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct GenModelArgs {
    /// Plant copy-head wiring (`exclusive:N` or `any-one-suffices:N`);
    /// omitted means an unstructured random model.
    #[arg(long, value_name = "KIND:COUNT")]
    pub wiring: Option<String>,
    /// Weight scale for random models (ignored with --wiring).
    #[arg(long, default_value_t = 1.0)]
    pub scale: f32,
    #[command(flatten)]
    pub dims: DimArgs,
    /// Output file (default: <paths.out>/model.hatw).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

pub fn gen_model(config: &RunConfig, args: &GenModelArgs) -> Result<()> {
    let cfg = args.dims.to_config()?;
    let weights = match &args.wiring {
        Some(text) => {
            let wiring = parse_wiring(&cfg, text)?;
            gen_copyhead_model(&cfg, &wiring, config.seed)?.weights
        }
        None => gen_random_model(&cfg, args.scale, config.seed)?,
    };
    let out = resolve_out(config, &args.out, "model.hatw")?;
    container::write_weights(&out, &cfg, &weights)?;
    println!("wrote {}", out.display());

    let mut m = Manifest::new("gen model", config).with_args(serde_json::json!({
        "wiring": args.wiring,
        "scale": args.scale,
        "dims": args.dims.as_json(),
        "out": out.display().to_string(),
    }));
    m.output(&file_name(&out));
    m.write(config.out_dir()?)
}

#[derive(Debug, Clone, clap::Args)]
pub struct GenTasksArgs {
    /// Number of sequences to generate.
    #[arg(long)]
    pub count: Option<usize>,
    /// Gaussian image noise for copy-head tasks.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f32,
    /// Copy-head wiring of the target model; must match how the weights
    /// were generated. Omitted means structure-free random sequences.
    #[arg(long, value_name = "KIND:COUNT")]
    pub wiring: Option<String>,
    /// Seed the weights file was generated with (required with --wiring;
    /// the regenerated model is checked bit for bit against the file).
    #[arg(long, value_name = "SEED")]
    pub model_seed: Option<u64>,
    /// Output file (default: <paths.out>/tasks.hatw or calibration.hatw).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Task sets and calibration pools share everything but the class balance
/// guarantee and the default count/file name.
pub fn gen_sequences(config: &RunConfig, args: &GenTasksArgs, calibration: bool) -> Result<()> {
    let weights_path = config.weights_path()?;
    let (cfg, weights) = container::read_weights(weights_path)?;
    let count = args.count.unwrap_or(if calibration { 100 } else { 8 });

    let seqs = match &args.wiring {
        Some(text) => {
            let wiring = parse_wiring(&cfg, text)?;
            let model_seed = args.model_seed.ok_or_else(|| {
                Error::invalid("--wiring needs --model-seed to reproduce the model".to_string())
            })?;
            let model = gen_copyhead_model(&cfg, &wiring, model_seed)?;
            if !weights_bits_equal(&model.weights, &weights) {
                return Err(Error::invalid(format!(
                    "weights in {} do not match wiring `{text}` with model seed {model_seed}",
                    weights_path.display()
                )));
            }
            if calibration {
                gen_calibration_pool(&model, count, args.noise, config.seed)?
            } else {
                gen_tasks(&model, count, args.noise, config.seed)?
            }
        }
        None => gen_random_tasks(&cfg, count, config.seed)?,
    };

    let default_name = if calibration { "calibration.hatw" } else { "tasks.hatw" };
    let out = resolve_out(config, &args.out, default_name)?;
    container::write_tasks(&out, &cfg, &seqs)?;
    println!("wrote {} ({} sequences)", out.display(), seqs.len());

    let command = if calibration { "gen calibration" } else { "gen tasks" };
    let mut m = Manifest::new(command, config).with_args(serde_json::json!({
        "count": count,
        "noise": args.noise,
        "wiring": args.wiring,
        "model_seed": args.model_seed,
        "out": out.display().to_string(),
    }));
    m.input("weights", weights_path)?;
    m.output(&file_name(&out));
    m.write(config.out_dir()?)
}

#[derive(Debug, Clone, clap::Args)]
pub struct CalibrateArgs {
    /// Calibration pool (a task-set file) to average image K/V over.
    #[arg(long, value_name = "FILE")]
    pub pool: PathBuf,
    /// Output file (default: <paths.out>/baseline.hatw).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

pub fn calibrate(config: &RunConfig, args: &CalibrateArgs) -> Result<()> {
    let weights_path = config.weights_path()?;
    let (cfg, weights) = container::read_weights(weights_path)?;
    let (pool_cfg, pool) = container::read_tasks(&args.pool)?;
    if cfg != pool_cfg {
        return Err(Error::invalid(format!(
            "model configs disagree between {} and {}",
            weights_path.display(),
            args.pool.display()
        )));
    }
    let pool_digest = crate::manifest::sha256_file(&args.pool)?;
    let provenance = format!("sha256:{}", &pool_digest[..16]);
    let baseline = compute_baseline_kv(&cfg, &weights, &pool, &provenance)?;
    let out = resolve_out(config, &args.out, "baseline.hatw")?;
    container::write_baseline(&out, &cfg, &baseline)?;
    println!("wrote {} (averaged {} sequences)", out.display(), baseline.n_sequences);

    let mut m = Manifest::new("calibrate", config).with_args(serde_json::json!({
        "pool": args.pool.display().to_string(),
        "out": out.display().to_string(),
    }));
    m.input("weights", weights_path)?;
    m.input("pool", &args.pool)?;
    m.output(&file_name(&out));
    m.write(config.out_dir()?)
}

/// Explicit --out wins; otherwise the default name inside the out dir.
fn resolve_out(config: &RunConfig, flag: &Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
    match flag {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            Ok(p.clone())
        }
        None => Ok(config.out_dir()?.join(default_name)),
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn weights_bits_equal(a: &WeightSet, b: &WeightSet) -> bool {
    let mats_equal = |x: &headflow::numerics::Matrix, y: &headflow::numerics::Matrix| {
        x.rows() == y.rows()
            && x.cols() == y.cols()
            && x.as_slice()
                .iter()
                .zip(y.as_slice())
                .all(|(p, q)| p.to_bits() == q.to_bits())
    };
    let vecs_equal = |x: &[f32], y: &[f32]| {
        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
    };
    mats_equal(&a.token_embedding, &b.token_embedding)
        && mats_equal(&a.pos_embedding, &b.pos_embedding)
        && vecs_equal(&a.final_norm, &b.final_norm)
        && mats_equal(&a.unembedding, &b.unembedding)
        && a.layers.len() == b.layers.len()
        && a.layers.iter().zip(&b.layers).all(|(la, lb)| {
            vecs_equal(&la.attn_norm, &lb.attn_norm)
                && vecs_equal(&la.ffn_norm, &lb.ffn_norm)
                && mats_equal(&la.ffn_w1, &lb.ffn_w1)
                && mats_equal(&la.ffn_w2, &lb.ffn_w2)
                && la.heads.len() == lb.heads.len()
                && la.heads.iter().zip(&lb.heads).all(|(ha, hb)| {
                    mats_equal(&ha.wq, &hb.wq)
                        && mats_equal(&ha.wk, &hb.wk)
                        && mats_equal(&ha.wv, &hb.wv)
                        && mats_equal(&ha.wo, &hb.wo)
                })
        })
}
