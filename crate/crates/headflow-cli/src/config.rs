//! Run configuration: defaults, JSON config file, and dotted-name flag
//! overrides, merged with precedence flag > file > default.

use std::path::{Path, PathBuf};

use headflow::attribution::{EnParams, SamplingSpec};
use headflow::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub weights: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    /// Artifact directory; created if absent.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { weights: None, tasks: None, baseline: None, out: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    pub ablate_fraction: f64,
    pub n_samples: usize,
    pub train_fraction: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { ablate_fraction: 0.75, n_samples: 10_000, train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticNet {
    pub alpha: f64,
    pub l1_ratio: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ElasticNet {
    fn default() -> Self {
        let d = EnParams::default();
        ElasticNet { alpha: d.alpha, l1_ratio: d.l1_ratio, max_iter: d.max_iter, tol: d.tol }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Faithfulness must exceed this (core-head selection, min-heads).
    pub faithfulness: f64,
    /// Completeness must drop below this (min-heads).
    pub completeness: f64,
    /// Per-text-token Δπ above this marks the token important.
    pub token: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { faithfulness: 0.8, completeness: 0.2, token: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub sampling: Sampling,
    pub en: ElasticNet,
    pub thresholds: Thresholds,
    pub seed: u64,
    /// Oracle batch workers; 0 means one per CPU.
    pub workers: usize,
    /// Index into the task container.
    pub task: usize,
}

/// Flag-level overrides; each long flag is the dotted name of the config
/// field it replaces.
#[derive(Debug, Clone, clap::Args)]
pub struct Overrides {
    #[arg(long = "paths.weights", global = true, value_name = "FILE")]
    pub paths_weights: Option<PathBuf>,
    #[arg(long = "paths.tasks", global = true, value_name = "FILE")]
    pub paths_tasks: Option<PathBuf>,
    #[arg(long = "paths.baseline", global = true, value_name = "FILE")]
    pub paths_baseline: Option<PathBuf>,
    #[arg(long = "paths.out", global = true, value_name = "DIR")]
    pub paths_out: Option<PathBuf>,
    #[arg(long = "sampling.ablate_fraction", global = true, value_name = "FRAC")]
    pub sampling_ablate_fraction: Option<f64>,
    #[arg(long = "sampling.n_samples", global = true, value_name = "N")]
    pub sampling_n_samples: Option<usize>,
    #[arg(long = "sampling.train_fraction", global = true, value_name = "FRAC")]
    pub sampling_train_fraction: Option<f64>,
    #[arg(long = "en.alpha", global = true, value_name = "ALPHA")]
    pub en_alpha: Option<f64>,
    #[arg(long = "en.l1_ratio", global = true, value_name = "RATIO")]
    pub en_l1_ratio: Option<f64>,
    #[arg(long = "en.max_iter", global = true, value_name = "N")]
    pub en_max_iter: Option<usize>,
    #[arg(long = "en.tol", global = true, value_name = "TOL")]
    pub en_tol: Option<f64>,
    #[arg(long = "thresholds.faithfulness", global = true, value_name = "T")]
    pub thresholds_faithfulness: Option<f64>,
    #[arg(long = "thresholds.completeness", global = true, value_name = "T")]
    pub thresholds_completeness: Option<f64>,
    #[arg(long = "thresholds.token", global = true, value_name = "T")]
    pub thresholds_token: Option<f64>,
    #[arg(long, global = true, value_name = "SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_name = "INDEX")]
    pub task: Option<usize>,
}

impl RunConfig {
    /// Defaults, then the config file (if any), then flag overrides.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::invalid(format!("config {}: {e}", p.display()))
                })?
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = &$value {
                    $field = v.clone();
                }
            };
        }
        if let Some(v) = &o.paths_weights {
            self.paths.weights = Some(v.clone());
        }
        if let Some(v) = &o.paths_tasks {
            self.paths.tasks = Some(v.clone());
        }
        if let Some(v) = &o.paths_baseline {
            self.paths.baseline = Some(v.clone());
        }
        set!(self.paths.out, o.paths_out);
        set!(self.sampling.ablate_fraction, o.sampling_ablate_fraction);
        set!(self.sampling.n_samples, o.sampling_n_samples);
        set!(self.sampling.train_fraction, o.sampling_train_fraction);
        set!(self.en.alpha, o.en_alpha);
        set!(self.en.l1_ratio, o.en_l1_ratio);
        set!(self.en.max_iter, o.en_max_iter);
        set!(self.en.tol, o.en_tol);
        set!(self.thresholds.faithfulness, o.thresholds_faithfulness);
        set!(self.thresholds.completeness, o.thresholds_completeness);
        set!(self.thresholds.token, o.thresholds_token);
        set!(self.seed, o.seed);
        set!(self.workers, o.workers);
        set!(self.task, o.task);
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("thresholds.faithfulness", self.thresholds.faithfulness),
            ("thresholds.completeness", self.thresholds.completeness),
            ("thresholds.token", self.thresholds.token),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::invalid(format!("{name} = {v} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn sampling_spec(&self, n_components: usize) -> SamplingSpec {
        SamplingSpec {
            n_components,
            ablate_fraction: self.sampling.ablate_fraction,
            n_samples: self.sampling.n_samples,
            train_fraction: self.sampling.train_fraction,
            seed: self.seed,
        }
    }

    pub fn en_params(&self) -> EnParams {
        EnParams {
            alpha: self.en.alpha,
            l1_ratio: self.en.l1_ratio,
            max_iter: self.en.max_iter,
            tol: self.en.tol,
        }
    }

    fn need<'a>(path: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        path.as_deref().ok_or_else(|| {
            Error::invalid(format!(
                "no {name} file given; set paths.{name} in the config or pass --paths.{name}"
            ))
        })
    }

    pub fn weights_path(&self) -> Result<&Path> {
        Self::need(&self.paths.weights, "weights")
    }

    pub fn tasks_path(&self) -> Result<&Path> {
        Self::need(&self.paths.tasks, "tasks")
    }

    pub fn baseline_path(&self) -> Result<&Path> {
        Self::need(&self.paths.baseline, "baseline")
    }

    /// Ensures the artifact directory exists and returns it.
    pub fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.paths.out)?;
        Ok(&self.paths.out)
    }
}
