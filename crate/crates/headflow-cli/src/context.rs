//! Loading and cross-checking the model/task/baseline inputs a command
//! needs, and standing up the in-process oracle over them.

use std::path::Path;
use std::sync::Arc;

use headflow::container;
use headflow::model::{ModelConfig, MultimodalSequence, WeightSet};
use headflow::oracle::InProcessOracle;
use headflow::synthetic::{Redundancy, WiringSpec};
use headflow::{Error, Result};

use crate::config::RunConfig;

/// Weights plus the task set, with their embedded model configurations
/// checked for equality and the configured task index bounds-checked.
pub struct ModelContext {
    pub cfg: ModelConfig,
    pub weights: Arc<WeightSet>,
    pub tasks: Vec<MultimodalSequence>,
    pub task_index: usize,
}

impl ModelContext {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let weights_path = config.weights_path()?;
        let tasks_path = config.tasks_path()?;
        let (cfg, weights) = container::read_weights(weights_path)?;
        let (task_cfg, tasks) = container::read_tasks(tasks_path)?;
        check_same_config(&cfg, &task_cfg, weights_path, tasks_path)?;
        if config.task >= tasks.len() {
            return Err(Error::invalid(format!(
                "task index {} out of range: {} has {} task(s)",
                config.task,
                tasks_path.display(),
                tasks.len()
            )));
        }
        Ok(ModelContext { cfg, weights: Arc::new(weights), tasks, task_index: config.task })
    }

    pub fn task(&self) -> &MultimodalSequence {
        &self.tasks[self.task_index]
    }
}

/// A [`ModelContext`] plus a ready oracle over the configured task,
/// ablating against the calibration baseline.
pub struct OracleContext {
    pub model: ModelContext,
    pub oracle: InProcessOracle,
}

impl OracleContext {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let model = ModelContext::load(config)?;
        let baseline_path = config.baseline_path()?;
        let (base_cfg, baseline) = container::read_baseline(baseline_path)?;
        check_same_config(&model.cfg, &base_cfg, config.weights_path()?, baseline_path)?;
        let oracle = InProcessOracle::new(
            &model.cfg,
            Arc::clone(&model.weights),
            model.task().clone(),
            Arc::new(baseline),
        )?
        .with_workers(effective_workers(config.workers));
        Ok(OracleContext { model, oracle })
    }
}

/// 0 means one worker per CPU. Results are identical at any worker count;
/// only wall time changes.
fn effective_workers(configured: usize) -> usize {
    if configured == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        configured
    }
}

fn check_same_config(a: &ModelConfig, b: &ModelConfig, pa: &Path, pb: &Path) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!(
            "model configs disagree between {} and {}",
            pa.display(),
            pb.display()
        )));
    }
    Ok(())
}

/// Parses a `KIND:COUNT` wiring request, e.g. `exclusive:3` or
/// `any-one-suffices:2`, into a standard wiring over `cfg`.
pub fn parse_wiring(cfg: &ModelConfig, text: &str) -> Result<WiringSpec> {
    let (kind, count) = text
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("wiring `{text}` is not KIND:COUNT")))?;
    let redundancy = match kind {
        "exclusive" => Redundancy::Exclusive,
        "any-one-suffices" => Redundancy::AnyOneSuffices,
        other => {
            return Err(Error::invalid(format!(
                "unknown wiring kind `{other}` (expected `exclusive` or `any-one-suffices`)"
            )))
        }
    };
    let s: usize = count
        .parse()
        .map_err(|_| Error::invalid(format!("wiring count `{count}` is not an integer")))?;
    WiringSpec::standard(cfg, redundancy, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use headflow::synthetic::desk_config;

    #[test]
    fn wiring_strings_parse_to_standard_specs() {
        let cfg = desk_config();
        let w = parse_wiring(&cfg, "exclusive:3").unwrap();
        assert_eq!(w.wired_heads.len(), 3);
        assert_eq!(w.redundancy, Redundancy::Exclusive);
        let w = parse_wiring(&cfg, "any-one-suffices:2").unwrap();
        assert_eq!(w.redundancy, Redundancy::AnyOneSuffices);
        for bad in ["exclusive", "exclusive:x", "both:2"] {
            assert!(parse_wiring(&cfg, bad).is_err(), "{bad} should fail");
        }
    }
}
