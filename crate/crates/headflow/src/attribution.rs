//! Subset-sampled linear attribution — the toolkit's core method.
//!
//! The question "how much does component n contribute to the answer?" is
//! posed as a regression problem: sample many binary ablation masks x (bit 1
//! = component intact), ask an oracle for the normalized logit π(x) of each,
//! and fit π̂(x) = x·θ + b with an elastic net. The coefficient θ_n is
//! component n's contribution; sparsity from the L1 term keeps the story
//! readable.
//!
//! π is the raw adjusted target logit mapped affinely so that the all-ablated
//! mask scores 0 and the all-intact mask scores 1. The map is deliberately
//! *not* clamped: out-of-range values are informative (super-additive masks
//! exceed 1) and clamping would bias the regression.
//!
//! The module is generic over what is being masked. [`ComponentOracle`]
//! adapts a mask stream to raw logits; [`HeadComponents`] masks attention
//! heads, [`ImageComponents`] masks image columns under a fixed head/text
//! context, and [`LinearComponentOracle`] is a synthetic exactly-linear
//! response used to test recovery to tight tolerances.
//!
//! Everything downstream of the oracle is a pure function of (oracle values,
//! sampling spec, elastic-net parameters): identical seeds give identical
//! results, bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::intervention::{BitMask, HeadMask, ImageMask, TextMask};
use crate::numerics::{elastic_net_fit, fit_metrics, Matrix};
use crate::oracle::{MaskQuery, Oracle};
use crate::{Error, Result};

/// Fraction of components ablated per sampled mask.
pub const DEFAULT_ABLATE_FRACTION: f64 = 0.75;
/// Sampled masks per attribution run.
pub const DEFAULT_N_SAMPLES: usize = 10_000;
/// Train share of the train/test split.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
/// Elastic-net defaults.
pub const DEFAULT_ALPHA: f64 = 0.0005;
pub const DEFAULT_L1_RATIO: f64 = 0.5;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-9;

/// Salt separating the train/test shuffle stream from the mask stream.
const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

// ---------------------------------------------------------------------------
// Specs and parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    /// Number of maskable components N.
    pub n_components: usize,
    /// Fraction p of components ablated in each sample.
    pub ablate_fraction: f64,
    /// Number of sampled masks M.
    pub n_samples: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SamplingSpec {
    pub fn with_defaults(n_components: usize, seed: u64) -> Self {
        SamplingSpec {
            n_components,
            ablate_fraction: DEFAULT_ABLATE_FRACTION,
            n_samples: DEFAULT_N_SAMPLES,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            seed,
        }
    }

    /// Exact per-mask ablation count: round(p·N).
    pub fn ablated_per_mask(&self) -> usize {
        (self.ablate_fraction * self.n_components as f64).round() as usize
    }

    pub fn intact_per_mask(&self) -> usize {
        self.n_components - self.ablated_per_mask()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::invalid("no components to attribute".to_string()));
        }
        if !(0.0..1.0).contains(&self.ablate_fraction) || self.ablate_fraction <= 0.0 {
            return Err(Error::invalid(format!(
                "ablate fraction {} outside (0, 1)",
                self.ablate_fraction
            )));
        }
        let k = self.ablated_per_mask();
        if k == 0 || k >= self.n_components {
            return Err(Error::invalid(format!(
                "round(p·N) = {k} must leave both ablated and intact components (N = {})",
                self.n_components
            )));
        }
        if self.n_samples < 10 {
            return Err(Error::invalid(format!(
                "need at least 10 samples, got {}",
                self.n_samples
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnParams {
    pub alpha: f64,
    pub l1_ratio: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EnParams {
    fn default() -> Self {
        EnParams {
            alpha: DEFAULT_ALPHA,
            l1_ratio: DEFAULT_L1_RATIO,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    /// Raw adjusted logit with every component ablated.
    pub raw_zero: f64,
    /// Raw adjusted logit with every component intact.
    pub raw_one: f64,
}

/// Affine normalization pinning π(all-ablated) = 0 and π(all-intact) = 1.
/// Not clamped: values outside [0, 1] are preserved.
pub fn normalize_pi(raw: f64, anchors: &Anchors) -> Result<f64> {
    let denom = anchors.raw_one - anchors.raw_zero;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::degenerate(format!(
            "normalization anchors degenerate: raw_zero = {}, raw_one = {}",
            anchors.raw_zero, anchors.raw_one
        )));
    }
    Ok((raw - anchors.raw_zero) / denom)
}

// ---------------------------------------------------------------------------
// Mask sampling
// ---------------------------------------------------------------------------

/// Draw `count` positions from `0..n` uniformly without replacement
/// (partial Fisher–Yates over an index array; pure function of the rng
/// state).
fn choose(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(count <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

/// M random masks, each with exactly N − round(p·N) intact bits, positions
/// uniform without replacement. Duplicates are kept — deduplication would
/// distort the regression's sample weighting.
pub fn sample_masks(spec: &SamplingSpec) -> Result<Vec<BitMask>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let intact = spec.intact_per_mask();
    let mut out = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let mut mask = BitMask::zeros(spec.n_components);
        for i in choose(spec.n_components, intact, &mut rng) {
            mask.set(i, true);
        }
        out.push(mask);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Component oracles
// ---------------------------------------------------------------------------

/// What attribution masks over: adapts component-level bit masks to raw
/// adjusted logits.
pub trait ComponentOracle {
    fn n_components(&self) -> usize;
    /// Raw adjusted logit for each mask, order-preserving.
    fn evaluate_masks(&self, masks: &[BitMask]) -> Result<Vec<f64>>;
}

/// Masks attention heads; text and image stay fully visible.
pub struct HeadComponents<'a> {
    oracle: &'a dyn Oracle,
}

impl<'a> HeadComponents<'a> {
    pub fn new(oracle: &'a dyn Oracle) -> Self {
        HeadComponents { oracle }
    }
}

impl ComponentOracle for HeadComponents<'_> {
    fn n_components(&self) -> usize {
        self.oracle.dims().n_heads
    }

    fn evaluate_masks(&self, masks: &[BitMask]) -> Result<Vec<f64>> {
        let dims = self.oracle.dims();
        let queries: Vec<MaskQuery> = masks
            .iter()
            .map(|m| MaskQuery::heads_only(&dims, HeadMask(m.clone())))
            .collect();
        self.oracle.evaluate_batch(&queries)
    }
}

/// Masks image columns under a fixed head mask (the retained core set) and
/// a fixed text mask (the retained receiving positions).
pub struct ImageComponents<'a> {
    oracle: &'a dyn Oracle,
    heads: HeadMask,
    text: TextMask,
}

impl<'a> ImageComponents<'a> {
    pub fn new(oracle: &'a dyn Oracle, heads: HeadMask, text: TextMask) -> Result<Self> {
        let dims = oracle.dims();
        if heads.len() != dims.n_heads || text.len() != dims.n_text {
            return Err(Error::invalid(format!(
                "context masks ({}, {}) do not match oracle dims ({}, {})",
                heads.len(),
                text.len(),
                dims.n_heads,
                dims.n_text
            )));
        }
        Ok(ImageComponents { oracle, heads, text })
    }
}

impl ComponentOracle for ImageComponents<'_> {
    fn n_components(&self) -> usize {
        self.oracle.dims().n_image
    }

    fn evaluate_masks(&self, masks: &[BitMask]) -> Result<Vec<f64>> {
        let queries: Vec<MaskQuery> = masks
            .iter()
            .map(|m| MaskQuery {
                heads: self.heads.clone(),
                text: self.text.clone(),
                image: ImageMask(m.clone()),
            })
            .collect();
        self.oracle.evaluate_batch(&queries)
    }
}

/// Synthetic exactly-linear response raw(x) = x·θ* + b. Recovery against a
/// known θ* is the sharpest end-to-end test of the sampling + normalization
/// + regression pipeline (note the pipeline fits *normalized* values, so θ*
/// is recovered verbatim when Σθ* = 1).
pub struct LinearComponentOracle {
    pub theta: Vec<f64>,
    pub intercept: f64,
}

impl ComponentOracle for LinearComponentOracle {
    fn n_components(&self) -> usize {
        self.theta.len()
    }

    fn evaluate_masks(&self, masks: &[BitMask]) -> Result<Vec<f64>> {
        masks
            .iter()
            .map(|m| {
                if m.len() != self.theta.len() {
                    return Err(Error::invalid("mask width mismatch".to_string()));
                }
                let mut v = self.intercept;
                for (i, t) in self.theta.iter().enumerate() {
                    if m.get(i) {
                        v += t;
                    }
                }
                Ok(v)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Attribution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionTarget {
    Heads,
    ImageTokens,
}

/// Coefficients plus everything needed to audit them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionResult {
    pub target: AttributionTarget,
    pub theta: Vec<f64>,
    pub intercept: f64,
    pub converged: bool,
    pub train_r2: f64,
    pub test_r2: f64,
    pub test_pearson: f64,
    pub anchors: Anchors,
    pub spec: SamplingSpec,
    pub en: EnParams,
}

/// The full pipeline: anchors, M sampled masks, normalized logits, seeded
/// 80/20-style split, elastic-net fit on train (anchor rows appended),
/// R²/ρ on held-out test.
pub fn attribute(
    space: &dyn ComponentOracle,
    spec: &SamplingSpec,
    en: &EnParams,
    target: AttributionTarget,
) -> Result<AttributionResult> {
    spec.validate()?;
    let n = space.n_components();
    if n != spec.n_components {
        return Err(Error::invalid(format!(
            "spec says {} components, oracle exposes {n}",
            spec.n_components
        )));
    }

    // Anchors first: they define π and catch degenerate oracles before the
    // expensive sampling pass.
    let anchor_masks = [BitMask::zeros(n), BitMask::ones(n)];
    let anchor_raw = space.evaluate_masks(&anchor_masks)?;
    let anchors = Anchors { raw_zero: anchor_raw[0], raw_one: anchor_raw[1] };
    normalize_pi(anchors.raw_one, &anchors)?; // degenerate-anchor check

    let masks = sample_masks(spec)?;
    let raws = space.evaluate_masks(&masks)?;
    let pis: Vec<f64> =
        raws.iter().map(|&r| normalize_pi(r, &anchors)).collect::<Result<_>>()?;

    // Seeded shuffle split; the salt keeps it independent of the mask
    // stream while remaining a pure function of the spec seed.
    let mut order: Vec<usize> = (0..spec.n_samples).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ SPLIT_SALT);
    for i in (1..order.len()).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((spec.train_fraction * spec.n_samples as f64).round() as usize)
        .clamp(1, spec.n_samples - 1);
    let (train_idx, test_idx) = order.split_at(n_train);

    let build = |idx: &[usize]| -> (Matrix, Vec<f64>) {
        let mut x = Matrix::zeros(idx.len(), n);
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(&masks[i].to_f32_row());
            y.push(pis[i]);
        }
        (x, y)
    };
    let (mut x_train, mut y_train) = build(train_idx);
    let (x_test, y_test) = build(test_idx);

    // The anchor points join the training set. They are already evaluated,
    // and they are load-bearing: every sampled mask has the same intact
    // count, so without rows of a different count θ is only identified up
    // to a constant shift traded against the intercept. The anchors pin
    // that gauge (and encode π(0)=0, π(1)=1 in the fit itself).
    {
        let rows = x_train.rows();
        let mut x = Matrix::zeros(rows + 2, n);
        for r in 0..rows {
            x.row_mut(r).copy_from_slice(x_train.row(r));
        }
        x.row_mut(rows + 1).copy_from_slice(&BitMask::ones(n).to_f32_row());
        x_train = x;
        y_train.push(0.0);
        y_train.push(1.0);
    }

    let mut fit = elastic_net_fit(&x_train, &y_train, en.alpha, en.l1_ratio, en.max_iter, en.tol)?;

    let predict = |x: &Matrix| -> Vec<f64> {
        (0..x.rows())
            .map(|r| {
                let mut v = fit.intercept;
                for (c, t) in fit.theta.iter().enumerate() {
                    v += x.row(r)[c] as f64 * t;
                }
                v
            })
            .collect()
    };
    let train_metrics = fit_metrics(&y_train, &predict(&x_train))?;
    let test_metrics = fit_metrics(&y_test, &predict(&x_test))?;
    fit.train_r2 = Some(train_metrics.r2);
    fit.test_r2 = Some(test_metrics.r2);
    fit.test_pearson = Some(test_metrics.pearson);

    Ok(AttributionResult {
        target,
        theta: fit.theta,
        intercept: fit.intercept,
        converged: fit.converged,
        train_r2: train_metrics.r2,
        test_r2: test_metrics.r2,
        test_pearson: test_metrics.pearson,
        anchors,
        spec: *spec,
        en: *en,
    })
}

/// Component indices from most to least important: descending θ, ties
/// broken toward the lower index.
pub fn coefficient_ranking(theta: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..theta.len()).collect();
    order.sort_by(|&a, &b| theta[b].total_cmp(&theta[a]).then(a.cmp(&b)));
    order
}


// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervention::compute_baseline_kv;
    use crate::oracle::InProcessOracle;
    use crate::synthetic::{
        desk_config, gen_calibration_pool, gen_copyhead_model, gen_tasks, Redundancy, WiringSpec,
    };
    use std::sync::Arc;

    #[test]
    fn masks_have_exact_intact_count_and_are_seed_stable() {
        let spec = SamplingSpec {
            n_components: 16,
            ablate_fraction: 0.75,
            n_samples: 200,
            train_fraction: 0.8,
            seed: 3,
        };
        let masks = sample_masks(&spec).unwrap();
        assert_eq!(masks.len(), 200);
        for m in &masks {
            assert_eq!(m.count_ones(), 4, "N=16, p=0.75 forces exactly 4 intact bits");
        }
        let again = sample_masks(&spec).unwrap();
        assert_eq!(
            masks.iter().map(|m| m.to_bit_string()).collect::<Vec<_>>(),
            again.iter().map(|m| m.to_bit_string()).collect::<Vec<_>>()
        );
        let other = sample_masks(&SamplingSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(
            masks.iter().map(|m| m.to_bit_string()).collect::<Vec<_>>(),
            other.iter().map(|m| m.to_bit_string()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn intact_frequency_concentrates_at_one_minus_p() {
        let spec = SamplingSpec {
            n_components: 16,
            ablate_fraction: 0.75,
            n_samples: 10_000,
            train_fraction: 0.8,
            seed: 8,
        };
        let masks = sample_masks(&spec).unwrap();
        for pos in 0..16 {
            let freq = masks.iter().filter(|m| m.get(pos)).count() as f64 / 10_000.0;
            assert!(
                (freq - 0.25).abs() < 0.02,
                "position {pos} intact frequency {freq}"
            );
        }
    }

    #[test]
    fn sampling_spec_validation() {
        let good = SamplingSpec::with_defaults(16, 1);
        good.validate().unwrap();
        assert!(SamplingSpec { n_samples: 9, ..good }.validate().is_err());
        assert!(SamplingSpec { ablate_fraction: 0.0, ..good }.validate().is_err());
        assert!(SamplingSpec { ablate_fraction: 1.0, ..good }.validate().is_err());
        // round(0.99·16) = 16 leaves nothing intact
        assert!(SamplingSpec { ablate_fraction: 0.99, ..good }.validate().is_err());
        assert!(SamplingSpec { train_fraction: 1.0, ..good }.validate().is_err());
        // round(0.02·16) = 0 ablates nothing
        assert!(SamplingSpec { ablate_fraction: 0.02, ..good }.validate().is_err());
    }

    #[test]
    fn normalize_pi_is_affine_and_unclamped() {
        let anchors = Anchors { raw_zero: 2.0, raw_one: 6.0 };
        assert_eq!(normalize_pi(2.0, &anchors).unwrap(), 0.0);
        assert_eq!(normalize_pi(6.0, &anchors).unwrap(), 1.0);
        assert_eq!(normalize_pi(4.0, &anchors).unwrap(), 0.5);
        assert_eq!(normalize_pi(7.0, &anchors).unwrap(), 1.25);
        assert_eq!(normalize_pi(0.0, &anchors).unwrap(), -0.5);
        let bad = Anchors { raw_zero: 3.0, raw_one: 3.0 };
        assert!(normalize_pi(1.0, &bad).is_err());
    }

    #[test]
    fn exactly_linear_oracle_is_recovered_to_tight_tolerance() {
        // θ* sums to 1 so the anchor normalization maps raw back onto θ*.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 8;
        let mut theta: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = theta.iter().sum();
        for t in &mut theta {
            *t /= s;
        }
        let oracle = LinearComponentOracle { theta: theta.clone(), intercept: -0.37 };
        let spec = SamplingSpec {
            n_components: n,
            ablate_fraction: 0.5,
            n_samples: 20 * n,
            train_fraction: 0.8,
            seed: 22,
        };
        let en = EnParams { alpha: 1e-8, ..EnParams::default() };
        let res = attribute(&oracle, &spec, &en, AttributionTarget::Heads).unwrap();
        for (got, want) in res.theta.iter().zip(&theta) {
            assert!(
                (got - want).abs() < 1e-4,
                "coefficient {got} vs true {want}"
            );
        }
        assert!(res.test_r2 >= 1.0 - 1e-6, "test R² = {}", res.test_r2);
        assert!(res.test_pearson >= 1.0 - 1e-6, "ρ = {}", res.test_pearson);
        assert!((res.anchors.raw_one - (1.0 - 0.37)).abs() < 1e-12);
    }

    #[test]
    fn attribute_is_bit_deterministic_for_a_fixed_seed() {
        let oracle = LinearComponentOracle {
            theta: vec![0.2, 0.3, 0.1, 0.25, 0.15],
            intercept: 0.4,
        };
        let spec = SamplingSpec {
            n_components: 5,
            ablate_fraction: 0.5,
            n_samples: 100,
            train_fraction: 0.8,
            seed: 5,
        };
        let en = EnParams::default();
        let a = attribute(&oracle, &spec, &en, AttributionTarget::Heads).unwrap();
        let b = attribute(&oracle, &spec, &en, AttributionTarget::Heads).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    fn copyhead_oracle(seed: u64) -> (InProcessOracle, Vec<usize>) {
        let cfg = desk_config();
        let wiring = WiringSpec::standard(&cfg, Redundancy::Exclusive, 3).unwrap();
        let model = gen_copyhead_model(&cfg, &wiring, seed).unwrap();
        let wired = model.wiring.wired_indices(&cfg);
        let pool = gen_calibration_pool(&model, 100, 0.1, seed ^ 1).unwrap();
        let baseline =
            Arc::new(compute_baseline_kv(&cfg, &model.weights, &pool, "pool").unwrap());
        let seq = gen_tasks(&model, 1, 0.1, seed ^ 2).unwrap().remove(0);
        let oracle = InProcessOracle::new(&cfg, Arc::new(model.weights), seq, baseline)
            .unwrap()
            .with_workers(4);
        (oracle, wired)
    }

    #[test]
    fn anchor_identities_hold_exactly_on_a_real_oracle() {
        let (oracle, _) = copyhead_oracle(31);
        let space = HeadComponents::new(&oracle);
        let spec = SamplingSpec {
            n_components: 16,
            ablate_fraction: 0.75,
            n_samples: 50,
            train_fraction: 0.8,
            seed: 32,
        };
        let res = attribute(&space, &spec, &EnParams::default(), AttributionTarget::Heads).unwrap();
        // (raw_one − raw_zero)/(raw_one − raw_zero) and 0/(…) are exact in
        // IEEE arithmetic — no tolerance needed.
        assert_eq!(normalize_pi(res.anchors.raw_one, &res.anchors).unwrap(), 1.0);
        assert_eq!(normalize_pi(res.anchors.raw_zero, &res.anchors).unwrap(), 0.0);
    }

    #[test]
    fn copyhead_top_three_coefficients_are_the_wired_set() {
        let (oracle, wired) = copyhead_oracle(33);
        let space = HeadComponents::new(&oracle);
        let spec = SamplingSpec {
            n_components: 16,
            ablate_fraction: 0.5,
            n_samples: 2000,
            train_fraction: 0.8,
            seed: 34,
        };
        let res = attribute(&space, &spec, &EnParams::default(), AttributionTarget::Heads).unwrap();
        let mut top3: Vec<usize> = coefficient_ranking(&res.theta)[..3].to_vec();
        top3.sort_unstable();
        let mut want = wired.clone();
        want.sort_unstable();
        assert_eq!(top3, want, "theta = {:?}", res.theta);
        assert!(res.test_r2 > 0.9, "test R² = {}", res.test_r2);
    }

    #[test]
    fn ranking_orders_descending_with_low_index_ties() {
        assert_eq!(coefficient_ranking(&[0.1, 0.9]), vec![1, 0]);
        assert_eq!(coefficient_ranking(&[0.5, 0.5, 0.5]), vec![0, 1, 2]);
        assert_eq!(coefficient_ranking(&[0.3, 0.7, 0.3, 0.9]), vec![3, 1, 0, 2]);
    }
}
