//! Token-level tracing: with the important heads fixed, which text rows
//! and image columns actually carry the information?
//!
//! The pipeline is sequential. `select_core_heads` walks the head ranking
//! and keeps the smallest prefix x* whose faithfulness clears a threshold.
//! `text_token_effects` then blocks one text query row at a time inside x*
//! and measures Δπᵢ = 1 − π(x*; u¬ᵢ, 1)/π(x*); rows above a threshold form
//! the retained set u*. `image_token_attribution` reruns the mask-sampling
//! fit over image columns with (x*, u*) held fixed, normalizing by the
//! restricted anchors (π̃). Finally `weighted_attention_map` folds head
//! coefficients, token effects, and raw attention into one image-space map:
//!
//! w_j = Σₙ x*ₙ·θₙ · Σᵢ u*ᵢ·Δπᵢ · aⁿ(text query i → image column j)
//!
//! Negative per-token effects are kept as-is — nothing is clipped — and
//! artifact writers record that choice.

use serde::{Deserialize, Serialize};

use crate::attribution::{
    attribute, coefficient_ranking, normalize_pi, Anchors, AttributionResult, AttributionTarget,
    EnParams, ImageComponents, SamplingSpec,
};
use crate::intervention::{BitMask, HeadMask, ImageMask, TextMask};
use crate::model::{ForwardTrace, ModelConfig};
use crate::oracle::{MaskQuery, Oracle};
use crate::{Error, Result};

/// Δπᵢ cut for deciding a text token matters.
pub const DEFAULT_TOKEN_EFFECT_THRESHOLD: f64 = 0.05;

// ---------------------------------------------------------------------------
// Core head selection
// ---------------------------------------------------------------------------

/// Smallest coefficient-ranking prefix clearing the faithfulness threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoreHeadSet {
    pub x_star: HeadMask,
    pub achieved_faithfulness: f64,
    pub source_ranking: String,
}

/// Walks the coefficient ranking of `result`, evaluating π of each prefix,
/// and returns the first prefix with π > `threshold`. All prefixes are
/// evaluated in one oracle batch.
pub fn select_core_heads(
    oracle: &dyn Oracle,
    result: &AttributionResult,
    threshold: f64,
) -> Result<CoreHeadSet> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::invalid(format!("faithfulness threshold {threshold} outside (0, 1)")));
    }
    let dims = oracle.dims();
    let n = dims.n_heads;
    if result.theta.len() != n {
        return Err(Error::invalid(format!(
            "attribution covers {} heads, oracle exposes {n}",
            result.theta.len()
        )));
    }
    let ranking = coefficient_ranking(&result.theta);
    let mut queries = Vec::with_capacity(n + 2);
    queries.push(MaskQuery::heads_only(&dims, HeadMask::zeros(n)));
    queries.push(MaskQuery::all_ones(&dims));
    let mut prefix = BitMask::zeros(n);
    for k in 1..=n {
        prefix.set(ranking[k - 1], true);
        queries.push(MaskQuery::heads_only(&dims, HeadMask(prefix.clone())));
    }
    let raws = oracle.evaluate_batch(&queries)?;
    let anchors = Anchors { raw_zero: raws[0], raw_one: raws[1] };
    for k in 1..=n {
        let pi = normalize_pi(raws[1 + k], &anchors)?;
        if pi > threshold {
            return Ok(CoreHeadSet {
                x_star: HeadMask(BitMask::from_indices(n, &ranking[..k])?),
                achieved_faithfulness: pi,
                source_ranking: "coefficient".to_string(),
            });
        }
    }
    Err(Error::not_achievable(format!(
        "no ranking prefix reaches faithfulness > {threshold}"
    )))
}

// ---------------------------------------------------------------------------
// Text-token effects
// ---------------------------------------------------------------------------

/// Per-text-token causal effects inside a fixed head set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenEffectReport {
    /// Δπᵢ = 1 − π(x*; u¬ᵢ, 1)/π(x*), one per text token. Negative values
    /// are preserved.
    pub delta_pi: Vec<f64>,
    /// u*: bit i set iff `delta_pi[i] > threshold`.
    pub important: TextMask,
    /// π(x*; u*, 1)/π(x*).
    pub retained_ratio: f64,
    /// The cut that produced `important`.
    pub threshold: f64,
}

/// Blocks one text row at a time within `x_star` and measures the relative
/// drop of π. A blocked row's queries see calibration-average image K/V
/// across *all* heads; heads outside x* are already fully ablated.
///
/// Bitwise-unchanged raw logits short-circuit to an exact 0 effect (and an
/// exact ratio of 1), so a self-calibrating baseline — where every
/// substitution is a no-op and the π scale itself collapses — still yields
/// the correct all-zero report instead of a degenerate-anchor error.
pub fn text_token_effects(
    oracle: &dyn Oracle,
    x_star: &HeadMask,
    threshold: f64,
) -> Result<TokenEffectReport> {
    if !threshold.is_finite() || threshold >= 1.0 {
        return Err(Error::invalid(format!("token-effect threshold {threshold} must be finite and < 1")));
    }
    let dims = oracle.dims();
    if x_star.len() != dims.n_heads {
        return Err(Error::invalid(format!(
            "head mask has {} bits, oracle exposes {}",
            x_star.len(),
            dims.n_heads
        )));
    }
    let n_text = dims.n_text;
    let full = MaskQuery {
        heads: x_star.clone(),
        text: TextMask::ones(n_text),
        image: ImageMask::ones(dims.n_image),
    };
    let mut queries = Vec::with_capacity(n_text + 3);
    queries.push(MaskQuery::heads_only(&dims, HeadMask::zeros(dims.n_heads)));
    queries.push(MaskQuery::all_ones(&dims));
    queries.push(full.clone());
    for i in 0..n_text {
        let mut u = BitMask::ones(n_text);
        u.set(i, false);
        queries.push(MaskQuery { text: TextMask(u), ..full.clone() });
    }
    let raws = oracle.evaluate_batch(&queries)?;
    let anchors = Anchors { raw_zero: raws[0], raw_one: raws[1] };
    let raw_star = raws[2];

    // π(x*), demanded lazily so the all-no-op case never touches anchors.
    let mut pi_star: Option<f64> = None;
    let mut pi_star_of = |anchors: &Anchors| -> Result<f64> {
        if let Some(p) = pi_star {
            return Ok(p);
        }
        let p = normalize_pi(raw_star, anchors)?;
        if p <= 0.0 {
            return Err(Error::degenerate(format!(
                "core-set faithfulness π(x*) = {p} is not positive; token ratios are undefined"
            )));
        }
        pi_star = Some(p);
        Ok(p)
    };

    let mut delta_pi = Vec::with_capacity(n_text);
    for i in 0..n_text {
        let raw_i = raws[3 + i];
        if raw_i.to_bits() == raw_star.to_bits() {
            delta_pi.push(0.0);
        } else {
            let ps = pi_star_of(&anchors)?;
            delta_pi.push(1.0 - normalize_pi(raw_i, &anchors)? / ps);
        }
    }

    let mut u_star = BitMask::zeros(n_text);
    for (i, &d) in delta_pi.iter().enumerate() {
        if d > threshold {
            u_star.set(i, true);
        }
    }
    let retained_query = MaskQuery { text: TextMask(u_star.clone()), ..full };
    let raw_retained = oracle.evaluate(&retained_query)?;
    let retained_ratio = if raw_retained.to_bits() == raw_star.to_bits() {
        1.0
    } else {
        let ps = pi_star_of(&anchors)?;
        normalize_pi(raw_retained, &anchors)? / ps
    };

    Ok(TokenEffectReport { delta_pi, important: TextMask(u_star), retained_ratio, threshold })
}

// ---------------------------------------------------------------------------
// Image-token attribution
// ---------------------------------------------------------------------------

/// Coefficients over image tokens, fit inside the (x*, u*) context, plus
/// their spatial arrangement.
#[derive(Debug, Clone, Serialize)]
pub struct ImageAttribution {
    /// Fit over image-column masks; `result.anchors` are the restricted
    /// (π̃) anchors with all / no image columns visible under (x*, u*).
    pub result: AttributionResult,
    /// Row-major √P × √P reshape of `result.theta`.
    pub grid: Vec<Vec<f64>>,
}

impl ImageAttribution {
    pub fn theta_img(&self) -> &[f64] {
        &self.result.theta
    }
}

/// Row-major square reshape; errors unless the length is a perfect square.
pub fn grid_from_flat(v: &[f64]) -> Result<Vec<Vec<f64>>> {
    let side = (v.len() as f64).sqrt().round() as usize;
    if side * side != v.len() {
        return Err(Error::shape(format!("{} values do not form a square grid", v.len())));
    }
    Ok((0..side).map(|r| v[r * side..(r + 1) * side].to_vec()).collect())
}

/// Mask-sampling attribution over image columns with (x*, u*) held fixed.
/// Normalization anchors are re-derived inside the restricted context, so
/// coefficients live on the π̃ scale whose denominator is π(x*; u*, 1).
pub fn image_token_attribution(
    oracle: &dyn Oracle,
    x_star: &HeadMask,
    u_star: &TextMask,
    spec: &SamplingSpec,
    en: &EnParams,
) -> Result<ImageAttribution> {
    let dims = oracle.dims();
    if spec.n_components != dims.n_image {
        return Err(Error::invalid(format!(
            "sampling covers {} components, oracle exposes {} image tokens",
            spec.n_components, dims.n_image
        )));
    }
    // The restricted context must sit at positive faithfulness on the
    // global π scale, otherwise π̃ is built on a sign flip.
    let queries = [
        MaskQuery::heads_only(&dims, HeadMask::zeros(dims.n_heads)),
        MaskQuery::all_ones(&dims),
        MaskQuery {
            heads: x_star.clone(),
            text: u_star.clone(),
            image: ImageMask::ones(dims.n_image),
        },
    ];
    let raws = oracle.evaluate_batch(&queries)?;
    let anchors = Anchors { raw_zero: raws[0], raw_one: raws[1] };
    let denom = normalize_pi(raws[2], &anchors)?;
    if denom <= 0.0 {
        return Err(Error::degenerate(format!(
            "π(x*; u*, 1) = {denom} is not positive; image attribution is undefined"
        )));
    }
    let space = ImageComponents::new(oracle, x_star.clone(), u_star.clone())?;
    let result = attribute(&space, spec, en, AttributionTarget::ImageTokens)?;
    let grid = grid_from_flat(&result.theta)?;
    Ok(ImageAttribution { result, grid })
}

// ---------------------------------------------------------------------------
// Weighted attention map
// ---------------------------------------------------------------------------

/// Folds head coefficients and token effects into image space:
/// w_j = Σₙ x*ₙ·θₙ · Σᵢ u*ᵢ·Δπᵢ · aⁿ(image column j ← text query i),
/// summed over retained heads n and retained text tokens i. Negative Δπᵢ
/// contribute with their sign.
pub fn weighted_attention_map(
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    result: &AttributionResult,
    x_star: &HeadMask,
    report: &TokenEffectReport,
) -> Result<Vec<f64>> {
    let n_heads = cfg.n_total_heads();
    if trace.attention.len() != n_heads
        || result.theta.len() != n_heads
        || x_star.len() != n_heads
    {
        return Err(Error::shape(format!(
            "trace/theta/mask cover {}/{}/{} heads, model has {n_heads}",
            trace.attention.len(),
            result.theta.len(),
            x_star.len()
        )));
    }
    let total = trace.attention[0].rows();
    if total <= cfg.n_image {
        return Err(Error::shape(format!(
            "attention spans {total} positions, image prefix alone is {}",
            cfg.n_image
        )));
    }
    let n_text = total - cfg.n_image;
    if report.delta_pi.len() != n_text {
        return Err(Error::shape(format!(
            "token report covers {} text tokens, trace has {n_text}",
            report.delta_pi.len()
        )));
    }

    let mut w = vec![0.0f64; cfg.n_image];
    for n in 0..n_heads {
        if !x_star.0.get(n) {
            continue;
        }
        let theta = result.theta[n];
        let att = &trace.attention[n];
        for i in 0..n_text {
            if !report.important.0.get(i) {
                continue;
            }
            let scale = theta * report.delta_pi[i];
            let row = att.row(cfg.n_image + i);
            for (j, wj) in w.iter_mut().enumerate() {
                *wj += scale * row[j] as f64;
            }
        }
    }
    Ok(w)
}

/// Pearson correlation between the weighted attention map and the
/// image-token coefficients (scatter-plot summary).
pub fn theta_attention_correlation(map_w: &[f64], image_theta: &[f64]) -> Result<f64> {
    Ok(crate::numerics::fit_metrics(map_w, image_theta)?.pearson)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
