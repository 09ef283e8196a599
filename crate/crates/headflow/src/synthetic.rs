//! Ground-truth model and task generators.
//!
//! Everything the toolkit claims about attribution is checked against models
//! where the answer is known by construction. Two families:
//!
//! * **Random models** ([`gen_random_model`]): seeded Gaussian weights,
//!   useful for shape/finiteness/interference tests — no semantics.
//! * **Copy-head models** ([`gen_copyhead_model`]): a hand-wired circuit in
//!   which a chosen set of "wired" attention heads is the *only* route by
//!   which class information travels from designated image positions to the
//!   readout. Every other head is either identically zero or a "decoy" that
//!   attends to the image but has a zero value path (so it shows up in
//!   attention maps yet carries nothing).
//!
//! The wiring works with five mutually orthonormal direction families in the
//! residual space: per-class content directions (written into image
//! embeddings at the signal positions), a beacon direction (also at signal
//! positions, the attention target), a receive cue (planted in the
//! positional embedding of the receive text positions, the attention
//! source), a text marker (gives text rows a stable baseline norm), and
//! per-class answer directions (what wired heads write, and what the
//! unembedding reads). Orthonormality makes the copy semantics exact:
//! classes cannot interfere, and value vectors at the signal positions are
//! simplex-centered so a class-balanced calibration pool averages them to
//! zero — mean ablation then removes exactly the class information.
//!
//! Redundancy modes fix the ground truth for head attribution:
//!
//! * `Exclusive`: small head output amplitude keeps the readout in the
//!   linear regime of the final norm, so each wired head contributes an
//!   additive ~1/|S| fraction of the answer logit.
//! * `AnyOneSuffices`: large amplitude saturates the readout through the
//!   final norm's magnitude division — one intact wired head already
//!   produces nearly the full normalized logit.
//!
//! All generators are pure functions of (config, parameters, seed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, MultimodalSequence, WeightSet};
use crate::numerics::Matrix;
use crate::{Error, Result};

/// Image-noise standard deviation used by default task/pool generation.
pub const DEFAULT_NOISE_STD: f32 = 0.1;
/// Default calibration-pool size.
pub const DEFAULT_CALIBRATION_SIZE: usize = 100;

// Every generator keys its ChaCha stream by purpose, so passing the *same*
// user seed to a model generator and a task generator yields independent
// draws. Without this, task noise replays the raw Gaussians the direction
// bank was orthonormalized from: a "noise" image row then points almost
// exactly along the beacon, and — because the pre-attention RMS norm
// equalizes row norms, rewarding purity over amplitude — that row outcompetes
// the genuine signal row for the wired heads' attention.
const STREAM_RANDOM_MODEL: u64 = 1;
const STREAM_DIRECTIONS: u64 = 2;
const STREAM_TASK_NOISE: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Beacon amplitude at signal positions (attention key strength).
const BEACON_AMP: f32 = 4.0;
/// Class-direction amplitude at signal positions (value content strength).
const CLASS_AMP: f32 = 4.0;
/// Receive-cue amplitude in positional embeddings (attention query strength).
const RECEIVE_AMP: f32 = 4.0;
/// Text-marker amplitude — a fixed residual component at every text
/// position, so text rows have a stable norm for the linear regime to lean
/// against.
const MARKER_AMP: f32 = 1.0;
/// Query/key projection gain for wired and decoy heads.
const QK_GAIN: f32 = 2.0;
/// Head output amplitude in the additive (linear) regime.
const W_OUT_EXCLUSIVE: f32 = 0.05;
/// Head output amplitude in the saturating regime — large enough that a
/// single head's write dominates the receive row, after which the final
/// norm's magnitude division makes additional heads nearly irrelevant.
const W_OUT_SATURATING: f32 = 40.0;

/// The desk-scale configuration all shipped examples use: small enough that
/// 2^16 head masks can be enumerated exhaustively.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 64,
        d_head: 16,
        vocab_size: 64,
        n_image: 16,
        n_text_max: 8,
    }
}

// ---------------------------------------------------------------------------
// Random models
// ---------------------------------------------------------------------------

/// Seeded Gaussian init: every weight entry ~ N(0, (scale/√d_model)²);
/// norm gains stay at 1. `scale = 0` yields the all-zero model (uniform
/// logits).
pub fn gen_random_model(cfg: &ModelConfig, scale: f32, seed: u64) -> Result<WeightSet> {
    cfg.validate()?;
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::invalid(format!("scale must be finite and >= 0, got {scale}")));
    }
    let mut rng = stream_rng(seed, STREAM_RANDOM_MODEL);
    let sd = scale / (cfg.d_model as f32).sqrt();
    let mut fill = |m: &mut Matrix| {
        for r in 0..m.rows() {
            for v in m.row_mut(r) {
                let g: f32 = rng.sample(StandardNormal);
                *v = g * sd;
            }
        }
    };
    let mut w = WeightSet::all_zero(cfg);
    fill(&mut w.token_embedding);
    fill(&mut w.pos_embedding);
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            let head = &mut w.layers[l].heads[h];
            fill(&mut head.wq);
            fill(&mut head.wk);
            fill(&mut head.wv);
            fill(&mut head.wo);
        }
        fill(&mut w.layers[l].ffn_w1);
        fill(&mut w.layers[l].ffn_w2);
    }
    fill(&mut w.unembedding);
    Ok(w)
}

// ---------------------------------------------------------------------------
// Copy-head wiring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Redundancy {
    /// Wired heads contribute additive fractions: all |S| needed for the
    /// full logit.
    Exclusive,
    /// Any single wired head saturates the readout.
    AnyOneSuffices,
}

impl std::fmt::Display for Redundancy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Redundancy::Exclusive => write!(f, "exclusive"),
            Redundancy::AnyOneSuffices => write!(f, "any-one-suffices"),
        }
    }
}

/// Which heads carry image information, from where, to where.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WiringSpec {
    /// The information-carrying set S, as (layer, head) pairs. All wired
    /// heads must share one layer so none reads another's output.
    pub wired_heads: Vec<(usize, usize)>,
    pub redundancy: Redundancy,
    /// Image positions carrying the class signal.
    pub signal_tokens: Vec<usize>,
    /// Text positions (offsets into the text span) with the receive cue.
    /// Must include the final text position — the readout has to be able to
    /// receive.
    pub receive_positions: Vec<usize>,
    pub n_classes: usize,
    /// Heads wired to attend image-ward like S but with zero value/output
    /// paths: visible to attention maps, causally inert. May be empty.
    pub decoy_heads: Vec<(usize, usize)>,
}

impl WiringSpec {
    /// The standard shipped wiring: |s| wired heads in layer 1, two decoys
    /// in layer 2 (when the model has that many layers), one signal token,
    /// receive at the final text position, four classes.
    pub fn standard(cfg: &ModelConfig, redundancy: Redundancy, s: usize) -> Result<WiringSpec> {
        if s == 0 || s > cfg.n_heads {
            return Err(Error::invalid(format!(
                "|S| = {s} must be in 1..={} (one layer's heads)",
                cfg.n_heads
            )));
        }
        let wired_layer = 1.min(cfg.n_layers - 1);
        let decoy_layer = wired_layer + 1;
        let decoys = if decoy_layer < cfg.n_layers {
            (0..cfg.n_heads.min(2)).map(|h| (decoy_layer, h)).collect()
        } else {
            Vec::new()
        };
        let spec = WiringSpec {
            wired_heads: (0..s).map(|h| (wired_layer, h)).collect(),
            redundancy,
            signal_tokens: vec![cfg.n_image / 3],
            receive_positions: vec![cfg.n_text_max - 1],
            n_classes: 4.min(cfg.d_head),
            decoy_heads: decoys,
        };
        spec.validate(cfg)?;
        Ok(spec)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        if self.wired_heads.is_empty() {
            return Err(Error::invalid("wired head set must be non-empty".to_string()));
        }
        let mut seen = std::collections::HashSet::new();
        for &(l, h) in self.wired_heads.iter().chain(&self.decoy_heads) {
            if l >= cfg.n_layers || h >= cfg.n_heads {
                return Err(Error::invalid(format!("head ({l},{h}) out of range")));
            }
            if !seen.insert((l, h)) {
                return Err(Error::invalid(format!("head ({l},{h}) listed twice")));
            }
        }
        let layer = self.wired_heads[0].0;
        if self.wired_heads.iter().any(|&(l, _)| l != layer) {
            return Err(Error::invalid(
                "wired heads must share one layer; a head in a later layer would read \
                 the writes of earlier wired heads and the copy semantics would no \
                 longer be exact"
                    .to_string(),
            ));
        }
        if self.signal_tokens.is_empty() {
            return Err(Error::invalid("need at least one signal token".to_string()));
        }
        let mut seen = std::collections::HashSet::new();
        for &j in &self.signal_tokens {
            if j >= cfg.n_image {
                return Err(Error::invalid(format!("signal token {j} outside image span")));
            }
            if !seen.insert(j) {
                return Err(Error::invalid(format!("signal token {j} listed twice")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for &t in &self.receive_positions {
            if t >= cfg.n_text_max {
                return Err(Error::invalid(format!("receive position {t} outside text span")));
            }
            if !seen.insert(t) {
                return Err(Error::invalid(format!("receive position {t} listed twice")));
            }
        }
        if !self.receive_positions.contains(&(cfg.n_text_max - 1)) {
            return Err(Error::invalid(
                "receive positions must include the final text position, where the \
                 readout happens"
                    .to_string(),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("need at least two classes".to_string()));
        }
        if self.n_classes > cfg.d_head {
            return Err(Error::invalid(format!(
                "{} classes exceed head width {}",
                self.n_classes, cfg.d_head
            )));
        }
        if 2 * self.n_classes + 3 > cfg.d_model {
            return Err(Error::invalid(format!(
                "direction bank needs 2·{}+3 orthonormal vectors, model width is {}",
                self.n_classes, cfg.d_model
            )));
        }
        if self.n_classes >= cfg.vocab_size {
            return Err(Error::invalid(
                "vocabulary too small for answer tokens plus a prompt".to_string(),
            ));
        }
        Ok(())
    }

    /// Wired heads as flat indices `layer·H + head`.
    pub fn wired_indices(&self, cfg: &ModelConfig) -> Vec<usize> {
        self.wired_heads.iter().map(|&(l, h)| cfg.head_index(l, h)).collect()
    }

    pub fn decoy_indices(&self, cfg: &ModelConfig) -> Vec<usize> {
        self.decoy_heads.iter().map(|&(l, h)| cfg.head_index(l, h)).collect()
    }
}

/// The orthonormal vectors the construction is built from; kept so task
/// generation and verification can reuse them.
#[derive(Debug, Clone)]
pub struct DirectionBank {
    /// `n_classes × d_model` — image-side class content.
    pub class_dirs: Vec<Vec<f32>>,
    /// Attention key target at signal positions.
    pub beacon: Vec<f32>,
    /// Attention query source at receive positions.
    pub receive_cue: Vec<f32>,
    /// Baseline component of every text position.
    pub text_marker: Vec<f32>,
    /// `n_classes × d_model` — residual-side answer content.
    pub answer_dirs: Vec<Vec<f32>>,
}

/// A fully wired model plus everything needed to pose tasks to it.
#[derive(Debug, Clone)]
pub struct CopyHeadModel {
    pub config: ModelConfig,
    pub weights: WeightSet,
    pub wiring: WiringSpec,
    /// `class k → target token id` (answer tokens occupy the top of the
    /// vocabulary).
    pub class_targets: Vec<u32>,
    /// The fixed prompt, length `n_text_max`, drawn from non-answer ids.
    pub prompt_tokens: Vec<u32>,
    pub directions: DirectionBank,
}

/// Sample `count` orthonormal d-vectors (Gram–Schmidt on seeded Gaussians).
fn orthonormal_directions(d: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f32>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= proj * bi;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::degenerate(
                "Gram-Schmidt degenerate draw; direction bank not full rank".to_string(),
            ));
        }
        for vi in &mut v {
            *vi /= norm;
        }
        basis.push(v);
    }
    Ok(basis
        .into_iter()
        .map(|v| v.into_iter().map(|a| a as f32).collect())
        .collect())
}

/// Rank-one accumulate `m += a·out·inᵀ` for row-major `m` of shape
/// `len(out) × len(in)`.
fn add_outer(m: &mut Matrix, amp: f32, left: &[f32], right: &[f32]) {
    debug_assert_eq!(m.rows(), left.len());
    debug_assert_eq!(m.cols(), right.len());
    for (r, &lv) in left.iter().enumerate() {
        let row = m.row_mut(r);
        for (c, &rv) in right.iter().enumerate() {
            row[c] += amp * lv * rv;
        }
    }
}

pub fn gen_copyhead_model(cfg: &ModelConfig, wiring: &WiringSpec, seed: u64) -> Result<CopyHeadModel> {
    wiring.validate(cfg)?;
    let d = cfg.d_model;
    let dk = cfg.d_head;
    let nk = wiring.n_classes;
    let mut rng = stream_rng(seed, STREAM_DIRECTIONS);

    let mut dirs = orthonormal_directions(d, 2 * nk + 3, &mut rng)?;
    let answer_dirs: Vec<Vec<f32>> = dirs.split_off(nk + 3);
    let text_marker = dirs.pop().unwrap();
    let receive_cue = dirs.pop().unwrap();
    let beacon = dirs.pop().unwrap();
    let class_dirs = dirs;

    let mut w = WeightSet::all_zero(cfg);

    // Text positions: marker everywhere, receive cue where wiring says.
    for t in 0..cfg.n_text_max {
        let row = w.pos_embedding.row_mut(cfg.n_image + t);
        for c in 0..d {
            row[c] += MARKER_AMP * text_marker[c];
        }
        if wiring.receive_positions.contains(&t) {
            for c in 0..d {
                row[c] += RECEIVE_AMP * receive_cue[c];
            }
        }
    }

    // Head-space frame: queries/keys live on basis vector 0; values use the
    // simplex-centered class frame ẽ_k = e_k − mean(e), which a
    // class-balanced pool averages to exactly zero.
    let e0: Vec<f32> = std::iter::once(1.0).chain(std::iter::repeat(0.0)).take(dk).collect();
    let centered_e = |k: usize| -> Vec<f32> {
        let mut v = vec![0.0f32; dk];
        for vi in v.iter_mut().take(nk) {
            *vi = -1.0 / nk as f32;
        }
        v[k] += 1.0;
        v
    };

    let w_out = match wiring.redundancy {
        Redundancy::Exclusive => W_OUT_EXCLUSIVE,
        Redundancy::AnyOneSuffices => W_OUT_SATURATING,
    };

    for &(l, h) in &wiring.wired_heads {
        let head = &mut w.layers[l].heads[h];
        add_outer(&mut head.wq, QK_GAIN, &receive_cue, &e0);
        add_outer(&mut head.wk, QK_GAIN, &beacon, &e0);
        for k in 0..nk {
            add_outer(&mut head.wv, 1.0, &class_dirs[k], &centered_e(k));
            add_outer(&mut head.wo, w_out, &centered_e(k), &answer_dirs[k]);
        }
    }
    for &(l, h) in &wiring.decoy_heads {
        let head = &mut w.layers[l].heads[h];
        add_outer(&mut head.wq, QK_GAIN, &receive_cue, &e0);
        add_outer(&mut head.wk, QK_GAIN, &beacon, &e0);
        // value and output projections stay zero: attention without content.
    }

    // Unembedding: answer token for class k reads the k-th answer direction.
    let answer_base = (cfg.vocab_size - nk) as u32;
    for k in 0..nk {
        let col = answer_base as usize + k;
        for r in 0..d {
            w.unembedding.set(r, col, answer_dirs[k][r]);
        }
    }

    let prompt_tokens: Vec<u32> =
        (0..cfg.n_text_max).map(|t| (t % (cfg.vocab_size - nk)) as u32).collect();
    let class_targets: Vec<u32> = (0..nk as u32).map(|k| answer_base + k).collect();

    Ok(CopyHeadModel {
        config: *cfg,
        weights: w,
        wiring: wiring.clone(),
        class_targets,
        prompt_tokens,
        directions: DirectionBank { class_dirs, beacon, receive_cue, text_marker, answer_dirs },
    })
}

// ---------------------------------------------------------------------------
// Tasks and calibration pools
// ---------------------------------------------------------------------------

fn class_image(model: &CopyHeadModel, class: usize, noise: f32, rng: &mut ChaCha8Rng) -> Matrix {
    let cfg = &model.config;
    let mut img = Matrix::zeros(cfg.n_image, cfg.d_model);
    for &j in &model.wiring.signal_tokens {
        let row = img.row_mut(j);
        for c in 0..cfg.d_model {
            row[c] = BEACON_AMP * model.directions.beacon[c]
                + CLASS_AMP * model.directions.class_dirs[class][c];
        }
    }
    if noise > 0.0 {
        for r in 0..cfg.n_image {
            for v in img.row_mut(r) {
                let g: f32 = rng.sample(StandardNormal);
                *v += noise * g;
            }
        }
    }
    img
}

/// Class-cycled task instances: the class signal at the wiring's signal
/// positions plus Gaussian noise over the whole image; fixed prompt; target
/// from the class map.
pub fn gen_tasks(
    model: &CopyHeadModel,
    n_instances: usize,
    noise: f32,
    seed: u64,
) -> Result<Vec<MultimodalSequence>> {
    if n_instances == 0 {
        return Err(Error::invalid("need at least one task instance".to_string()));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::invalid(format!("noise must be finite and >= 0, got {noise}")));
    }
    let mut rng = stream_rng(seed, STREAM_TASK_NOISE);
    let nk = model.wiring.n_classes;
    let mut out = Vec::with_capacity(n_instances);
    for i in 0..n_instances {
        let class = i % nk;
        out.push(MultimodalSequence {
            image: class_image(model, class, noise, &mut rng),
            text_tokens: model.prompt_tokens.clone(),
            target_token: model.class_targets[class],
        });
    }
    Ok(out)
}

/// Class-balanced pool for K/V calibration; per-class counts differ by at
/// most one. Same image recipe as tasks.
pub fn gen_calibration_pool(
    model: &CopyHeadModel,
    n: usize,
    noise: f32,
    seed: u64,
) -> Result<Vec<MultimodalSequence>> {
    gen_tasks(model, n, noise, seed)
}

/// Structure-free task instances for models without planted wiring:
/// standard-normal images, uniform prompt tokens, uniform target.
pub fn gen_random_tasks(
    cfg: &ModelConfig,
    n_instances: usize,
    seed: u64,
) -> Result<Vec<MultimodalSequence>> {
    if n_instances == 0 {
        return Err(Error::invalid("need at least one task instance".to_string()));
    }
    let mut rng = stream_rng(seed, STREAM_TASK_NOISE);
    let mut out = Vec::with_capacity(n_instances);
    for _ in 0..n_instances {
        let data = (0..cfg.n_image * cfg.d_model)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let seq = MultimodalSequence {
            image: Matrix::from_vec(cfg.n_image, cfg.d_model, data)?,
            text_tokens: (0..cfg.n_text_max)
                .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
                .collect(),
            target_token: rng.gen_range(0..cfg.vocab_size as u32),
        };
        seq.validate(cfg)?;
        out.push(seq);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Construction self-test
// ---------------------------------------------------------------------------

/// One named check of [`verify_construction`].
#[derive(Debug, Clone, Serialize)]
pub struct VerificationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationCase {
    pub label: String,
    pub passed: bool,
    pub checks: Vec<VerificationCheck>,
}

fn push_check(checks: &mut Vec<VerificationCheck>, name: &str, passed: bool, detail: String) {
    checks.push(VerificationCheck { name: name.to_string(), passed, detail });
}

/// Normalized logit of a head mask via direct forward passes:
/// `(raw(mask) − raw(none)) / (raw(all) − raw(none))` with raw = adjusted
/// target logit. Text and image stay fully intact.
fn pi_of_head_mask(
    model: &CopyHeadModel,
    seq: &MultimodalSequence,
    baseline: &std::sync::Arc<crate::intervention::BaselineKV>,
    intact: &[usize],
) -> Result<f64> {
    use crate::intervention::{HeadMask, ImageMask, InterventionPlan, TextMask};
    let cfg = &model.config;
    let n_heads = cfg.n_total_heads();
    let raw = |mask: HeadMask| -> Result<f64> {
        let plan = InterventionPlan {
            heads: mask,
            text: TextMask::ones(seq.n_text()),
            image: ImageMask::ones(cfg.n_image),
            baseline: baseline.clone(),
        };
        let out = crate::model::forward(cfg, &model.weights, seq, Some(&plan), false)?;
        crate::model::adjusted_logit(&out.logits, seq.target_token)
    };
    let raw_zero = raw(HeadMask::zeros(n_heads))?;
    let raw_one = raw(HeadMask::ones(n_heads))?;
    let denom = raw_one - raw_zero;
    if denom == 0.0 {
        return Err(Error::degenerate("normalization anchors coincide".to_string()));
    }
    let raw_m = raw(HeadMask::from_indices(n_heads, intact)?)?;
    Ok((raw_m - raw_zero) / denom)
}

fn verify_one(cfg: &ModelConfig, wiring: &WiringSpec, seed: u64) -> Result<VerificationCase> {
    let label = format!(
        "|S|={} {} P_img={}",
        wiring.wired_heads.len(),
        wiring.redundancy,
        cfg.n_image
    );
    let model = gen_copyhead_model(cfg, wiring, seed)?;
    let mut checks = Vec::new();

    // Noise-free class sweep: argmax must equal the class map everywhere.
    let clean = gen_tasks(&model, wiring.n_classes, 0.0, seed ^ 1)?;
    let mut argmax_ok = true;
    for seq in &clean {
        let out = crate::model::forward(cfg, &model.weights, seq, None, false)?;
        let am = out
            .logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i as u32)
            .unwrap();
        if am != seq.target_token {
            argmax_ok = false;
        }
    }
    push_check(
        &mut checks,
        "class argmax",
        argmax_ok,
        format!("{} noise-free classes all map to their answer token", wiring.n_classes),
    );

    // Accuracy at the default noise level.
    let tasks = gen_tasks(&model, 200, DEFAULT_NOISE_STD, seed ^ 2)?;
    let mut correct = 0usize;
    for seq in &tasks {
        let out = crate::model::forward(cfg, &model.weights, seq, None, false)?;
        let am = out
            .logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i as u32)
            .unwrap();
        if am == seq.target_token {
            correct += 1;
        }
    }
    push_check(
        &mut checks,
        "noisy accuracy",
        correct == tasks.len(),
        format!("{}/{} at noise {}", correct, tasks.len(), DEFAULT_NOISE_STD),
    );

    // Intervention behavior against the wiring's ground truth.
    let pool = gen_calibration_pool(&model, DEFAULT_CALIBRATION_SIZE, DEFAULT_NOISE_STD, seed ^ 3)?;
    let baseline = std::sync::Arc::new(crate::intervention::compute_baseline_kv(
        cfg,
        &model.weights,
        &pool,
        "verification pool",
    )?);
    let seq = &tasks[0];
    let wired = wiring.wired_indices(cfg);
    let all: Vec<usize> = (0..cfg.n_total_heads()).collect();
    let without = |skip: &[usize]| -> Vec<usize> {
        all.iter().copied().filter(|i| !skip.contains(i)).collect()
    };

    match wiring.redundancy {
        Redundancy::Exclusive => {
            // π with j of |S| wired heads intact tracks j/|S|.
            let mut max_dev = 0.0f64;
            for j in 0..=wired.len() {
                let ablated: Vec<usize> = wired[j..].to_vec();
                let pi = pi_of_head_mask(&model, seq, &baseline, &without(&ablated))?;
                max_dev = max_dev.max((pi - j as f64 / wired.len() as f64).abs());
            }
            push_check(
                &mut checks,
                "additive fractions",
                max_dev < 0.1,
                format!("max |π(j intact) − j/|S|| = {max_dev:.4}"),
            );
            let pi_none = pi_of_head_mask(&model, seq, &baseline, &without(&wired))?;
            push_check(
                &mut checks,
                "all wired ablated",
                pi_none.abs() < 0.05,
                format!("π = {pi_none:.4} with S ablated"),
            );
        }
        Redundancy::AnyOneSuffices => {
            let mut min_single = f64::INFINITY;
            for &skip in &wired {
                let pi = pi_of_head_mask(&model, seq, &baseline, &without(&[skip]))?;
                min_single = min_single.min(pi);
            }
            push_check(
                &mut checks,
                "single ablation harmless",
                wired.len() < 2 || min_single > 0.9,
                format!("min π over single wired ablations = {min_single:.4}"),
            );
            let mut min_alone = f64::INFINITY;
            for &keep in &wired {
                let ablated: Vec<usize> = wired.iter().copied().filter(|&i| i != keep).collect();
                let pi = pi_of_head_mask(&model, seq, &baseline, &without(&ablated))?;
                min_alone = min_alone.min(pi);
            }
            push_check(
                &mut checks,
                "one head suffices",
                min_alone > 0.9,
                format!("min π with a single wired head intact = {min_alone:.4}"),
            );
            let pi_none = pi_of_head_mask(&model, seq, &baseline, &without(&wired))?;
            push_check(
                &mut checks,
                "all wired ablated",
                pi_none < 0.1,
                format!("π = {pi_none:.4} with S ablated"),
            );
        }
    }

    // Unwired heads — one zero head and one decoy — must be causally inert.
    let mut inert_dev = 0.0f64;
    let mut probe: Vec<usize> = Vec::new();
    let decoys = wiring.decoy_indices(cfg);
    if let Some(&z) = all.iter().find(|&&i| !wired.contains(&i) && !decoys.contains(&i)) {
        probe.push(z);
    }
    if let Some(&d) = decoys.first() {
        probe.push(d);
    }
    for &p in &probe {
        let pi = pi_of_head_mask(&model, seq, &baseline, &without(&[p]))?;
        inert_dev = inert_dev.max((pi - 1.0).abs());
    }
    push_check(
        &mut checks,
        "unwired heads inert",
        inert_dev < 0.01,
        format!("max |π − 1| over zero/decoy single ablations = {inert_dev:.2e}"),
    );

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerificationCase { label, passed, checks })
}

/// The shipped construction self-test grid: |S| ∈ {1, 3} × both redundancy
/// modes × image sizes {16, 64}.
pub fn verify_construction(seed: u64) -> Result<Vec<VerificationCase>> {
    let mut cases = Vec::new();
    for n_image in [16usize, 64] {
        let cfg = ModelConfig { n_image, ..desk_config() };
        for s in [1usize, 3] {
            for mode in [Redundancy::Exclusive, Redundancy::AnyOneSuffices] {
                let wiring = WiringSpec::standard(&cfg, mode, s)?;
                cases.push(verify_one(&cfg, &wiring, seed)?);
            }
        }
    }
    Ok(cases)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervention::compute_baseline_kv;
    use crate::model::{adjusted_logit, forward};
    use std::sync::Arc;

    fn desk_copyhead(mode: Redundancy, s: usize) -> CopyHeadModel {
        let cfg = desk_config();
        let wiring = WiringSpec::standard(&cfg, mode, s).unwrap();
        gen_copyhead_model(&cfg, &wiring, 11).unwrap()
    }

    #[test]
    fn generators_are_seed_stable() {
        let cfg = desk_config();
        let a = gen_random_model(&cfg, 1.0, 5).unwrap();
        let b = gen_random_model(&cfg, 1.0, 5).unwrap();
        assert_eq!(a.unembedding.as_slice(), b.unembedding.as_slice());
        let c = gen_random_model(&cfg, 1.0, 6).unwrap();
        assert_ne!(a.unembedding.as_slice(), c.unembedding.as_slice());

        let m1 = desk_copyhead(Redundancy::Exclusive, 3);
        let m2 = desk_copyhead(Redundancy::Exclusive, 3);
        assert_eq!(
            m1.weights.pos_embedding.as_slice(),
            m2.weights.pos_embedding.as_slice()
        );
        let t1 = gen_tasks(&m1, 8, 0.1, 3).unwrap();
        let t2 = gen_tasks(&m1, 8, 0.1, 3).unwrap();
        assert_eq!(t1[5].image.as_slice(), t2[5].image.as_slice());
    }

    #[test]
    fn scale_zero_model_yields_uniform_logits() {
        let cfg = desk_config();
        let w = gen_random_model(&cfg, 0.0, 1).unwrap();
        let model = desk_copyhead(Redundancy::Exclusive, 1);
        let seq = &gen_tasks(&model, 1, 0.1, 2).unwrap()[0];
        let out = forward(&cfg, &w, seq, None, false).unwrap();
        assert!(out.logits.iter().all(|&v| v == out.logits[0]));
        assert_eq!(adjusted_logit(&out.logits, seq.target_token).unwrap(), 0.0);
    }

    #[test]
    fn large_scale_random_model_stays_finite() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 256,
            d_head: 64,
            vocab_size: 64,
            n_image: 16,
            n_text_max: 4,
        };
        let w = gen_random_model(&cfg, 10.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img: Vec<f32> = (0..cfg.n_image * cfg.d_model)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let seq = MultimodalSequence {
            image: Matrix::from_vec(cfg.n_image, cfg.d_model, img).unwrap(),
            text_tokens: vec![1, 2, 3],
            target_token: 0,
        };
        let out = forward(&cfg, &w, &seq, None, false).unwrap();
        assert!(out.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn class_argmax_matches_map_in_both_modes() {
        for mode in [Redundancy::Exclusive, Redundancy::AnyOneSuffices] {
            let model = desk_copyhead(mode, 3);
            let tasks = gen_tasks(&model, model.wiring.n_classes, 0.0, 7).unwrap();
            for seq in &tasks {
                let out = forward(&model.config, &model.weights, seq, None, false).unwrap();
                let am = out
                    .logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i as u32)
                    .unwrap();
                assert_eq!(am, seq.target_token, "mode {mode}");
            }
        }
    }

    #[test]
    fn noise_free_same_class_instances_are_identical() {
        let model = desk_copyhead(Redundancy::Exclusive, 1);
        let tasks = gen_tasks(&model, 8, 0.0, 1).unwrap();
        // instances 0 and 4 share class 0
        assert_eq!(tasks[0].image.as_slice(), tasks[4].image.as_slice());
        assert_eq!(tasks[0].target_token, tasks[4].target_token);
    }

    #[test]
    fn single_wired_head_is_necessary_and_others_inert() {
        let model = desk_copyhead(Redundancy::Exclusive, 1);
        let cfg = &model.config;
        let pool = gen_calibration_pool(&model, 100, 0.1, 13).unwrap();
        let baseline =
            Arc::new(compute_baseline_kv(cfg, &model.weights, &pool, "test pool").unwrap());
        let seq = &gen_tasks(&model, 1, 0.1, 14).unwrap()[0];
        let wired = model.wiring.wired_indices(cfg);
        let all: Vec<usize> = (0..cfg.n_total_heads()).collect();

        let intact_minus = |skip: usize| -> Vec<usize> {
            all.iter().copied().filter(|&i| i != skip).collect()
        };
        let pi_wired_out = pi_of_head_mask(&model, seq, &baseline, &intact_minus(wired[0])).unwrap();
        assert!(pi_wired_out.abs() < 0.05, "π = {pi_wired_out} after ablating the wired head");

        for &other in all.iter().filter(|i| !wired.contains(i)) {
            let pi = pi_of_head_mask(&model, seq, &baseline, &intact_minus(other)).unwrap();
            assert!(
                (pi - 1.0).abs() < 0.01,
                "head {other} should be inert, π = {pi}"
            );
        }
    }

    #[test]
    fn additive_mode_tracks_intact_fraction() {
        let model = desk_copyhead(Redundancy::Exclusive, 3);
        let cfg = &model.config;
        let pool = gen_calibration_pool(&model, 100, 0.1, 15).unwrap();
        let baseline =
            Arc::new(compute_baseline_kv(cfg, &model.weights, &pool, "test pool").unwrap());
        let seq = &gen_tasks(&model, 1, 0.1, 16).unwrap()[0];
        let wired = model.wiring.wired_indices(cfg);
        let all: Vec<usize> = (0..cfg.n_total_heads()).collect();
        for j in 0..=3usize {
            let ablated = &wired[j..];
            let intact: Vec<usize> =
                all.iter().copied().filter(|i| !ablated.contains(i)).collect();
            let pi = pi_of_head_mask(&model, seq, &baseline, &intact).unwrap();
            assert!(
                (pi - j as f64 / 3.0).abs() < 0.1,
                "π({j} of 3 intact) = {pi}"
            );
        }
    }

    #[test]
    fn saturating_mode_needs_only_one_wired_head() {
        let model = desk_copyhead(Redundancy::AnyOneSuffices, 3);
        let cfg = &model.config;
        let pool = gen_calibration_pool(&model, 100, 0.1, 17).unwrap();
        let baseline =
            Arc::new(compute_baseline_kv(cfg, &model.weights, &pool, "test pool").unwrap());
        let seq = &gen_tasks(&model, 1, 0.1, 18).unwrap()[0];
        let wired = model.wiring.wired_indices(cfg);
        let all: Vec<usize> = (0..cfg.n_total_heads()).collect();

        for &skip in &wired {
            let intact: Vec<usize> = all.iter().copied().filter(|&i| i != skip).collect();
            let pi = pi_of_head_mask(&model, seq, &baseline, &intact).unwrap();
            assert!(pi > 0.9, "ablating single wired head {skip} gave π = {pi}");
        }
        for &keep in &wired {
            let intact: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&i| !wired.contains(&i) || i == keep)
                .collect();
            let pi = pi_of_head_mask(&model, seq, &baseline, &intact).unwrap();
            assert!(pi > 0.9, "single intact wired head {keep} gave π = {pi}");
        }
        let intact: Vec<usize> = all.iter().copied().filter(|i| !wired.contains(i)).collect();
        let pi = pi_of_head_mask(&model, seq, &baseline, &intact).unwrap();
        assert!(pi < 0.1, "all wired ablated gave π = {pi}");
    }

    #[test]
    fn calibration_pool_is_class_balanced() {
        let model = desk_copyhead(Redundancy::Exclusive, 1);
        let pool = gen_calibration_pool(&model, 10, 0.1, 19).unwrap();
        let mut counts = vec![0usize; model.wiring.n_classes];
        for seq in &pool {
            let k = model
                .class_targets
                .iter()
                .position(|&t| t == seq.target_token)
                .unwrap();
            counts[k] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1, "counts {counts:?}");
    }

    #[test]
    fn pooled_baseline_differs_from_single_sequence_baseline() {
        let model = desk_copyhead(Redundancy::Exclusive, 1);
        let cfg = &model.config;
        let pool = gen_calibration_pool(&model, 100, 0.1, 20).unwrap();
        let pooled = compute_baseline_kv(cfg, &model.weights, &pool, "pool").unwrap();
        let single = compute_baseline_kv(cfg, &model.weights, &pool[..1], "one").unwrap();
        let mut frob = 0.0f64;
        for n in 0..cfg.n_total_heads() {
            for (a, b) in pooled.v[n].as_slice().iter().zip(single.v[n].as_slice()) {
                frob += ((a - b) as f64).powi(2);
            }
            for (a, b) in pooled.k[n].as_slice().iter().zip(single.k[n].as_slice()) {
                frob += ((a - b) as f64).powi(2);
            }
        }
        assert!(frob.sqrt() >= 1e-3, "Frobenius distance {}", frob.sqrt());
    }

    #[test]
    fn wiring_validation_rejects_infeasible_specs() {
        let cfg = desk_config();
        let good = WiringSpec::standard(&cfg, Redundancy::Exclusive, 3).unwrap();

        let mut bad = good.clone();
        bad.wired_heads = vec![(1, 0), (2, 1)];
        assert!(bad.validate(&cfg).is_err(), "cross-layer wiring must fail");

        let mut bad = good.clone();
        bad.wired_heads = vec![(1, cfg.n_heads)];
        assert!(bad.validate(&cfg).is_err(), "head out of range must fail");

        let mut bad = good.clone();
        bad.receive_positions = vec![0];
        assert!(bad.validate(&cfg).is_err(), "receive set without the final position must fail");

        let mut bad = good.clone();
        bad.signal_tokens = vec![cfg.n_image];
        assert!(bad.validate(&cfg).is_err(), "signal token out of range must fail");

        let mut bad = good.clone();
        bad.n_classes = cfg.d_head + 1;
        assert!(bad.validate(&cfg).is_err(), "too many classes must fail");

        let mut bad = good;
        bad.decoy_heads = vec![bad.wired_heads[0]];
        assert!(bad.validate(&cfg).is_err(), "decoy overlapping S must fail");
    }

    #[test]
    fn construction_self_test_grid_passes() {
        let cases = verify_construction(23).unwrap();
        assert_eq!(cases.len(), 8);
        for case in &cases {
            assert!(
                case.passed,
                "case {} failed: {:?}",
                case.label,
                case.checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| format!("{}: {}", c.name, c.detail))
                    .collect::<Vec<_>>()
            );
        }
    }

    /// Same user seed for the model and its tasks must not correlate the
    /// two: if task noise replayed the direction bank's raw Gaussians, a
    /// noise row would align almost perfectly with the beacon and — after
    /// the pre-attention norm equalizes row magnitudes — outcompete the
    /// genuine signal row for wired-head attention.
    #[test]
    fn same_seed_tasks_stay_independent_of_the_direction_bank() {
        let cfg = desk_config();
        let wiring = WiringSpec::standard(&cfg, Redundancy::Exclusive, 3).unwrap();
        for seed in [0u64, 1, 7] {
            let model = gen_copyhead_model(&cfg, &wiring, seed).unwrap();
            let tasks = gen_tasks(&model, 4, DEFAULT_NOISE_STD, seed).unwrap();
            for seq in &tasks {
                for r in 0..cfg.n_image {
                    if wiring.signal_tokens.contains(&r) {
                        continue;
                    }
                    let row = seq.image.row(r);
                    let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    let along: f64 = row
                        .iter()
                        .zip(&model.directions.beacon)
                        .map(|(&v, &b)| v as f64 * b as f64)
                        .sum();
                    assert!(
                        (along / norm).abs() < 0.5,
                        "seed {seed}: noise row {r} is {:.3}-aligned with the beacon",
                        along / norm
                    );
                }
            }
        }
    }
}
