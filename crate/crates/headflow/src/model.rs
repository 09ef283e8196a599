//! The toy multimodal decoder-only transformer.
//!
//! Architecture, fixed by contract: a residual stream of width `d_model`;
//! per block a pre-RMS-norm followed by causal multi-head attention (separate
//! `d_model×d_head` projections per head, output projection `d_head×d_model`),
//! then a pre-RMS-norm followed by a GELU FFN of width `4·d_model`; learned
//! absolute positional embeddings; all tensors `f32`. A sequence is `n_image`
//! continuous image-token embeddings at positions `0..n_image` followed by
//! text token ids. The readout is the logit row at the final text position.
//!
//! [`forward`] takes an optional [`InterventionPlan`]; the plan swaps image
//! K/V rows for baseline rows per the substitution rule, *per query row*, so
//! within one head different text queries can see different key matrices.
//! Image-query rows are never altered — which is what makes the image-side
//! computation plan-invariant and enables [`TextOnlyRunner`], a fast path
//! that replays only the text rows against cached image K/V. The fast path
//! is bitwise-identical to the full forward (pinned by tests), not merely
//! close.
//!
//! GELU uses the tanh form 0.5x(1+tanh(√(2/π)(x+0.044715x³))) — the usual
//! transformer choice, and self-consistent here since every model in the
//! toolkit ships through this same forward.

use serde::{Deserialize, Serialize};

use crate::intervention::{substitution_rule, InterventionPlan};
use crate::numerics::{dot, softmax_row, Matrix, MASK_SENTINEL};
use crate::{Error, Result};

/// Epsilon inside the RMS-norm square root; keeps all-zero rows finite.
pub const RMS_EPS: f32 = 1e-6;

// ---------------------------------------------------------------------------
// Config / weights / sequences
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    /// Number of image positions (first `n_image` of every sequence).
    pub n_image: usize,
    /// Maximum text length the positional table supports.
    pub n_text_max: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_head,
            self.vocab_size,
            self.n_image,
            self.n_text_max,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::invalid("all model dimensions must be positive".to_string()));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::invalid(format!(
                "n_heads·d_head must equal d_model ({}·{} != {})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        let side = (self.n_image as f64).sqrt().round() as usize;
        if side * side != self.n_image {
            return Err(Error::invalid(format!(
                "n_image {} is not a perfect square (image positions form a grid)",
                self.n_image
            )));
        }
        Ok(())
    }

    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Flat head index, row-major over (layer, head).
    pub fn head_index(&self, layer: usize, head: usize) -> usize {
        layer * self.n_heads + head
    }

    pub fn head_at(&self, index: usize) -> (usize, usize) {
        (index / self.n_heads, index % self.n_heads)
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn max_seq(&self) -> usize {
        self.n_image + self.n_text_max
    }

    /// Side length of the image grid (`n_image` is a validated square).
    pub fn image_side(&self) -> usize {
        (self.n_image as f64).sqrt().round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct HeadWeights {
    /// `d_model × d_head`
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// `d_head × d_model`
    pub wo: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    /// Pre-attention RMS-norm gain, length `d_model`.
    pub attn_norm: Vec<f32>,
    pub heads: Vec<HeadWeights>,
    /// Pre-FFN RMS-norm gain, length `d_model`.
    pub ffn_norm: Vec<f32>,
    /// `d_model × d_ff`
    pub ffn_w1: Matrix,
    /// `d_ff × d_model`
    pub ffn_w2: Matrix,
}

#[derive(Debug, Clone)]
pub struct WeightSet {
    /// `vocab_size × d_model`
    pub token_embedding: Matrix,
    /// `max_seq × d_model`, added at every position (image rows included).
    pub pos_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    /// Final RMS-norm gain before the unembedding, length `d_model`.
    pub final_norm: Vec<f32>,
    /// `d_model × vocab_size`
    pub unembedding: Matrix,
}

impl WeightSet {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let shape = |m: &Matrix, r: usize, c: usize, what: &str| -> Result<()> {
            if m.rows() != r || m.cols() != c {
                return Err(Error::shape(format!(
                    "{what}: expected {r}x{c}, found {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        shape(&self.token_embedding, cfg.vocab_size, cfg.d_model, "token embedding")?;
        shape(&self.pos_embedding, cfg.max_seq(), cfg.d_model, "positional embedding")?;
        shape(&self.unembedding, cfg.d_model, cfg.vocab_size, "unembedding")?;
        if self.final_norm.len() != cfg.d_model {
            return Err(Error::shape("final norm gain length mismatch".to_string()));
        }
        if self.layers.len() != cfg.n_layers {
            return Err(Error::shape(format!(
                "weight set has {} layers, config says {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.attn_norm.len() != cfg.d_model || layer.ffn_norm.len() != cfg.d_model {
                return Err(Error::shape(format!("layer {l}: norm gain length mismatch")));
            }
            if layer.heads.len() != cfg.n_heads {
                return Err(Error::shape(format!("layer {l}: head count mismatch")));
            }
            for (h, head) in layer.heads.iter().enumerate() {
                let tag = format!("layer {l} head {h}");
                shape(&head.wq, cfg.d_model, cfg.d_head, &format!("{tag} wq"))?;
                shape(&head.wk, cfg.d_model, cfg.d_head, &format!("{tag} wk"))?;
                shape(&head.wv, cfg.d_model, cfg.d_head, &format!("{tag} wv"))?;
                shape(&head.wo, cfg.d_head, cfg.d_model, &format!("{tag} wo"))?;
            }
            shape(&layer.ffn_w1, cfg.d_model, cfg.d_ff(), &format!("layer {l} ffn w1"))?;
            shape(&layer.ffn_w2, cfg.d_ff(), cfg.d_model, &format!("layer {l} ffn w2"))?;
        }
        let finite = self
            .token_embedding
            .as_slice()
            .iter()
            .chain(self.pos_embedding.as_slice())
            .chain(self.unembedding.as_slice())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("non-finite weight values".to_string()));
        }
        Ok(())
    }

    pub fn all_zero(cfg: &ModelConfig) -> Self {
        WeightSet {
            token_embedding: Matrix::zeros(cfg.vocab_size, cfg.d_model),
            pos_embedding: Matrix::zeros(cfg.max_seq(), cfg.d_model),
            layers: (0..cfg.n_layers)
                .map(|_| LayerWeights {
                    attn_norm: vec![1.0; cfg.d_model],
                    heads: (0..cfg.n_heads)
                        .map(|_| HeadWeights {
                            wq: Matrix::zeros(cfg.d_model, cfg.d_head),
                            wk: Matrix::zeros(cfg.d_model, cfg.d_head),
                            wv: Matrix::zeros(cfg.d_model, cfg.d_head),
                            wo: Matrix::zeros(cfg.d_head, cfg.d_model),
                        })
                        .collect(),
                    ffn_norm: vec![1.0; cfg.d_model],
                    ffn_w1: Matrix::zeros(cfg.d_model, cfg.d_ff()),
                    ffn_w2: Matrix::zeros(cfg.d_ff(), cfg.d_model),
                })
                .collect(),
            final_norm: vec![1.0; cfg.d_model],
            unembedding: Matrix::zeros(cfg.d_model, cfg.vocab_size),
        }
    }
}

/// One attribution subject: an image embedding block, a text prompt, and the
/// vocabulary entry whose logit is being explained.
#[derive(Debug, Clone)]
pub struct MultimodalSequence {
    /// `n_image × d_model` continuous embeddings.
    pub image: Matrix,
    pub text_tokens: Vec<u32>,
    pub target_token: u32,
}

impl MultimodalSequence {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.image.rows() != cfg.n_image || self.image.cols() != cfg.d_model {
            return Err(Error::shape(format!(
                "image block is {}x{}, model expects {}x{}",
                self.image.rows(),
                self.image.cols(),
                cfg.n_image,
                cfg.d_model
            )));
        }
        if self.text_tokens.is_empty() {
            return Err(Error::invalid("sequence needs at least one text token".to_string()));
        }
        if self.text_tokens.len() > cfg.n_text_max {
            return Err(Error::invalid(format!(
                "{} text tokens exceed n_text_max {}",
                self.text_tokens.len(),
                cfg.n_text_max
            )));
        }
        if let Some(&t) = self.text_tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!("text token id {t} outside vocabulary")));
        }
        if self.target_token as usize >= cfg.vocab_size {
            return Err(Error::invalid(format!(
                "target token id {} outside vocabulary",
                self.target_token
            )));
        }
        if self.image.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite image embedding values".to_string()));
        }
        Ok(())
    }

    pub fn n_text(&self) -> usize {
        self.text_tokens.len()
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Captured internals of one forward call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Post-softmax attention per head (`layer·H + head`), each `P×P` with
    /// exact zeros above the diagonal.
    pub attention: Vec<Matrix>,
    /// Per-head, per-position output vectors after the head's `W_O`
    /// (`P × d_model` each) — the quantity a head adds to the residual.
    pub head_outputs: Vec<Matrix>,
    /// Residual stream at the final text position, before the final norm.
    pub final_residual: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Raw logits at the final text position.
    pub logits: Vec<f32>,
    pub trace: Option<ForwardTrace>,
}

pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn rms_norm_row(src: &[f32], gain: &[f32], dst: &mut [f32]) {
    let mut ss = 0.0f32;
    for &v in src {
        ss += v * v;
    }
    let denom = (ss / src.len() as f32 + RMS_EPS).sqrt();
    for c in 0..src.len() {
        dst[c] = src[c] / denom * gain[c];
    }
}

fn rms_norm_rows(src: &Matrix, gain: &[f32]) -> Matrix {
    let mut out = Matrix::zeros(src.rows(), src.cols());
    for r in 0..src.rows() {
        rms_norm_row(src.row(r), gain, out.row_mut(r));
    }
    out
}

/// `a · b`, cache-friendly i-k-j accumulation (deterministic order).
fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    let m = b.cols();
    for i in 0..a.rows() {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for (k, &av) in ar.iter().enumerate() {
            let br = b.row(k);
            for j in 0..m {
                or[j] += av * br[j];
            }
        }
    }
    out
}

/// Which heads / FFNs are entirely +0.0 and can be skipped bit-exactly.
///
/// Only exact +0.0 bit patterns count: a -0.0 weight can produce -0.0
/// products and flip accumulator signs, so it disqualifies the block.
#[derive(Debug, Clone)]
pub(crate) struct ZeroMap {
    pub heads: Vec<bool>,
    pub ffn: Vec<bool>,
}

impl ZeroMap {
    pub(crate) fn of(cfg: &ModelConfig, w: &WeightSet) -> Self {
        let plus_zero = |m: &Matrix| m.as_slice().iter().all(|v| v.to_bits() == 0);
        let mut heads = Vec::with_capacity(cfg.n_total_heads());
        let mut ffn = Vec::with_capacity(cfg.n_layers);
        for layer in &w.layers {
            for h in &layer.heads {
                heads.push(plus_zero(&h.wq) && plus_zero(&h.wk) && plus_zero(&h.wv) && plus_zero(&h.wo));
            }
            ffn.push(plus_zero(&layer.ffn_w1) && plus_zero(&layer.ffn_w2));
        }
        ZeroMap { heads, ffn }
    }

    #[cfg(test)]
    pub(crate) fn none(cfg: &ModelConfig) -> Self {
        ZeroMap {
            heads: vec![false; cfg.n_total_heads()],
            ffn: vec![false; cfg.n_layers],
        }
    }
}

/// Full forward pass. `plan = None` is a clean run; a no-op plan produces
/// bitwise-identical output to `None` (same code path, no substitutions).
pub fn forward(
    cfg: &ModelConfig,
    weights: &WeightSet,
    seq: &MultimodalSequence,
    plan: Option<&InterventionPlan>,
    want_trace: bool,
) -> Result<ForwardOutput> {
    let zero = ZeroMap::of(cfg, weights);
    forward_impl(cfg, weights, seq, plan, want_trace, &zero)
}

pub(crate) fn forward_impl(
    cfg: &ModelConfig,
    weights: &WeightSet,
    seq: &MultimodalSequence,
    plan: Option<&InterventionPlan>,
    want_trace: bool,
    zero: &ZeroMap,
) -> Result<ForwardOutput> {
    weights.validate(cfg)?;
    seq.validate(cfg)?;
    if let Some(p) = plan {
        p.validate(cfg, seq.n_text())?;
    }
    let n_img = cfg.n_image;
    let p_total = n_img + seq.n_text();
    let d = cfg.d_model;
    let dk = cfg.d_head;
    let sqrt_dk = (dk as f32).sqrt();

    // Input embeddings: image rows are continuous embeddings, text rows are
    // token-table lookups; learned positions are added everywhere.
    let mut resid = Matrix::zeros(p_total, d);
    for p in 0..p_total {
        let row = resid.row_mut(p);
        if p < n_img {
            let img = seq.image.row(p);
            let pos = weights.pos_embedding.row(p);
            for c in 0..d {
                row[c] = img[c] + pos[c];
            }
        } else {
            let tok = weights.token_embedding.row(seq.text_tokens[p - n_img] as usize);
            let pos = weights.pos_embedding.row(p);
            for c in 0..d {
                row[c] = tok[c] + pos[c];
            }
        }
    }

    let mut trace = if want_trace {
        Some(ForwardTrace {
            attention: Vec::with_capacity(cfg.n_total_heads()),
            head_outputs: Vec::with_capacity(cfg.n_total_heads()),
            final_residual: Vec::new(),
        })
    } else {
        None
    };

    let mut scores = vec![0.0f32; p_total];
    let mut head_acc = vec![0.0f32; dk];
    for (l, layer) in weights.layers.iter().enumerate() {
        let xn = rms_norm_rows(&resid, &layer.attn_norm);
        for (h, hw) in layer.heads.iter().enumerate() {
            let n = cfg.head_index(l, h);
            if zero.heads[n] && !want_trace {
                // All-+0.0 head: its output is provably the +0.0 vector.
                // Still add it so accumulator sign normalization matches the
                // dense path bit for bit.
                for p in 0..p_total {
                    let row = resid.row_mut(p);
                    for c in 0..d {
                        row[c] += 0.0;
                    }
                }
                continue;
            }
            let q = matmul(&xn, &hw.wq);
            let k = matmul(&xn, &hw.wk);
            let v = matmul(&xn, &hw.wv);
            let mut att_rows = want_trace.then(|| Matrix::zeros(p_total, p_total));
            let mut out_rows = want_trace.then(|| Matrix::zeros(p_total, d));
            for i in 0..p_total {
                let qi = q.row(i);
                for j in 0..=i {
                    let sub = plan
                        .map(|pl| substitution_rule(pl, n, i, j, n_img))
                        .unwrap_or(false);
                    let kj = if sub { pl_baseline_k(plan, n).row(j) } else { k.row(j) };
                    scores[j] = dot(qi, kj) / sqrt_dk;
                }
                for s in scores.iter_mut().take(p_total).skip(i + 1) {
                    *s = MASK_SENTINEL;
                }
                softmax_row(&mut scores, true)
                    .map_err(|e| Error::degenerate(format!("attention row {i}: {e}")))?;
                head_acc[..dk].fill(0.0);
                for j in 0..=i {
                    let sub = plan
                        .map(|pl| substitution_rule(pl, n, i, j, n_img))
                        .unwrap_or(false);
                    let vj = if sub { pl_baseline_v(plan, n).row(j) } else { v.row(j) };
                    let a = scores[j];
                    for c in 0..dk {
                        head_acc[c] += a * vj[c];
                    }
                }
                if let Some(rows) = att_rows.as_mut() {
                    rows.row_mut(i)[..=i].copy_from_slice(&scores[..=i]);
                }
                // Project through W_O and add into the residual stream.
                let rrow = resid.row_mut(i);
                if let Some(outm) = out_rows.as_mut() {
                    let orow = outm.row_mut(i);
                    for (c2, &hv) in head_acc.iter().enumerate() {
                        let wrow = hw.wo.row(c2);
                        for c in 0..d {
                            orow[c] += hv * wrow[c];
                        }
                    }
                    for c in 0..d {
                        rrow[c] += orow[c];
                    }
                } else {
                    for (c2, &hv) in head_acc.iter().enumerate() {
                        let wrow = hw.wo.row(c2);
                        for c in 0..d {
                            rrow[c] += hv * wrow[c];
                        }
                    }
                }
            }
            if let Some(t) = trace.as_mut() {
                t.attention.push(att_rows.unwrap());
                t.head_outputs.push(out_rows.unwrap());
            }
        }
        apply_ffn(&mut resid, layer, zero.ffn[l]);
    }

    let logits = readout(&resid, p_total - 1, weights, cfg);
    if let Some(t) = trace.as_mut() {
        t.final_residual = resid.row(p_total - 1).to_vec();
    }
    Ok(ForwardOutput { logits, trace })
}

fn pl_baseline_k<'a>(plan: Option<&'a InterventionPlan>, n: usize) -> &'a Matrix {
    &plan.unwrap().baseline.k[n]
}

fn pl_baseline_v<'a>(plan: Option<&'a InterventionPlan>, n: usize) -> &'a Matrix {
    &plan.unwrap().baseline.v[n]
}

fn apply_ffn(resid: &mut Matrix, layer: &LayerWeights, is_zero: bool) {
    let p_total = resid.rows();
    let d = resid.cols();
    if is_zero {
        for p in 0..p_total {
            let row = resid.row_mut(p);
            for c in 0..d {
                row[c] += 0.0;
            }
        }
        return;
    }
    let xn = rms_norm_rows(resid, &layer.ffn_norm);
    let mut hidden = matmul(&xn, &layer.ffn_w1);
    for r in 0..hidden.rows() {
        for v in hidden.row_mut(r) {
            *v = gelu(*v);
        }
    }
    let out = matmul(&hidden, &layer.ffn_w2);
    for p in 0..p_total {
        let row = resid.row_mut(p);
        let orow = out.row(p);
        for c in 0..d {
            row[c] += orow[c];
        }
    }
}

fn readout(resid: &Matrix, pos: usize, weights: &WeightSet, cfg: &ModelConfig) -> Vec<f32> {
    let mut normed = vec![0.0f32; cfg.d_model];
    rms_norm_row(resid.row(pos), &weights.final_norm, &mut normed);
    let mut logits = vec![0.0f32; cfg.vocab_size];
    for (c, &nv) in normed.iter().enumerate() {
        let urow = weights.unembedding.row(c);
        for t in 0..cfg.vocab_size {
            logits[t] += nv * urow[t];
        }
    }
    logits
}

/// Target logit minus the vocabulary mean, in f64. Removes the softmax
/// shift-invariance so logits are comparable across interventions.
pub fn adjusted_logit(logits: &[f32], target_token: u32) -> Result<f64> {
    let t = target_token as usize;
    if t >= logits.len() {
        return Err(Error::invalid(format!(
            "target token {t} outside vocabulary of {}",
            logits.len()
        )));
    }
    let mut sum = 0.0f64;
    for &v in logits {
        if !v.is_finite() {
            return Err(Error::degenerate("non-finite logit".to_string()));
        }
        sum += v as f64;
    }
    Ok(logits[t] as f64 - sum / logits.len() as f64)
}

// ---------------------------------------------------------------------------
// Image-prefix cache and the text-only fast path
// ---------------------------------------------------------------------------

/// Per-(layer, head) image K/V blocks of a clean forward, `n_image × d_head`
/// each, indexed `layer·H + head`.
///
/// Because image rows are causal over image rows only and interventions
/// never touch image queries, these blocks are plan-invariant and can be
/// computed by running the image prefix alone; the values are bitwise those
/// of the full forward.
pub fn image_prefix_kv(
    cfg: &ModelConfig,
    weights: &WeightSet,
    seq: &MultimodalSequence,
) -> Result<Vec<(Matrix, Matrix)>> {
    weights.validate(cfg)?;
    seq.validate(cfg)?;
    let n_img = cfg.n_image;
    let d = cfg.d_model;
    let dk = cfg.d_head;
    let sqrt_dk = (dk as f32).sqrt();

    let mut resid = Matrix::zeros(n_img, d);
    for p in 0..n_img {
        let row = resid.row_mut(p);
        let img = seq.image.row(p);
        let pos = weights.pos_embedding.row(p);
        for c in 0..d {
            row[c] = img[c] + pos[c];
        }
    }

    let mut out = Vec::with_capacity(cfg.n_total_heads());
    let mut scores = vec![0.0f32; n_img];
    let mut head_acc = vec![0.0f32; dk];
    for layer in &weights.layers {
        let xn = rms_norm_rows(&resid, &layer.attn_norm);
        for hw in &layer.heads {
            let q = matmul(&xn, &hw.wq);
            let k = matmul(&xn, &hw.wk);
            let v = matmul(&xn, &hw.wv);
            for i in 0..n_img {
                let qi = q.row(i);
                for j in 0..=i {
                    scores[j] = dot(qi, k.row(j)) / sqrt_dk;
                }
                for s in scores.iter_mut().take(n_img).skip(i + 1) {
                    *s = MASK_SENTINEL;
                }
                softmax_row(&mut scores, true)
                    .map_err(|e| Error::degenerate(format!("image attention row {i}: {e}")))?;
                head_acc[..dk].fill(0.0);
                for j in 0..=i {
                    let a = scores[j];
                    let vj = v.row(j);
                    for c in 0..dk {
                        head_acc[c] += a * vj[c];
                    }
                }
                let rrow = resid.row_mut(i);
                for (c2, &hv) in head_acc.iter().enumerate() {
                    let wrow = hw.wo.row(c2);
                    for c in 0..d {
                        rrow[c] += hv * wrow[c];
                    }
                }
            }
            out.push((k, v));
        }
        apply_ffn(&mut resid, layer, false);
    }
    Ok(out)
}

/// Precomputed state for [`TextOnlyRunner::logits`]: the clean image K/V per
/// (layer, head) for one fixed sequence.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    img_kv: Vec<(Matrix, Matrix)>,
}

/// Replays only the text rows of [`forward`] against a [`PrefixCache`].
/// Output is bitwise-identical to the full forward under any plan; the
/// image-side work (the bulk at large `n_image`) is paid once.
#[derive(Debug, Clone)]
pub struct TextOnlyRunner {
    cfg: ModelConfig,
    zero: ZeroMap,
}

impl TextOnlyRunner {
    pub fn new(cfg: &ModelConfig, weights: &WeightSet) -> Result<Self> {
        weights.validate(cfg)?;
        Ok(TextOnlyRunner { cfg: *cfg, zero: ZeroMap::of(cfg, weights) })
    }

    pub fn build_cache(
        &self,
        weights: &WeightSet,
        seq: &MultimodalSequence,
    ) -> Result<PrefixCache> {
        Ok(PrefixCache { img_kv: image_prefix_kv(&self.cfg, weights, seq)? })
    }

    pub fn logits(
        &self,
        weights: &WeightSet,
        seq: &MultimodalSequence,
        cache: &PrefixCache,
        plan: Option<&InterventionPlan>,
    ) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        seq.validate(cfg)?;
        if let Some(p) = plan {
            p.validate(cfg, seq.n_text())?;
        }
        let n_img = cfg.n_image;
        let n_text = seq.n_text();
        let p_total = n_img + n_text;
        let d = cfg.d_model;
        let dk = cfg.d_head;
        let sqrt_dk = (dk as f32).sqrt();

        let mut resid = Matrix::zeros(n_text, d);
        for t in 0..n_text {
            let row = resid.row_mut(t);
            let tok = weights.token_embedding.row(seq.text_tokens[t] as usize);
            let pos = weights.pos_embedding.row(n_img + t);
            for c in 0..d {
                row[c] = tok[c] + pos[c];
            }
        }

        let mut scores = vec![0.0f32; p_total];
        let mut head_acc = vec![0.0f32; dk];
        for (l, layer) in weights.layers.iter().enumerate() {
            let xn = rms_norm_rows(&resid, &layer.attn_norm);
            for (h, hw) in layer.heads.iter().enumerate() {
                let n = cfg.head_index(l, h);
                if self.zero.heads[n] {
                    for t in 0..n_text {
                        let row = resid.row_mut(t);
                        for c in 0..d {
                            row[c] += 0.0;
                        }
                    }
                    continue;
                }
                let (ck, cv) = &cache.img_kv[n];
                let q = matmul(&xn, &hw.wq);
                let kt = matmul(&xn, &hw.wk);
                let vt = matmul(&xn, &hw.wv);
                for t in 0..n_text {
                    let i = n_img + t;
                    let qi = q.row(t);
                    for j in 0..n_img {
                        let sub = plan
                            .map(|pl| substitution_rule(pl, n, i, j, n_img))
                            .unwrap_or(false);
                        let kj = if sub { pl_baseline_k(plan, n).row(j) } else { ck.row(j) };
                        scores[j] = dot(qi, kj) / sqrt_dk;
                    }
                    for tt in 0..=t {
                        scores[n_img + tt] = dot(qi, kt.row(tt)) / sqrt_dk;
                    }
                    for s in scores.iter_mut().take(p_total).skip(i + 1) {
                        *s = MASK_SENTINEL;
                    }
                    softmax_row(&mut scores, true)
                        .map_err(|e| Error::degenerate(format!("attention row {i}: {e}")))?;
                    head_acc[..dk].fill(0.0);
                    for j in 0..n_img {
                        let sub = plan
                            .map(|pl| substitution_rule(pl, n, i, j, n_img))
                            .unwrap_or(false);
                        let vj = if sub { pl_baseline_v(plan, n).row(j) } else { cv.row(j) };
                        let a = scores[j];
                        for c in 0..dk {
                            head_acc[c] += a * vj[c];
                        }
                    }
                    for tt in 0..=t {
                        let a = scores[n_img + tt];
                        let vj = vt.row(tt);
                        for c in 0..dk {
                            head_acc[c] += a * vj[c];
                        }
                    }
                    let rrow = resid.row_mut(t);
                    for (c2, &hv) in head_acc.iter().enumerate() {
                        let wrow = hw.wo.row(c2);
                        for c in 0..d {
                            rrow[c] += hv * wrow[c];
                        }
                    }
                }
            }
            apply_ffn(&mut resid, layer, self.zero.ffn[l]);
        }
        Ok(readout(&resid, n_text - 1, weights, cfg))
    }
}

// ---------------------------------------------------------------------------
// Head-level readouts
// ---------------------------------------------------------------------------

/// Projects a head's output vector through the final norm and unembedding;
/// returns the top-`k` vocabulary entries, ties broken toward lower id.
pub fn logit_lens_head(
    head_output: &[f32],
    weights: &WeightSet,
    k: usize,
) -> Result<Vec<(u32, f32)>> {
    if head_output.len() != weights.final_norm.len() {
        return Err(Error::shape(format!(
            "head output has {} dims, model width is {}",
            head_output.len(),
            weights.final_norm.len()
        )));
    }
    let d = head_output.len();
    let vocab = weights.unembedding.cols();
    let mut normed = vec![0.0f32; d];
    rms_norm_row(head_output, &weights.final_norm, &mut normed);
    let mut logits = vec![0.0f32; vocab];
    for (c, &nv) in normed.iter().enumerate() {
        let urow = weights.unembedding.row(c);
        for t in 0..vocab {
            logits[t] += nv * urow[t];
        }
    }
    let mut order: Vec<u32> = (0..vocab as u32).collect();
    order.sort_by(|&a, &b| {
        logits[b as usize]
            .total_cmp(&logits[a as usize])
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(k.min(vocab))
        .map(|t| (t, logits[t as usize]))
        .collect())
}

/// Mean attention mass each head places on image columns, averaged over text
/// query rows: `(1/n_text)·Σ_{text i} Σ_{image j} a[i][j]`, one value per
/// head in `[0, 1]`.
pub fn image_attention_per_head(
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    n_text: usize,
) -> Result<Vec<f64>> {
    if trace.attention.len() != cfg.n_total_heads() {
        return Err(Error::shape("trace head count mismatch".to_string()));
    }
    let p_total = cfg.n_image + n_text;
    let mut out = Vec::with_capacity(cfg.n_total_heads());
    for att in &trace.attention {
        if att.rows() != p_total || att.cols() != p_total {
            return Err(Error::shape("trace attention shape mismatch".to_string()));
        }
        let mut total = 0.0f64;
        for i in cfg.n_image..p_total {
            let row = att.row(i);
            for &a in &row[..cfg.n_image] {
                total += a as f64;
            }
        }
        out.push(total / n_text as f64);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::intervention::{compute_baseline_kv, HeadMask, ImageMask, TextMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_plan(
        cfg: &ModelConfig,
        n_text: usize,
        baseline: Arc<crate::intervention::BaselineKV>,
        rng: &mut ChaCha8Rng,
    ) -> InterventionPlan {
        let bits = |n: usize, rng: &mut ChaCha8Rng| {
            let mut m = crate::intervention::BitMask::zeros(n);
            for i in 0..n {
                m.set(i, rng.gen_bool(0.5));
            }
            m
        };
        InterventionPlan {
            heads: HeadMask(bits(cfg.n_total_heads(), rng)),
            text: TextMask(bits(n_text, rng)),
            image: ImageMask(bits(cfg.n_image, rng)),
            baseline,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.validate().unwrap();
        cfg.d_head = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.n_image = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn noop_plan_is_bitwise_equal_to_plan_free_forward() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_weights(&cfg, &mut rng);
        let seq = random_sequence(&cfg, &mut rng, 3);
        let pool = vec![random_sequence(&cfg, &mut rng, 3)];
        let baseline = Arc::new(compute_baseline_kv(&cfg, &w, &pool, "t").unwrap());
        let plan = InterventionPlan::noop(baseline, cfg.n_total_heads(), 3, cfg.n_image);
        let a = forward(&cfg, &w, &seq, None, false).unwrap();
        let b = forward(&cfg, &w, &seq, Some(&plan), false).unwrap();
        assert_eq!(
            a.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_weights(&cfg, &mut rng);
        let seq = random_sequence(&cfg, &mut rng, 4);
        let out = forward(&cfg, &w, &seq, None, true).unwrap();
        let trace = out.trace.unwrap();
        let p = cfg.n_image + 4;
        for att in &trace.attention {
            for i in 0..p {
                let row = att.row(i);
                let sum: f32 = row[..=i].iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "row {i} sums to {sum}");
                for &v in &row[i + 1..] {
                    assert_eq!(v, 0.0, "nonzero above diagonal");
                }
            }
        }
    }

    #[test]
    fn changing_a_text_suffix_never_reaches_earlier_positions() {
        // Causality via truncation: the readout at position t of a longer
        // prompt equals the readout of the prompt truncated after t.
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_weights(&cfg, &mut rng);
        let long = random_sequence(&cfg, &mut rng, 4);
        for t in 1..4 {
            let mut short = long.clone();
            short.text_tokens.truncate(t);
            let a = forward(&cfg, &w, &short, None, false).unwrap();
            let mut tampered = long.clone();
            for s in t..4 {
                tampered.text_tokens[s] = (tampered.text_tokens[s] + 1) % cfg.vocab_size as u32;
            }
            tampered.text_tokens.truncate(t);
            let b = forward(&cfg, &w, &tampered, None, false).unwrap();
            assert_eq!(
                a.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "suffix change leaked into position {t}"
            );
        }
    }

    #[test]
    fn zero_block_fast_path_is_bitwise_exact() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = random_weights(&cfg, &mut rng);
        // Zero one head and one FFN entirely.
        w.layers[0].heads[1] = HeadWeights {
            wq: Matrix::zeros(cfg.d_model, cfg.d_head),
            wk: Matrix::zeros(cfg.d_model, cfg.d_head),
            wv: Matrix::zeros(cfg.d_model, cfg.d_head),
            wo: Matrix::zeros(cfg.d_head, cfg.d_model),
        };
        w.layers[1].ffn_w1 = Matrix::zeros(cfg.d_model, cfg.d_ff());
        w.layers[1].ffn_w2 = Matrix::zeros(cfg.d_ff(), cfg.d_model);
        let seq = random_sequence(&cfg, &mut rng, 3);
        let fast = forward(&cfg, &w, &seq, None, false).unwrap();
        let slow = forward_impl(&cfg, &w, &seq, None, false, &ZeroMap::none(&cfg)).unwrap();
        assert_eq!(
            fast.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            slow.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn text_only_runner_matches_full_forward_bitwise() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_weights(&cfg, &mut rng);
        let seq = random_sequence(&cfg, &mut rng, 3);
        let pool: Vec<_> = (0..3).map(|_| random_sequence(&cfg, &mut rng, 3)).collect();
        let baseline = Arc::new(compute_baseline_kv(&cfg, &w, &pool, "t").unwrap());
        let runner = TextOnlyRunner::new(&cfg, &w).unwrap();
        let cache = runner.build_cache(&w, &seq).unwrap();
        for _ in 0..25 {
            let plan = random_plan(&cfg, 3, baseline.clone(), &mut rng);
            let full = forward(&cfg, &w, &seq, Some(&plan), false).unwrap();
            let fast = runner.logits(&w, &seq, &cache, Some(&plan)).unwrap();
            assert_eq!(
                full.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                fast.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        // Clean path too.
        let full = forward(&cfg, &w, &seq, None, false).unwrap();
        let fast = runner.logits(&w, &seq, &cache, None).unwrap();
        assert_eq!(full.logits, fast);
    }

    #[test]
    fn adjusted_logit_of_uniform_logits_is_exactly_zero() {
        let logits = vec![1.25f32; 16];
        assert_eq!(adjusted_logit(&logits, 3).unwrap(), 0.0);
    }

    #[test]
    fn adjusted_logit_known_value() {
        // mean of [2, 0, -1, 3] = 1.0; adjusted(target 0) = 2 - 1 = 1.
        let logits = vec![2.0f32, 0.0, -1.0, 3.0];
        assert_eq!(adjusted_logit(&logits, 0).unwrap(), 1.0);
        assert_eq!(adjusted_logit(&logits, 2).unwrap(), -2.0);
        assert!(adjusted_logit(&logits, 9).is_err());
    }

    #[test]
    fn logit_lens_breaks_ties_toward_lower_id() {
        let cfg = tiny_config();
        let mut w = WeightSet::all_zero(&cfg);
        // Two unembedding columns receive identical projections.
        let mut u = Matrix::zeros(cfg.d_model, cfg.vocab_size);
        for c in 0..cfg.d_model {
            u.set(c, 5, 1.0);
            u.set(c, 2, 1.0);
            u.set(c, 7, 0.5);
        }
        w.unembedding = u;
        let head_out = vec![1.0f32; cfg.d_model];
        let top = logit_lens_head(&head_out, &w, 3).unwrap();
        assert_eq!(top[0].0, 2, "tie must resolve to the lower token id");
        assert_eq!(top[1].0, 5);
        assert_eq!(top[2].0, 7);
        assert_eq!(top[0].1, top[1].1);
    }

    #[test]
    fn uniform_attention_image_weight_matches_closed_form() {
        // Zero Q/K ⇒ uniform attention over the visible prefix, so the image
        // share at text row t is n_image/(n_image+t+1); the per-head weight
        // is the mean over text rows. Independent closed form vs. the trace.
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut w = random_weights(&cfg, &mut rng);
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                w.layers[l].heads[h].wq = Matrix::zeros(cfg.d_model, cfg.d_head);
                w.layers[l].heads[h].wk = Matrix::zeros(cfg.d_model, cfg.d_head);
            }
        }
        let n_text = 3;
        let seq = random_sequence(&cfg, &mut rng, n_text);
        let out = forward(&cfg, &w, &seq, None, true).unwrap();
        let weights_att =
            image_attention_per_head(&cfg, out.trace.as_ref().unwrap(), n_text).unwrap();
        let expected: f64 = (0..n_text)
            .map(|t| cfg.n_image as f64 / (cfg.n_image + t + 1) as f64)
            .sum::<f64>()
            / n_text as f64;
        for (n, w_att) in weights_att.iter().enumerate() {
            assert!(
                (w_att - expected).abs() < 1e-5,
                "head {n}: {w_att} vs closed form {expected}"
            );
            assert!(*w_att >= 0.0 && *w_att <= 1.0);
        }
    }

    #[test]
    fn sequence_validation_rejects_bad_inputs() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let good = random_sequence(&cfg, &mut rng, 3);
        good.validate(&cfg).unwrap();
        let mut bad = good.clone();
        bad.text_tokens.clear();
        assert!(bad.validate(&cfg).is_err());
        let mut bad = good.clone();
        bad.text_tokens = vec![0; cfg.n_text_max + 1];
        assert!(bad.validate(&cfg).is_err());
        let mut bad = good.clone();
        bad.target_token = cfg.vocab_size as u32;
        assert!(bad.validate(&cfg).is_err());
        let mut bad = good;
        bad.image = Matrix::zeros(cfg.n_image, cfg.d_model + 1);
        assert!(bad.validate(&cfg).is_err());
    }
}
