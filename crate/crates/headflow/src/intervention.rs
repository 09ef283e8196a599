//! Ablation masks, the K/V substitution rule, and calibration baselines.
//!
//! The intervention primitive is *mean ablation of image K/V*: instead of
//! zeroing a head or cutting attention edges, the image-token key/value block
//! a head presents to **text queries** is swapped for an average of the same
//! block over a pool of clean calibration runs. The head still attends with
//! a plausible distribution — it just no longer carries sample-specific image
//! information. Three mask axes select where the swap happens:
//!
//! - [`HeadMask`]: one bit per head, row-major `layer·H + head`;
//! - [`TextMask`]: one bit per text position (which *queries* still read真 image);
//! - [`ImageMask`]: one bit per image position (which *columns* stay real).
//!
//! Bit = 1 means "leave intact"; bit = 0 means "ablate". The substitution is
//! an OR across the three axes ([`substitution_rule`]): a baseline row is
//! used exactly when the head is ablated, or the querying text position is
//! blocked, or that image column is blocked. Image-query rows and text-to-
//! text attention are never touched, so the image-side computation of a
//! sequence is identical under every plan — which is also what makes the
//! baseline self-consistent (calibrating on a sequence and ablating that same
//! sequence is a no-op).

use std::sync::Arc;

use crate::model::{self, ModelConfig, MultimodalSequence, WeightSet};
use crate::numerics::Matrix;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Bit masks
// ---------------------------------------------------------------------------

/// Fixed-length vector of 0/1 bits. 1 = intact, 0 = ablated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    bits: Vec<u8>,
}

impl BitMask {
    pub fn ones(n: usize) -> Self {
        BitMask { bits: vec![1; n] }
    }

    pub fn zeros(n: usize) -> Self {
        BitMask { bits: vec![0; n] }
    }

    /// All bits zero except the listed indices.
    pub fn from_indices(n: usize, on: &[usize]) -> Result<Self> {
        let mut m = BitMask::zeros(n);
        for &i in on {
            if i >= n {
                return Err(Error::invalid(format!("mask index {i} out of range (len {n})")));
            }
            m.bits[i] = 1;
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.bits[i] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b == 1)
    }

    pub fn is_all_zeros(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// Copy with bit `i` flipped (e.g. single-knockout masks).
    pub fn with_flipped(&self, i: usize) -> Self {
        let mut m = self.clone();
        m.bits[i] ^= 1;
        m
    }

    pub fn complement(&self) -> Self {
        BitMask { bits: self.bits.iter().map(|b| 1 - b).collect() }
    }

    /// `"0"`/`"1"` characters, index 0 first — the wire encoding.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(s.len());
        for c in s.chars() {
            match c {
                '0' => bits.push(0),
                '1' => bits.push(1),
                other => {
                    return Err(Error::format(format!(
                        "mask strings may only contain 0/1, found {other:?}"
                    )))
                }
            }
        }
        Ok(BitMask { bits })
    }

    /// Entries as 0.0/1.0 — one row of a regression design matrix.
    pub fn to_f32_row(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }
}

impl serde::Serialize for BitMask {
    /// Masks serialize as the same 0/1 strings the wire protocol uses.
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_bit_string())
    }
}

impl<'de> serde::Deserialize<'de> for BitMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BitMask::from_bit_string(&s).map_err(serde::de::Error::custom)
    }
}

macro_rules! mask_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
        pub struct $name(pub BitMask);

        impl $name {
            pub fn ones(n: usize) -> Self {
                $name(BitMask::ones(n))
            }
            pub fn zeros(n: usize) -> Self {
                $name(BitMask::zeros(n))
            }
            pub fn from_indices(n: usize, on: &[usize]) -> Result<Self> {
                Ok($name(BitMask::from_indices(n, on)?))
            }
            pub fn bits(&self) -> &BitMask {
                &self.0
            }
            pub fn len(&self) -> usize {
                self.0.len()
            }
            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
            pub fn get(&self, i: usize) -> bool {
                self.0.get(i)
            }
            pub fn with_flipped(&self, i: usize) -> Self {
                $name(self.0.with_flipped(i))
            }
            pub fn complement(&self) -> Self {
                $name(self.0.complement())
            }
        }
    };
}

mask_newtype! {
    /// Per-head ablation bits, row-major `layer·n_heads + head`.
    HeadMask
}
mask_newtype! {
    /// Per-text-position bits: bit `t` governs the queries of text position `t`.
    TextMask
}
mask_newtype! {
    /// Per-image-position bits: bit `j` governs image key/value column `j`.
    ImageMask
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Calibration-averaged image K/V blocks, one `n_image × d_head` pair per
/// `(layer, head)`. Immutable after calibration; shared read-only by plans.
#[derive(Debug, Clone)]
pub struct BaselineKV {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_image: usize,
    pub d_head: usize,
    /// Indexed `layer·n_heads + head`.
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Identifier of the calibration set (free-form, e.g. file digest).
    pub provenance: String,
    /// Number of sequences averaged.
    pub n_sequences: usize,
}

impl BaselineKV {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.n_layers != cfg.n_layers
            || self.n_heads != cfg.n_heads
            || self.n_image != cfg.n_image
            || self.d_head != cfg.d_head
        {
            return Err(Error::shape(format!(
                "baseline dims ({}, {}, {}, {}) do not match model config ({}, {}, {}, {})",
                self.n_layers,
                self.n_heads,
                self.n_image,
                self.d_head,
                cfg.n_layers,
                cfg.n_heads,
                cfg.n_image,
                cfg.d_head
            )));
        }
        let lh = self.n_layers * self.n_heads;
        if self.k.len() != lh || self.v.len() != lh {
            return Err(Error::shape("baseline tensor count mismatch".to_string()));
        }
        for m in self.k.iter().chain(&self.v) {
            if m.rows() != self.n_image || m.cols() != self.d_head {
                return Err(Error::shape("baseline block shape mismatch".to_string()));
            }
        }
        Ok(())
    }
}

/// Averages the per-layer image K/V blocks of clean forwards over a
/// calibration pool. Every sequence must share the model's image geometry.
///
/// Accumulation is in f64 and the pool is processed in order, so the result
/// is deterministic; a single-sequence pool reproduces that sequence's own
/// K/V exactly (mean of one), which underpins the self-calibration identity.
pub fn compute_baseline_kv(
    cfg: &ModelConfig,
    weights: &WeightSet,
    pool: &[MultimodalSequence],
    provenance: &str,
) -> Result<BaselineKV> {
    if pool.is_empty() {
        return Err(Error::invalid("calibration pool is empty".to_string()));
    }
    let lh = cfg.n_layers * cfg.n_heads;
    let block = cfg.n_image * cfg.d_head;
    let mut acc_k = vec![vec![0.0f64; block]; lh];
    let mut acc_v = vec![vec![0.0f64; block]; lh];
    for seq in pool {
        seq.validate(cfg)?;
        let kv = model::image_prefix_kv(cfg, weights, seq)?;
        for (n, (k, v)) in kv.iter().enumerate() {
            for (i, val) in k.as_slice().iter().enumerate() {
                acc_k[n][i] += *val as f64;
            }
            for (i, val) in v.as_slice().iter().enumerate() {
                acc_v[n][i] += *val as f64;
            }
        }
    }
    let count = pool.len() as f64;
    let to_matrix = |acc: &Vec<f64>| -> Result<Matrix> {
        Matrix::from_vec(
            cfg.n_image,
            cfg.d_head,
            acc.iter().map(|v| (v / count) as f32).collect(),
        )
    };
    let k = acc_k.iter().map(&to_matrix).collect::<Result<Vec<_>>>()?;
    let v = acc_v.iter().map(&to_matrix).collect::<Result<Vec<_>>>()?;
    Ok(BaselineKV {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        n_image: cfg.n_image,
        d_head: cfg.d_head,
        k,
        v,
        provenance: provenance.to_string(),
        n_sequences: pool.len(),
    })
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

/// A complete intervention: the three mask axes plus the baseline to
/// substitute. Plans are cheap value objects; the baseline is shared.
#[derive(Debug, Clone)]
pub struct InterventionPlan {
    pub heads: HeadMask,
    pub text: TextMask,
    pub image: ImageMask,
    pub baseline: Arc<BaselineKV>,
}

impl InterventionPlan {
    /// All-ones plan: semantically a clean forward.
    pub fn noop(baseline: Arc<BaselineKV>, n_total_heads: usize, n_text: usize, n_image: usize) -> Self {
        InterventionPlan {
            heads: HeadMask::ones(n_total_heads),
            text: TextMask::ones(n_text),
            image: ImageMask::ones(n_image),
            baseline,
        }
    }

    pub fn is_noop(&self) -> bool {
        self.heads.bits().is_all_ones()
            && self.text.bits().is_all_ones()
            && self.image.bits().is_all_ones()
    }

    /// Checks the three mask lengths against the model/sequence geometry.
    pub fn validate(&self, cfg: &ModelConfig, n_text: usize) -> Result<()> {
        if self.heads.len() != cfg.n_total_heads() {
            return Err(Error::shape(format!(
                "head mask has {} bits, model has {} heads",
                self.heads.len(),
                cfg.n_total_heads()
            )));
        }
        if self.text.len() != n_text {
            return Err(Error::shape(format!(
                "text mask has {} bits, sequence has {n_text} text positions",
                self.text.len()
            )));
        }
        if self.image.len() != cfg.n_image {
            return Err(Error::shape(format!(
                "image mask has {} bits, model has {} image positions",
                self.image.len(),
                cfg.n_image
            )));
        }
        self.baseline.validate(cfg)
    }
}

/// Decides whether attention of `query_pos` onto `key_pos` inside head
/// `head_index` reads the baseline K/V row instead of the live one.
///
/// True exactly when the key is an image position, the query is a text
/// position, and at least one of the three mask axes ablates the edge.
/// Image-query rows and text keys always return false: the intervention
/// never alters the image-side computation or text-to-text attention.
#[inline]
pub fn substitution_rule(
    plan: &InterventionPlan,
    head_index: usize,
    query_pos: usize,
    key_pos: usize,
    n_image: usize,
) -> bool {
    if query_pos < n_image || key_pos >= n_image {
        return false;
    }
    !plan.heads.get(head_index) || !plan.text.get(query_pos - n_image) || !plan.image.get(key_pos)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_baseline() -> Arc<BaselineKV> {
        Arc::new(BaselineKV {
            n_layers: 1,
            n_heads: 2,
            n_image: 4,
            d_head: 2,
            k: (0..2).map(|_| Matrix::zeros(4, 2)).collect(),
            v: (0..2).map(|_| Matrix::zeros(4, 2)).collect(),
            provenance: "test".to_string(),
            n_sequences: 1,
        })
    }

    fn plan(heads: &[usize], text: &[usize], image: &[usize]) -> InterventionPlan {
        InterventionPlan {
            heads: HeadMask::from_indices(2, heads).unwrap(),
            text: TextMask::from_indices(3, text).unwrap(),
            image: ImageMask::from_indices(4, image).unwrap(),
            baseline: empty_baseline(),
        }
    }

    #[test]
    fn bit_string_round_trip() {
        let m = BitMask::from_indices(6, &[0, 3, 5]).unwrap();
        assert_eq!(m.to_bit_string(), "100101");
        assert_eq!(BitMask::from_bit_string("100101").unwrap(), m);
        assert!(BitMask::from_bit_string("10x1").is_err());
    }

    #[test]
    fn flip_and_complement() {
        let m = BitMask::ones(4).with_flipped(2);
        assert_eq!(m.to_bit_string(), "1101");
        assert_eq!(m.complement().to_bit_string(), "0010");
        assert_eq!(m.count_ones(), 3);
    }

    #[test]
    fn substitution_truth_table() {
        let n_image = 4;
        // Head 1 intact / head 0 ablated; text position 1 intact, 0 and 2
        // blocked; image positions {0,2} intact, {1,3} blocked.
        let p = plan(&[1], &[1], &[0, 2]);

        // Image-query rows: never substituted, regardless of masks.
        for q in 0..n_image {
            for k in 0..q + 1 {
                assert!(!substitution_rule(&p, 0, q, k, n_image));
            }
        }
        // Text-to-text attention: never substituted.
        assert!(!substitution_rule(&p, 0, n_image + 1, n_image, n_image));

        // Ablated head: every image key substituted for every text query.
        for t in 0..3 {
            for j in 0..n_image {
                assert!(substitution_rule(&p, 0, n_image + t, j, n_image));
            }
        }
        // Intact head, intact text query: only blocked image columns swap.
        assert!(!substitution_rule(&p, 1, n_image + 1, 0, n_image));
        assert!(substitution_rule(&p, 1, n_image + 1, 1, n_image));
        assert!(!substitution_rule(&p, 1, n_image + 1, 2, n_image));
        assert!(substitution_rule(&p, 1, n_image + 1, 3, n_image));
        // Intact head, blocked text query: every image column swaps.
        for j in 0..n_image {
            assert!(substitution_rule(&p, 1, n_image + 0, j, n_image));
        }
    }

    #[test]
    fn noop_plan_substitutes_nothing() {
        let p = InterventionPlan::noop(empty_baseline(), 2, 3, 4);
        assert!(p.is_noop());
        for head in 0..2 {
            for q in 0..7 {
                for k in 0..7 {
                    assert!(!substitution_rule(&p, head, q, k, 4));
                }
            }
        }
    }

    #[test]
    fn plan_validation_checks_lengths() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_head: 2,
            vocab_size: 8,
            n_image: 4,
            n_text_max: 3,
        };
        let good = plan(&[0], &[0], &[0]);
        good.validate(&cfg, 3).unwrap();
        let mut bad = good.clone();
        bad.heads = HeadMask::ones(5);
        assert!(bad.validate(&cfg, 3).is_err());
        let mut bad = good.clone();
        bad.image = ImageMask::ones(3);
        assert!(bad.validate(&cfg, 3).is_err());
        assert!(good.validate(&cfg, 2).is_err());
    }
}
