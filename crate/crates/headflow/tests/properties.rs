//! Randomized checks of the unconditional guarantees the crate advertises:
//! softmax rows are distributions, metric identities, affine normalization,
//! mask round trips, the substitution rule's composition law, lossless
//! reshapes, solver objective monotonicity, and attention-row invariants
//! under arbitrary intervention plans. Fixed-seed generators keep every run
//! identical; proptest's shrinker still reduces any future counterexample.

use std::sync::Arc;

use proptest::prelude::*;

use headflow::attribution::{normalize_pi, Anchors};
use headflow::intervention::{
    substitution_rule, BaselineKV, BitMask, HeadMask, ImageMask, InterventionPlan, TextMask,
};
use headflow::model::forward;
use headflow::numerics::{elastic_net_fit, fit_metrics, row_softmax, Matrix, MASK_SENTINEL};
use headflow::synthetic::{desk_config, gen_random_model, gen_random_tasks};
use headflow::tokenflow::grid_from_flat;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Numerics
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    /// Every row of a softmax is a probability vector; sentinel entries map
    /// to exactly zero and never join the normalization.
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..96,
        raw in proptest::collection::vec(-60.0f32..60.0, 1..480),
        sentinels in proptest::collection::vec(any::<bool>(), 1..480),
    ) {
        let mut data = vec![0.0f32; rows * cols];
        let mut keep_one_live = vec![false; rows];
        for (i, cell) in data.iter_mut().enumerate() {
            let r = i / cols;
            let v = raw[i % raw.len()];
            if sentinels[i % sentinels.len()] && keep_one_live[r] {
                *cell = MASK_SENTINEL;
            } else {
                *cell = v;
                keep_one_live[r] = true;
            }
        }
        let m = Matrix::from_vec(rows, cols, data.clone()).unwrap();
        let sm = row_softmax(&m, true).unwrap();
        for r in 0..rows {
            let mut sum = 0.0f64;
            for c in 0..cols {
                let p = sm.get(r, c);
                prop_assert!(p >= 0.0);
                if data[r * cols + c] == MASK_SENTINEL {
                    prop_assert_eq!(p, 0.0);
                }
                sum += p as f64;
            }
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
        }
    }

    /// A prediction identical to the truth scores (1, 1).
    #[test]
    fn perfect_prediction_metrics_are_one(
        y in proptest::collection::vec(-100.0f64..100.0, 2..64),
    ) {
        let spread = y.iter().cloned().fold(f64::MIN, f64::max)
            - y.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-6);
        let m = fit_metrics(&y, &y).unwrap();
        prop_assert!((m.r2 - 1.0).abs() <= 1e-12);
        prop_assert!((m.pearson - 1.0).abs() <= 1e-12);
    }

    /// Normalization is the exact affine map sending the anchors to 0 and 1;
    /// values outside the anchor interval pass through unclamped.
    #[test]
    fn normalization_is_affine_and_unclamped(
        zero in -10.0f64..10.0,
        gap in prop_oneof![0.1f64..10.0, -10.0f64..-0.1],
        t in -2.0f64..3.0,
    ) {
        let anchors = Anchors { raw_zero: zero, raw_one: zero + gap };
        prop_assert_eq!(normalize_pi(zero, &anchors).unwrap(), 0.0);
        prop_assert_eq!(normalize_pi(zero + gap, &anchors).unwrap(), 1.0);
        let pi = normalize_pi(zero + t * gap, &anchors).unwrap();
        prop_assert!((pi - t).abs() <= 1e-9 * t.abs().max(1.0), "π = {pi} for t = {t}");
    }

    /// θ is measured on the normalized scale, so the grid reshape must be a
    /// pure re-indexing: flattening it back recovers every value bitwise.
    #[test]
    fn grid_reshape_is_a_bijection(v in proptest::collection::vec(-5.0f64..5.0, 1..82)) {
        let side = (v.len() as f64).sqrt().round() as usize;
        let grid = grid_from_flat(&v);
        if side * side == v.len() {
            let g = grid.unwrap();
            prop_assert_eq!(g.len(), side);
            let flat: Vec<f64> = g.into_iter().flatten().collect();
            prop_assert_eq!(flat, v);
        } else {
            prop_assert!(grid.is_err());
        }
    }
}

// ---------------------------------------------------------------------------
// Masks and the substitution rule
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn bit_string_round_trips(bits in proptest::collection::vec(any::<bool>(), 1..64)) {
        let mut m = BitMask::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            m.set(i, b);
        }
        let s = m.to_bit_string();
        prop_assert_eq!(s.len(), bits.len());
        prop_assert_eq!(BitMask::from_bit_string(&s).unwrap(), m.clone());
        prop_assert_eq!(m.count_ones(), bits.iter().filter(|&&b| b).count());
        prop_assert_eq!(m.complement().count_ones(), bits.len() - m.count_ones());
    }

    /// Composing two plans by AND-ing their masks replaces exactly the union
    /// of the (head, query, key) triples each plan replaces alone — ablation
    /// only ever grows, never cancels.
    #[test]
    fn substitution_composes_as_a_union(
        ha in proptest::collection::vec(any::<bool>(), 6),
        hb in proptest::collection::vec(any::<bool>(), 6),
        ta in proptest::collection::vec(any::<bool>(), 4),
        tb in proptest::collection::vec(any::<bool>(), 4),
        ia in proptest::collection::vec(any::<bool>(), 5),
        ib in proptest::collection::vec(any::<bool>(), 5),
    ) {
        let (n_heads, n_text, n_image) = (6, 4, 5);
        let mask = |bits: &[bool]| {
            let mut m = BitMask::zeros(bits.len());
            for (i, &b) in bits.iter().enumerate() {
                m.set(i, b);
            }
            m
        };
        let and = |x: &BitMask, y: &BitMask| {
            let mut m = BitMask::zeros(x.len());
            for i in 0..x.len() {
                m.set(i, x.get(i) && y.get(i));
            }
            m
        };
        let baseline = Arc::new(BaselineKV {
            n_layers: 1,
            n_heads,
            n_image,
            d_head: 1,
            k: (0..n_heads).map(|_| Matrix::zeros(n_image, 1)).collect(),
            v: (0..n_heads).map(|_| Matrix::zeros(n_image, 1)).collect(),
            provenance: "property".to_string(),
            n_sequences: 1,
        });
        let plan = |h: BitMask, t: BitMask, im: BitMask| InterventionPlan {
            heads: HeadMask(h),
            text: TextMask(t),
            image: ImageMask(im),
            baseline: baseline.clone(),
        };
        let a = plan(mask(&ha), mask(&ta), mask(&ia));
        let b = plan(mask(&hb), mask(&tb), mask(&ib));
        let ab = plan(
            and(a.heads.bits(), b.heads.bits()),
            and(a.text.bits(), b.text.bits()),
            and(a.image.bits(), b.image.bits()),
        );
        let total = n_image + n_text;
        for head in 0..n_heads {
            for q in 0..total {
                for key in 0..total {
                    let ra = substitution_rule(&a, head, q, key, n_image);
                    let rb = substitution_rule(&b, head, q, key, n_image);
                    let rab = substitution_rule(&ab, head, q, key, n_image);
                    prop_assert_eq!(rab, ra || rb, "head {}, query {}, key {}", head, q, key);
                    if q < n_image || key >= n_image {
                        prop_assert!(!rab, "image rows and text keys are never substituted");
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Solver objective
// ---------------------------------------------------------------------------

fn en_objective(x: &Matrix, y: &[f64], theta: &[f64], b: f64, alpha: f64, l1_ratio: f64) -> f64 {
    let m = x.rows();
    let mut sse = 0.0;
    for i in 0..m {
        let mut pred = b;
        for (j, t) in theta.iter().enumerate() {
            pred += x.get(i, j) as f64 * t;
        }
        sse += (y[i] - pred) * (y[i] - pred);
    }
    let l1: f64 = theta.iter().map(|t| t.abs()).sum();
    let l2: f64 = theta.iter().map(|t| t * t).sum();
    sse / (2.0 * m as f64) + alpha * l1_ratio * l1 + 0.5 * alpha * (1.0 - l1_ratio) * l2
}

/// Raising the iteration cap can only lower (or hold) the objective: each
/// coordinate-descent sweep is a descent step, observable through the cap.
#[test]
fn objective_is_monotone_in_the_iteration_cap() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (48, 7);
        let data: Vec<f32> =
            (0..m * n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let x = Matrix::from_vec(m, n, data).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..m)
            .map(|r| {
                let lin: f64 = x.row(r).iter().zip(&w).map(|(&xv, wv)| xv as f64 * wv).sum();
                0.3 + lin + rng.gen_range(-0.2..0.2)
            })
            .collect();
        let (alpha, l1_ratio) = (0.05, 0.5);
        let mut last = f64::INFINITY;
        for cap in [1, 2, 3, 4, 6, 8, 12, 50] {
            // Vanishing tolerance: the cap, not convergence, ends the run.
            let fit = elastic_net_fit(&x, &y, alpha, l1_ratio, cap, 1e-300).unwrap();
            let obj = en_objective(&x, &y, &fit.theta, fit.intercept, alpha, l1_ratio);
            assert!(
                obj <= last + 1e-12,
                "seed {seed}: objective rose from {last} to {obj} at cap {cap}"
            );
            last = obj;
        }
    }
}

// ---------------------------------------------------------------------------
// Forward-pass invariants under arbitrary plans
// ---------------------------------------------------------------------------

/// Under any intervention plan, attention stays causal and normalized, and
/// the image-query rows — which the substitution rule must never touch —
/// are bitwise identical to the clean forward's.
#[test]
fn attention_stays_causal_under_random_plans() {
    let cfg = desk_config();
    let weights = gen_random_model(&cfg, 1.0, 5).unwrap();
    let seq = gen_random_tasks(&cfg, 1, 5).unwrap().into_iter().next().unwrap();
    let pool = gen_random_tasks(&cfg, 4, 77).unwrap();
    let baseline = Arc::new(
        headflow::intervention::compute_baseline_kv(&cfg, &weights, &pool, "property").unwrap(),
    );
    let clean = forward(&cfg, &weights, &seq, None, true).unwrap().trace.unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut random_mask = |n: usize| {
        let mut m = BitMask::zeros(n);
        for i in 0..n {
            m.set(i, rng.gen_bool(0.5));
        }
        m
    };
    let total = cfg.n_image + cfg.n_text_max;
    for _ in 0..10 {
        let plan = InterventionPlan {
            heads: HeadMask(random_mask(cfg.n_total_heads())),
            text: TextMask(random_mask(cfg.n_text_max)),
            image: ImageMask(random_mask(cfg.n_image)),
            baseline: baseline.clone(),
        };
        let trace = forward(&cfg, &weights, &seq, Some(&plan), true).unwrap().trace.unwrap();
        for (h, att) in trace.attention.iter().enumerate() {
            for r in 0..total {
                let mut sum = 0.0f64;
                for c in 0..total {
                    let p = att.get(r, c);
                    assert!(p >= 0.0, "head {h}: negative attention at ({r}, {c})");
                    if c > r {
                        assert_eq!(p, 0.0, "head {h}: causal leak at ({r}, {c})");
                    }
                    sum += p as f64;
                }
                assert!((sum - 1.0).abs() < 1e-6, "head {h}: row {r} sums to {sum}");
                if r < cfg.n_image {
                    for c in 0..total {
                        assert_eq!(
                            p32(att.get(r, c)),
                            p32(clean.attention[h].get(r, c)),
                            "head {h}: image-query row {r} drifted at column {c}"
                        );
                    }
                }
            }
        }
    }
}

/// f32 bit pattern, so exact-equality assertions survive NaN edge cases.
fn p32(v: f32) -> u32 {
    v.to_bits()
}
