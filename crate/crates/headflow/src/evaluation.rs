//! Judging a ranking: faithfulness/completeness curves, minimum-head
//! counts, baseline rankings, sweep harness, and head-vector similarity.
//!
//! A ranking orders components from most to least important. Its quality is
//! measured by progressive activation: `faithfulness[k]` is π with only the
//! top-k components intact, `completeness[k]` is π of the complement (top-k
//! ablated, rest intact). A good ranking reaches high faithfulness and low
//! completeness at small k. The scalar summary is the smallest k crossing a
//! threshold (defaults: faithfulness > 0.8, completeness < 0.2).
//!
//! Three reference rankings are provided for comparison: seeded random
//! order, attention order (mean image-attention mass per head), and causal
//! order (per-head ablation effect Δπₙ = 1 − π(all intact except n)).
//!
//! The sweep harness re-evaluates minimum counts across threshold grids and
//! re-runs attribution across ablation fractions, so the stability claims
//! behind a ranking are one call away.
//!
//! Head-vector similarity: concatenating a head's coefficients across a
//! task collection gives a per-head signature; pairwise cosine similarity
//! plus average-linkage agglomerative clustering (distance 1 − cosine)
//! groups heads with matching attribution profiles. Linkage choice is
//! recorded in the output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attribution::{
    attribute, coefficient_ranking, normalize_pi, Anchors, AttributionTarget, EnParams,
    SamplingSpec,
};
use crate::intervention::{BitMask, HeadMask};
use crate::oracle::{MaskQuery, Oracle};
use crate::{Error, Result};

pub const DEFAULT_FAITHFULNESS_THRESHOLD: f64 = 0.8;
pub const DEFAULT_COMPLETENESS_THRESHOLD: f64 = 0.2;

pub fn default_faithfulness_thresholds() -> Vec<f64> {
    vec![0.5, 0.6, 0.7, 0.8, 0.9]
}

pub fn default_completeness_thresholds() -> Vec<f64> {
    vec![0.5, 0.4, 0.3, 0.2, 0.1]
}

/// Eighths from 12.5% to 87.5%.
pub fn default_ablate_fractions() -> Vec<f64> {
    (1..=7).map(|i| i as f64 / 8.0).collect()
}

// ---------------------------------------------------------------------------
// Curves
// ---------------------------------------------------------------------------

/// Progressive-activation curves for one ranking, both length N+1
/// (k = 0..=N components active).
#[derive(Debug, Clone, Serialize)]
pub struct CurvePair {
    pub ranking: Vec<usize>,
    /// π with only the top-k ranked components intact.
    pub faithfulness: Vec<f64>,
    /// π with the top-k ranked components ablated and the rest intact.
    pub completeness: Vec<f64>,
}

fn check_permutation(ranking: &[usize], n: usize) -> Result<()> {
    if ranking.len() != n {
        return Err(Error::invalid(format!(
            "ranking has {} entries for {n} components",
            ranking.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in ranking {
        if i >= n || seen[i] {
            return Err(Error::invalid(format!(
                "ranking is not a permutation (component {i})"
            )));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Evaluates both curves in one oracle batch. Endpoints coincide with the
/// normalization anchors, so `faithfulness[0] = 0`, `faithfulness[N] = 1`,
/// `completeness[0] = 1`, `completeness[N] = 0` hold exactly.
pub fn curves(oracle: &dyn Oracle, ranking: &[usize]) -> Result<CurvePair> {
    let dims = oracle.dims();
    let n = dims.n_heads;
    check_permutation(ranking, n)?;

    let mut queries = Vec::with_capacity(2 * (n + 1) + 2);
    queries.push(MaskQuery::heads_only(&dims, HeadMask::zeros(n)));
    queries.push(MaskQuery::all_ones(&dims));
    let mut top = BitMask::zeros(n);
    for k in 0..=n {
        if k > 0 {
            top.set(ranking[k - 1], true);
        }
        queries.push(MaskQuery::heads_only(&dims, HeadMask(top.clone())));
        queries.push(MaskQuery::heads_only(&dims, HeadMask(top.complement())));
    }
    let raws = oracle.evaluate_batch(&queries)?;
    let anchors = Anchors { raw_zero: raws[0], raw_one: raws[1] };
    let mut faithfulness = Vec::with_capacity(n + 1);
    let mut completeness = Vec::with_capacity(n + 1);
    for k in 0..=n {
        faithfulness.push(normalize_pi(raws[2 + 2 * k], &anchors)?);
        completeness.push(normalize_pi(raws[3 + 2 * k], &anchors)?);
    }
    Ok(CurvePair { ranking: ranking.to_vec(), faithfulness, completeness })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveCriterion {
    FaithfulnessAbove,
    CompletenessBelow,
}

impl std::fmt::Display for CurveCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CurveCriterion::FaithfulnessAbove => f.write_str("faithfulness_above"),
            CurveCriterion::CompletenessBelow => f.write_str("completeness_below"),
        }
    }
}

/// Smallest k whose curve value meets the criterion; `None` if never met.
pub fn min_components(
    curve: &[f64],
    criterion: CurveCriterion,
    threshold: f64,
) -> Result<Option<usize>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(curve.iter().position(|&v| match criterion {
        CurveCriterion::FaithfulnessAbove => v > threshold,
        CurveCriterion::CompletenessBelow => v < threshold,
    }))
}

// ---------------------------------------------------------------------------
// Baseline rankings
// ---------------------------------------------------------------------------

/// Per-head ablation effects Δπₙ = 1 − π(all intact except head n).
pub fn causal_deltas(oracle: &dyn Oracle) -> Result<Vec<f64>> {
    let dims = oracle.dims();
    let n = dims.n_heads;
    let mut queries = Vec::with_capacity(n + 2);
    queries.push(MaskQuery::heads_only(&dims, HeadMask::zeros(n)));
    queries.push(MaskQuery::all_ones(&dims));
    for i in 0..n {
        let mut m = BitMask::ones(n);
        m.set(i, false);
        queries.push(MaskQuery::heads_only(&dims, HeadMask(m)));
    }
    let raws = oracle.evaluate_batch(&queries)?;
    let anchors = Anchors { raw_zero: raws[0], raw_one: raws[1] };
    raws[2..]
        .iter()
        .map(|&r| Ok(1.0 - normalize_pi(r, &anchors)?))
        .collect()
}

/// Heads by descending single-ablation effect, ties toward lower index.
pub fn causal_ranking(oracle: &dyn Oracle) -> Result<Vec<usize>> {
    Ok(coefficient_ranking(&causal_deltas(oracle)?))
}

/// Heads by descending mean image-attention mass, ties toward lower index.
/// Weights come from [`crate::model::image_attention_per_head`] on a
/// clean-forward trace.
pub fn attention_ranking(weights: &[f64]) -> Vec<usize> {
    coefficient_ranking(weights)
}

/// Seeded uniform permutation.
pub fn random_ranking(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

// ---------------------------------------------------------------------------
// Sweep harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdCell {
    pub ranking: String,
    pub criterion: CurveCriterion,
    pub threshold: f64,
    pub min_heads: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FractionCell {
    pub ablate_fraction: f64,
    /// Coefficient ranking of the re-attribution at this fraction.
    pub ranking: Vec<usize>,
    /// Minimum heads for the default faithfulness threshold under that
    /// ranking.
    pub min_faithful: Option<usize>,
    pub test_r2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub threshold_cells: Vec<ThresholdCell>,
    pub fraction_cells: Vec<FractionCell>,
}

/// Threshold grid × named rankings, plus re-attribution across ablation
/// fractions. `base` supplies everything about sampling except the fraction
/// being varied.
pub fn sweep(
    oracle: &dyn Oracle,
    rankings: &[(String, Vec<usize>)],
    faith_thresholds: &[f64],
    comp_thresholds: &[f64],
    base: &SamplingSpec,
    en: &EnParams,
    ablate_fractions: &[f64],
) -> Result<SweepReport> {
    let mut threshold_cells = Vec::new();
    for (name, ranking) in rankings {
        let pair = curves(oracle, ranking)?;
        for &t in faith_thresholds {
            threshold_cells.push(ThresholdCell {
                ranking: name.clone(),
                criterion: CurveCriterion::FaithfulnessAbove,
                threshold: t,
                min_heads: min_components(&pair.faithfulness, CurveCriterion::FaithfulnessAbove, t)?,
            });
        }
        for &t in comp_thresholds {
            threshold_cells.push(ThresholdCell {
                ranking: name.clone(),
                criterion: CurveCriterion::CompletenessBelow,
                threshold: t,
                min_heads: min_components(&pair.completeness, CurveCriterion::CompletenessBelow, t)?,
            });
        }
    }

    let mut fraction_cells = Vec::new();
    let space = crate::attribution::HeadComponents::new(oracle);
    for &p in ablate_fractions {
        let spec = SamplingSpec { ablate_fraction: p, ..*base };
        let res = attribute(&space, &spec, en, AttributionTarget::Heads)?;
        let ranking = coefficient_ranking(&res.theta);
        let pair = curves(oracle, &ranking)?;
        fraction_cells.push(FractionCell {
            ablate_fraction: p,
            ranking,
            min_faithful: min_components(
                &pair.faithfulness,
                CurveCriterion::FaithfulnessAbove,
                DEFAULT_FAITHFULNESS_THRESHOLD,
            )?,
            test_r2: res.test_r2,
        });
    }
    Ok(SweepReport { threshold_cells, fraction_cells })
}

// ---------------------------------------------------------------------------
// Head vectors: similarity and clustering
// ---------------------------------------------------------------------------

/// Per-head coefficient signatures across a task collection:
/// `vectors[n][t]` = head n's coefficient on task t.
#[derive(Debug, Clone)]
pub struct HeadVectorSet {
    pub vectors: Vec<Vec<f64>>,
    pub sample_ids: Vec<String>,
}

impl HeadVectorSet {
    /// Transposes a collection of per-task coefficient vectors into
    /// per-head vectors.
    pub fn from_thetas(sample_ids: Vec<String>, thetas: &[Vec<f64>]) -> Result<Self> {
        if thetas.len() != sample_ids.len() {
            return Err(Error::invalid("one id per coefficient vector required".to_string()));
        }
        if thetas.is_empty() {
            return Err(Error::invalid("need at least one coefficient vector".to_string()));
        }
        let n = thetas[0].len();
        if thetas.iter().any(|t| t.len() != n) {
            return Err(Error::shape("coefficient vectors differ in length".to_string()));
        }
        let vectors = (0..n)
            .map(|head| thetas.iter().map(|t| t[head]).collect())
            .collect();
        Ok(HeadVectorSet { vectors, sample_ids })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimilarityReport {
    /// Pairwise cosine similarity, unit diagonal.
    pub cosine: Vec<Vec<f64>>,
    /// Indices whose vectors have zero norm; their off-diagonal similarity
    /// is defined as 0.
    pub zero_norm: Vec<usize>,
    /// Cluster label per head, relabeled so clusters appear in order of
    /// their smallest member.
    pub labels: Vec<usize>,
    /// Leaf order of the full merge tree (children ordered by smallest
    /// member index).
    pub dendrogram_order: Vec<usize>,
    /// Metadata: linkage used by the agglomeration.
    pub linkage: String,
}

/// Pairwise cosine similarity and average-linkage agglomerative clustering
/// on distance 1 − cosine. Merge ties break toward the lexicographically
/// smallest active-pair, so the output is deterministic.
pub fn head_similarity_and_cluster(
    set: &HeadVectorSet,
    n_clusters: usize,
) -> Result<SimilarityReport> {
    let n = set.vectors.len();
    if n < 2 {
        return Err(Error::invalid("need at least two head vectors".to_string()));
    }
    if n_clusters == 0 || n_clusters > n {
        return Err(Error::invalid(format!(
            "cluster count {n_clusters} outside 1..={n}"
        )));
    }
    let len = set.vectors[0].len();
    if set.vectors.iter().any(|v| v.len() != len) {
        return Err(Error::shape("head vectors differ in length".to_string()));
    }

    let norms: Vec<f64> = set
        .vectors
        .iter()
        .map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt())
        .collect();
    let zero_norm: Vec<usize> =
        norms.iter().enumerate().filter(|(_, &s)| s == 0.0).map(|(i, _)| i).collect();

    let mut cosine = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        cosine[i][i] = 1.0;
        for j in (i + 1)..n {
            let c = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 =
                    set.vectors[i].iter().zip(&set.vectors[j]).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            cosine[i][j] = c;
            cosine[j][i] = c;
        }
    }

    // Agglomeration state: every active cluster carries its distance row,
    // member count, smallest member, and merge-tree node.
    let mut nodes: Vec<Node> =
        (0..n).map(|i| Node { left: None, right: None, min_leaf: i }).collect();
    let mut dist = vec![vec![0.0f64; n]; n];
    for (i, row) in dist.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = 1.0 - cosine[i][j];
        }
    }
    let mut active: Vec<usize> = (0..n).collect(); // node id per active cluster
    let mut sizes = vec![1usize; n];
    // row index in `dist` per active cluster == its original slot; merged
    // rows are updated in place at the surviving slot.
    let mut slots: Vec<usize> = (0..n).collect();
    let mut labels_at_cut: Option<Vec<usize>> = None;

    while active.len() > 1 {
        if active.len() == n_clusters {
            // Record labels before continuing to a full tree.
            let mut labels = vec![0usize; n];
            let mut order: Vec<usize> = (0..active.len()).collect();
            order.sort_by_key(|&a| nodes[active[a]].min_leaf);
            for (cluster_id, &a) in order.iter().enumerate() {
                assign_leaves(&nodes, active[a], cluster_id, &mut labels);
            }
            labels_at_cut = Some(labels);
        }
        // Find the closest active pair; ties toward smaller slot pair.
        let mut best = (f64::INFINITY, 0usize, 0usize);
        for ai in 0..active.len() {
            for aj in (ai + 1)..active.len() {
                let (si, sj) = (slots[ai], slots[aj]);
                let d = dist[si.min(sj)][si.max(sj)];
                if d < best.0 {
                    best = (d, ai, aj);
                }
            }
        }
        let (_, ai, aj) = best;
        let (si, sj) = (slots[ai], slots[aj]);
        let (ni, nj) = (sizes[ai], sizes[aj]);
        // Lance–Williams average-linkage update into slot si.
        for ak in 0..active.len() {
            if ak == ai || ak == aj {
                continue;
            }
            let sk = slots[ak];
            let dik = dist[si.min(sk)][si.max(sk)];
            let djk = dist[sj.min(sk)][sj.max(sk)];
            let d = (ni as f64 * dik + nj as f64 * djk) / (ni + nj) as f64;
            dist[si.min(sk)][si.max(sk)] = d;
            dist[sk.min(si)][sk.max(si)] = d;
        }
        let (a_node, b_node) = (active[ai], active[aj]);
        let (first, second) = if nodes[a_node].min_leaf <= nodes[b_node].min_leaf {
            (a_node, b_node)
        } else {
            (b_node, a_node)
        };
        nodes.push(Node {
            left: Some(first),
            right: Some(second),
            min_leaf: nodes[first].min_leaf,
        });
        let merged = nodes.len() - 1;
        active[ai] = merged;
        sizes[ai] = ni + nj;
        slots[ai] = si;
        active.remove(aj);
        sizes.remove(aj);
        slots.remove(aj);
    }

    // The loop body never runs with one active cluster, so the single-
    // cluster cut is materialized here.
    let labels = labels_at_cut.unwrap_or_else(|| vec![0usize; n]);

    let mut dendrogram_order = Vec::with_capacity(n);
    collect_leaves(&nodes, *active.first().unwrap(), &mut dendrogram_order);

    Ok(SimilarityReport {
        cosine,
        zero_norm,
        labels,
        dendrogram_order,
        linkage: "average".to_string(),
    })
}

/// Merge-tree node: leaves have no children, internal nodes have both.
#[derive(Clone)]
struct Node {
    left: Option<usize>,
    right: Option<usize>,
    min_leaf: usize,
}

fn assign_leaves(nodes: &[Node], id: usize, label: usize, labels: &mut [usize]) {
    match (nodes[id].left, nodes[id].right) {
        (None, None) => labels[id] = label,
        (Some(l), Some(r)) => {
            assign_leaves(nodes, l, label, labels);
            assign_leaves(nodes, r, label, labels);
        }
        _ => unreachable!("merge nodes have both children"),
    }
}

fn collect_leaves(nodes: &[Node], id: usize, out: &mut Vec<usize>) {
    match (nodes[id].left, nodes[id].right) {
        (None, None) => out.push(id),
        (Some(l), Some(r)) => {
            collect_leaves(nodes, l, out);
            collect_leaves(nodes, r, out);
        }
        _ => unreachable!("merge nodes have both children"),
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
