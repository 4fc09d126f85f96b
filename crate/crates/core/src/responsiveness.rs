//! Per-head responsiveness: scores computed from adapter weights and
//! gradients, accumulated globally, per layer, or per head-count group, and
//! turned into deactivation patterns for the least-responsive heads.
//!
//! Scoring reads only the adapter `B` factors and their gradients; the head
//! structure lives in `B`'s columns, partitioned contiguously into
//! `N_h` slices of width `C/N_h`.

use crate::error::{Error, Result};
use crate::lora::{AdapterSet, AdapterTarget};
use crate::model::VitParams;
use crate::scalar::Scalar;
use crate::tensor::Graph;
use serde::{Deserialize, Serialize};

/// Responsiveness criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// First-order Taylor score: `Σ grad ⊙ weight` over the head slice.
    TaylorRaw,
    /// Negated Taylor score.
    TaylorNegated,
    /// Absolute Taylor score.
    TaylorAbs,
    /// L2 norm of the head's weight slice.
    WeightL2,
    /// L2 norm of the head's gradient slice.
    GradL2,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::TaylorRaw,
        Criterion::TaylorNegated,
        Criterion::TaylorAbs,
        Criterion::WeightL2,
        Criterion::GradL2,
    ];

    pub const TAYLOR_VARIANTS: [Criterion; 3] =
        [Criterion::TaylorRaw, Criterion::TaylorNegated, Criterion::TaylorAbs];

    pub fn as_str(&self) -> &'static str {
        match self {
            Criterion::TaylorRaw => "taylor_raw",
            Criterion::TaylorNegated => "taylor_negated",
            Criterion::TaylorAbs => "taylor_abs",
            Criterion::WeightL2 => "weight_l2",
            Criterion::GradL2 => "grad_l2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "taylor_raw" | "raw" => Ok(Criterion::TaylorRaw),
            "taylor_negated" | "neg" => Ok(Criterion::TaylorNegated),
            "taylor_abs" | "abs" => Ok(Criterion::TaylorAbs),
            "weight_l2" | "weight" => Ok(Criterion::WeightL2),
            "grad_l2" | "grad" => Ok(Criterion::GradL2),
            other => Err(Error::Config(format!("unknown criterion '{other}'"))),
        }
    }
}

/// How per-layer scores combine before selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulationMode {
    /// Sum across layers into a single row; one shared pattern for all layers.
    Global,
    /// Score and deactivate within each layer independently.
    PerLayer,
    /// Ratio-based deactivation within groups of layers sharing a head count.
    Grouped,
}

impl AccumulationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AccumulationMode::Global => "global",
            AccumulationMode::PerLayer => "per_layer",
            AccumulationMode::Grouped => "grouped",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(AccumulationMode::Global),
            "per_layer" => Ok(AccumulationMode::PerLayer),
            "grouped" => Ok(AccumulationMode::Grouped),
            other => Err(Error::Config(format!("unknown accumulation mode '{other}'"))),
        }
    }
}

/// Deactivation budget: a head count (global/per-layer) or a per-group ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeactivationSpec {
    Count(usize),
    Ratio(f64),
}

/// Per-layer binary activation vector; 0 deactivates a head.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadPattern {
    rows: Vec<Vec<u8>>,
}

impl HeadPattern {
    pub fn all_ones(num_layers: usize, num_heads: usize) -> Self {
        HeadPattern { rows: vec![vec![1; num_heads]; num_layers] }
    }

    /// Deactivates the first `ne` head indices in every layer (the arbitrary
    /// front-deactivation baseline).
    pub fn front_k(num_layers: usize, num_heads: usize, ne: usize) -> Result<Self> {
        if ne > num_heads {
            return Err(Error::Config(format!("ne {ne} exceeds {num_heads} heads")));
        }
        let mut row = vec![1u8; num_heads];
        for bit in row.iter_mut().take(ne) {
            *bit = 0;
        }
        Ok(HeadPattern { rows: vec![row; num_layers] })
    }

    pub fn from_rows(rows: Vec<Vec<u8>>) -> Result<Self> {
        if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
            return Err(Error::Config("empty head pattern".into()));
        }
        if rows.iter().flatten().any(|&b| b > 1) {
            return Err(Error::Config("head pattern entries must be 0 or 1".into()));
        }
        Ok(HeadPattern { rows })
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn num_layers(&self) -> usize {
        self.rows.len()
    }

    pub fn layer(&self, l: usize) -> Result<&[u8]> {
        self.rows
            .get(l)
            .map(|r| r.as_slice())
            .ok_or_else(|| Error::Config(format!("pattern has no layer {l}")))
    }

    pub fn zeros_in_layer(&self, l: usize) -> usize {
        self.rows[l].iter().filter(|&&b| b == 0).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.rows.iter().flatten().all(|&b| b == 1)
    }

    pub fn validate_for(&self, num_layers: usize, num_heads: usize) -> Result<()> {
        if self.rows.len() != num_layers || self.rows.iter().any(|r| r.len() != num_heads) {
            return Err(Error::Config(format!(
                "pattern {}x{:?} does not fit model {num_layers}x{num_heads}",
                self.rows.len(),
                self.rows.first().map(|r| r.len()).unwrap_or(0),
            )));
        }
        Ok(())
    }

    /// Stable content hash (FNV-1a over the bits), used for the pattern
    /// immutability checks.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for row in &self.rows {
            for &b in row {
                h ^= b as u64 + 1;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Score matrix plus the metadata needed to interpret it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsivenessReport {
    /// `[N_l][N_h]` rows, or a single row after global accumulation. Rows may
    /// have differing lengths in grouped mode.
    pub scores: Vec<Vec<f64>>,
    pub criterion: Criterion,
    pub mode: AccumulationMode,
    pub snapshot_step: u64,
}

impl ResponsivenessReport {
    pub fn validate(&self) -> Result<()> {
        if self.scores.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "responsiveness_report" });
        }
        Ok(())
    }
}

// ── head slicing and scoring ────────────────────────────────────────

/// One head's view of an adapter factor and its gradient.
#[derive(Debug, Clone)]
pub struct HeadSlice<S> {
    pub weight: Vec<S>,
    pub grad: Vec<S>,
}

/// Splits `B[d×C]` and its gradient into `N_h` contiguous column slices of
/// width `C/N_h`; slice `i` covers columns `[i·C/N_h, (i+1)·C/N_h)`.
pub fn head_slices<S: Scalar>(
    shape: &[usize],
    weight: &[S],
    grad: Option<&[S]>,
    num_heads: usize,
) -> Result<Vec<HeadSlice<S>>> {
    if shape.len() != 2 {
        return Err(Error::BadShape { op: "head_slices", expected: "2-D factor", got: shape.to_vec() });
    }
    let (d, c) = (shape[0], shape[1]);
    if num_heads == 0 || c % num_heads != 0 {
        return Err(Error::Config(format!("{c} columns not divisible into {num_heads} heads")));
    }
    let grad = grad.ok_or_else(|| Error::MissingGrad {
        what: "adapter factor (score requested before any backward pass)".into(),
    })?;
    let hw = c / num_heads;
    let mut out = Vec::with_capacity(num_heads);
    for i in 0..num_heads {
        let mut w = Vec::with_capacity(d * hw);
        let mut gr = Vec::with_capacity(d * hw);
        for r in 0..d {
            w.extend_from_slice(&weight[r * c + i * hw..r * c + (i + 1) * hw]);
            gr.extend_from_slice(&grad[r * c + i * hw..r * c + (i + 1) * hw]);
        }
        out.push(HeadSlice { weight: w, grad: gr });
    }
    Ok(out)
}

/// Scores one head slice under a criterion. Sums run in f64 in ascending
/// element order, so results are deterministic.
pub fn score_head<S: Scalar>(weight: &[S], grad: &[S], criterion: Criterion) -> f64 {
    debug_assert_eq!(weight.len(), grad.len());
    match criterion {
        Criterion::TaylorRaw | Criterion::TaylorNegated | Criterion::TaylorAbs => {
            let mut acc = 0.0f64;
            for (w, g) in weight.iter().zip(grad) {
                acc += g.as_f64() * w.as_f64();
            }
            match criterion {
                Criterion::TaylorRaw => acc,
                Criterion::TaylorNegated => -acc,
                _ => acc.abs(),
            }
        }
        Criterion::WeightL2 => {
            weight.iter().map(|w| w.as_f64() * w.as_f64()).sum::<f64>().sqrt()
        }
        Criterion::GradL2 => grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt(),
    }
}

/// Which adapted targets contribute to a head's score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Sum over every adapted target of the layer (default).
    Sum,
    QOnly,
    VOnly,
}

impl ScoreSource {
    fn admits(&self, target: AdapterTarget) -> bool {
        match self {
            ScoreSource::Sum => true,
            ScoreSource::QOnly => target == AdapterTarget::Q,
            ScoreSource::VOnly => target == AdapterTarget::V,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreSource::Sum => "sum",
            ScoreSource::QOnly => "q_only",
            ScoreSource::VOnly => "v_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ScoreSource::Sum),
            "q_only" => Ok(ScoreSource::QOnly),
            "v_only" => Ok(ScoreSource::VOnly),
            other => Err(Error::Config(format!("unknown score source '{other}'"))),
        }
    }
}

/// Raw per-layer scores from an adapter set. `b_grad(pair_index)` supplies
/// the gradient buffer for each pair's `B` factor (a side accumulation
/// buffer during training, or the live graph gradient).
pub fn layer_scores<S: Scalar>(
    g: &Graph<S>,
    set: &AdapterSet,
    b_grad: impl Fn(usize) -> Option<Vec<S>>,
    num_layers: usize,
    num_heads: usize,
    criterion: Criterion,
    source: ScoreSource,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = vec![vec![0.0f64; num_heads]; num_layers];
    let mut contributed = false;
    for (idx, pair) in set.pairs.iter().enumerate() {
        if !source.admits(pair.target) {
            continue;
        }
        contributed = true;
        let grad = b_grad(idx);
        let shape = g.shape(pair.b).to_vec();
        let slices = head_slices(&shape, g.values(pair.b), grad.as_deref(), num_heads)?;
        for (h, s) in slices.iter().enumerate() {
            rows[pair.layer][h] += score_head(&s.weight, &s.grad, criterion);
        }
    }
    if !contributed {
        return Err(Error::Config("score source admits no adapted target".into()));
    }
    Ok(rows)
}

// ── accumulation and selection ──────────────────────────────────────

/// Combines per-layer scores under the given mode.
pub fn accumulate(
    per_layer: Vec<Vec<f64>>,
    mode: AccumulationMode,
    criterion: Criterion,
    snapshot_step: u64,
) -> Result<ResponsivenessReport> {
    let scores = match mode {
        AccumulationMode::Global => {
            let n = per_layer.first().map(|r| r.len()).unwrap_or(0);
            if per_layer.iter().any(|r| r.len() != n) {
                return Err(Error::Config(
                    "global accumulation requires a uniform head count".into(),
                ));
            }
            let mut row = vec![0.0f64; n];
            for r in &per_layer {
                for (acc, v) in row.iter_mut().zip(r) {
                    *acc += v;
                }
            }
            vec![row]
        }
        AccumulationMode::PerLayer | AccumulationMode::Grouped => per_layer,
    };
    let report = ResponsivenessReport { scores, criterion, mode, snapshot_step };
    report.validate()?;
    Ok(report)
}

/// Indices of the `k` smallest scores, ties broken by lower index.
fn smallest_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn row_to_pattern(n: usize, deactivate: &[usize]) -> Vec<u8> {
    let mut row = vec![1u8; n];
    for &i in deactivate {
        row[i] = 0;
    }
    row
}

/// Builds the head pattern that zeroes the least-responsive heads.
///
/// * `Global` + `Count(ne)`: one selection from the accumulated row, applied
///   identically to every layer in `heads_per_layer`.
/// * `PerLayer` + `Count(ne)`: `ne` zeros per layer row.
/// * `Grouped` + `Ratio(r)`: layers sharing a head count form a group; group
///   scores are summed and `⌊r·N_h⌋` heads deactivate in each of its layers.
pub fn select_deactivation_set(
    report: &ResponsivenessReport,
    heads_per_layer: &[usize],
    spec: DeactivationSpec,
) -> Result<HeadPattern> {
    report.validate()?;
    match (report.mode, spec) {
        (AccumulationMode::Global, DeactivationSpec::Count(ne)) => {
            if report.scores.len() != 1 {
                return Err(Error::Config("global report must have one row".into()));
            }
            let row = &report.scores[0];
            let nh = row.len();
            if heads_per_layer.iter().any(|&h| h != nh) {
                return Err(Error::Config("global pattern requires uniform head count".into()));
            }
            if ne > nh {
                return Err(Error::Config(format!("ne {ne} exceeds {nh} heads")));
            }
            let dead = smallest_k(row, ne);
            let bits = row_to_pattern(nh, &dead);
            HeadPattern::from_rows(vec![bits; heads_per_layer.len()])
        }
        (AccumulationMode::PerLayer, DeactivationSpec::Count(ne)) => {
            if report.scores.len() != heads_per_layer.len() {
                return Err(Error::Config("per-layer report row count mismatch".into()));
            }
            let mut rows = Vec::with_capacity(report.scores.len());
            for (row, &nh) in report.scores.iter().zip(heads_per_layer) {
                if row.len() != nh {
                    return Err(Error::Config("per-layer report head count mismatch".into()));
                }
                if ne > nh {
                    return Err(Error::Config(format!("ne {ne} exceeds {nh} heads")));
                }
                let dead = smallest_k(row, ne);
                rows.push(row_to_pattern(nh, &dead));
            }
            HeadPattern::from_rows(rows)
        }
        (AccumulationMode::Grouped, DeactivationSpec::Ratio(ratio)) => {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::Config(format!("ratio {ratio} outside [0, 1]")));
            }
            if report.scores.len() != heads_per_layer.len() {
                return Err(Error::Config("grouped report row count mismatch".into()));
            }
            for (row, &nh) in report.scores.iter().zip(heads_per_layer) {
                if row.len() != nh {
                    return Err(Error::Config("grouped report head count mismatch".into()));
                }
            }
            // Accumulate within each equal-head-count group.
            let mut group_totals: Vec<(usize, Vec<f64>)> = Vec::new();
            for (row, &nh) in report.scores.iter().zip(heads_per_layer) {
                match group_totals.iter_mut().find(|(g_nh, _)| *g_nh == nh) {
                    Some((_, acc)) => {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    None => group_totals.push((nh, row.clone())),
                }
            }
            let mut group_patterns: Vec<(usize, Vec<u8>)> = Vec::new();
            for (nh, totals) in &group_totals {
                let k = (ratio * *nh as f64).floor() as usize;
                let dead = smallest_k(totals, k);
                group_patterns.push((*nh, row_to_pattern(*nh, &dead)));
            }
            let rows = heads_per_layer
                .iter()
                .map(|&nh| {
                    group_patterns
                        .iter()
                        .find(|(g_nh, _)| *g_nh == nh)
                        .map(|(_, p)| p.clone())
                        .expect("group exists")
                })
                .collect();
            HeadPattern::from_rows(rows)
        }
        (mode, spec) => Err(Error::Config(format!(
            "deactivation spec {spec:?} incompatible with {} accumulation",
            mode.as_str()
        ))),
    }
}

// ── Taylor fidelity diagnostics ─────────────────────────────────────

/// Outcome of one fidelity probe: the first-order score for a head's delta
/// contribution and the true loss change from masking that contribution.
#[derive(Debug, Clone, Copy)]
pub struct FidelityProbe {
    pub taylor_score: f64,
    pub true_loss_change: f64,
}

/// Compares the Taylor score of head `head` against the exact loss change
/// obtained by zeroing that head's adapter delta and re-running the forward.
/// `epsilon` scales the adapter deltas; as it shrinks, the gap between the
/// two closes quadratically. Diagnostic only: clears adapter gradients.
///
/// The session must have its parameters marked persistent; the tape is reset
/// on exit.
pub fn taylor_fidelity_check<S: Scalar>(
    g: &mut Graph<S>,
    params: &VitParams,
    set: &AdapterSet,
    patch_rows: &[Vec<f32>],
    labels: &[usize],
    head: usize,
    epsilon: f64,
) -> Result<FidelityProbe> {
    let cfg = &params.config;
    if head >= cfg.num_heads {
        return Err(Error::Config(format!("head {head} out of range")));
    }
    let hw = cfg.head_width();
    let mut scaled = set.clone();
    scaled.config.scale = set.config.scale * epsilon;

    for p in &scaled.pairs {
        g.zero_grad(p.a);
        g.zero_grad(p.b);
    }
    let eff = params.effective_weights(g, Some(&scaled), None)?;
    let logits = params.forward_batch(g, &eff, patch_rows, None, None)?;
    let loss_full_id = g.cross_entropy_logits(logits, labels)?;
    let loss_full = g.scalar_value(loss_full_id).as_f64();
    g.backward(loss_full_id)?;

    // Score of the head's delta contribution, summed over adapted targets.
    let mut taylor_score = 0.0f64;
    for p in &scaled.pairs {
        let shape = g.shape(p.b).to_vec();
        let grad = g.grad(p.b).map(|v| v.to_vec());
        let slices = head_slices(&shape, g.values(p.b), grad.as_deref(), cfg.num_heads)?;
        taylor_score += score_head(&slices[head].weight, &slices[head].grad, Criterion::TaylorRaw);
    }
    g.reset();

    // Exact loss with the head's delta columns zeroed.
    let c = cfg.embed_dim;
    let mut saved: Vec<Vec<S>> = Vec::with_capacity(scaled.pairs.len());
    for p in &scaled.pairs {
        let d = g.shape(p.b)[0];
        saved.push(g.values(p.b).to_vec());
        let vals = g.values_mut(p.b);
        for r in 0..d {
            for col in head * hw..(head + 1) * hw {
                vals[r * c + col] = S::zero();
            }
        }
    }
    let eff = params.effective_weights(g, Some(&scaled), None)?;
    let logits = params.forward_batch(g, &eff, patch_rows, None, None)?;
    let loss_masked_id = g.cross_entropy_logits(logits, labels)?;
    let loss_masked = g.scalar_value(loss_masked_id).as_f64();
    g.reset();
    for (p, vals) in scaled.pairs.iter().zip(saved) {
        g.values_mut(p.b).copy_from_slice(&vals);
    }
    for p in &scaled.pairs {
        g.zero_grad(p.a);
        g.zero_grad(p.b);
    }

    Ok(FidelityProbe { taylor_score, true_loss_change: loss_full - loss_masked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_slices_partition_and_reassemble() {
        let (d, c, nh) = (3usize, 64usize, 8usize);
        let weight: Vec<f32> = (0..d * c).map(|i| i as f32).collect();
        let grad: Vec<f32> = (0..d * c).map(|i| (i as f32) * 0.5).collect();
        let slices = head_slices(&[d, c], &weight, Some(&grad), nh).unwrap();
        assert_eq!(slices.len(), 8);
        let hw = c / nh;
        for s in &slices {
            assert_eq!(s.weight.len(), d * hw);
        }
        // reassembling reproduces B bitwise
        let mut rebuilt = vec![0.0f32; d * c];
        for (i, s) in slices.iter().enumerate() {
            for r in 0..d {
                for k in 0..hw {
                    rebuilt[r * c + i * hw + k] = s.weight[r * hw + k];
                }
            }
        }
        assert_eq!(rebuilt, weight);
    }

    #[test]
    fn head_slices_degenerate_single_head() {
        let weight = vec![1.0f32, 2.0, 3.0, 4.0];
        let grad = vec![0.0f32; 4];
        let slices = head_slices(&[2, 2], &weight, Some(&grad), 1).unwrap();
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].weight, weight);
    }

    #[test]
    fn head_slices_requires_grad() {
        let weight = vec![0.0f32; 8];
        let err = head_slices::<f32>(&[2, 4], &weight, None, 2).unwrap_err();
        assert!(matches!(err, Error::MissingGrad { .. }));
    }

    #[test]
    fn score_head_hand_values() {
        let w = vec![1.0f32; 4];
        let g = vec![1.0f32; 4];
        assert_eq!(score_head(&w, &g, Criterion::TaylorRaw), 4.0);
        assert_eq!(score_head(&w, &g, Criterion::TaylorNegated), -4.0);
        assert_eq!(score_head(&w, &g, Criterion::TaylorAbs), 4.0);
        assert_eq!(score_head(&w, &g, Criterion::WeightL2), 2.0);
        assert_eq!(score_head(&w, &g, Criterion::GradL2), 2.0);
    }

    #[test]
    fn score_head_zero_gradient() {
        let w = vec![0.5f32, -0.5, 1.5, 2.0];
        let g = vec![0.0f32; 4];
        assert_eq!(score_head(&w, &g, Criterion::TaylorRaw), 0.0);
        assert_eq!(score_head(&w, &g, Criterion::TaylorAbs), 0.0);
        assert!(score_head(&w, &g, Criterion::WeightL2) > 0.0);
    }

    #[test]
    fn accumulate_global_single_layer_equals_row() {
        let rows = vec![vec![1.0, 2.0, 3.0]];
        let rep =
            accumulate(rows.clone(), AccumulationMode::Global, Criterion::TaylorRaw, 0).unwrap();
        assert_eq!(rep.scores, rows);
    }

    #[test]
    fn accumulate_global_column_sums() {
        let rows = vec![vec![1.0, 2.0], vec![10.0, 20.0], vec![100.0, 200.0]];
        let rep = accumulate(rows, AccumulationMode::Global, Criterion::TaylorRaw, 0).unwrap();
        assert_eq!(rep.scores, vec![vec![111.0, 222.0]]);
    }

    #[test]
    fn select_smallest_two() {
        let rep = ResponsivenessReport {
            scores: vec![vec![5.0, 1.0, 3.0, 2.0]],
            criterion: Criterion::TaylorRaw,
            mode: AccumulationMode::Global,
            snapshot_step: 0,
        };
        let p = select_deactivation_set(&rep, &[4, 4], DeactivationSpec::Count(2)).unwrap();
        assert_eq!(p.rows(), &[vec![1, 0, 1, 0], vec![1, 0, 1, 0]]);
    }

    #[test]
    fn select_ne_zero_is_all_ones() {
        let rep = ResponsivenessReport {
            scores: vec![vec![5.0, 1.0, 3.0, 2.0]],
            criterion: Criterion::TaylorRaw,
            mode: AccumulationMode::Global,
            snapshot_step: 0,
        };
        let p = select_deactivation_set(&rep, &[4, 4, 4], DeactivationSpec::Count(0)).unwrap();
        assert!(p.is_all_ones());
    }

    #[test]
    fn select_rejects_ne_above_heads() {
        let rep = ResponsivenessReport {
            scores: vec![vec![1.0, 2.0]],
            criterion: Criterion::TaylorRaw,
            mode: AccumulationMode::Global,
            snapshot_step: 0,
        };
        assert!(select_deactivation_set(&rep, &[2], DeactivationSpec::Count(3)).is_err());
    }

    #[test]
    fn select_tie_break_prefers_lower_index() {
        let rep = ResponsivenessReport {
            scores: vec![vec![1.0, 1.0, 1.0, 1.0]],
            criterion: Criterion::TaylorRaw,
            mode: AccumulationMode::Global,
            snapshot_step: 0,
        };
        let p = select_deactivation_set(&rep, &[4], DeactivationSpec::Count(2)).unwrap();
        assert_eq!(p.rows(), &[vec![0, 0, 1, 1]]);
    }

    #[test]
    fn grouped_ratio_quarter_swin_counts() {
        // stage head counts {4, 8, 16, 32} at ratio 0.25 -> {1, 2, 4, 8}
        let heads = [4usize, 4, 8, 8, 16, 16, 32, 32];
        let scores: Vec<Vec<f64>> =
            heads.iter().map(|&nh| (0..nh).map(|i| i as f64).collect()).collect();
        let rep = accumulate(scores, AccumulationMode::Grouped, Criterion::TaylorRaw, 0).unwrap();
        let p = select_deactivation_set(&rep, &heads, DeactivationSpec::Ratio(0.25)).unwrap();
        for (l, &nh) in heads.iter().enumerate() {
            assert_eq!(p.zeros_in_layer(l), nh / 4, "layer {l}");
        }
        // same-count layers share the same pattern
        assert_eq!(p.layer(0).unwrap(), p.layer(1).unwrap());
        assert_eq!(p.layer(6).unwrap(), p.layer(7).unwrap());
    }

    #[test]
    fn mode_spec_mismatch_rejected() {
        let rep = ResponsivenessReport {
            scores: vec![vec![1.0, 2.0]],
            criterion: Criterion::TaylorRaw,
            mode: AccumulationMode::Global,
            snapshot_step: 0,
        };
        assert!(select_deactivation_set(&rep, &[2], DeactivationSpec::Ratio(0.5)).is_err());
    }

    #[test]
    fn pattern_front_k_and_hash() {
        let p = HeadPattern::front_k(3, 12, 3).unwrap();
        for l in 0..3 {
            assert_eq!(&p.layer(l).unwrap()[0..3], &[0, 0, 0]);
            assert!(p.layer(l).unwrap()[3..].iter().all(|&b| b == 1));
        }
        let q = HeadPattern::front_k(3, 12, 3).unwrap();
        assert_eq!(p.content_hash(), q.content_hash());
        let r = HeadPattern::front_k(3, 12, 4).unwrap();
        assert_ne!(p.content_hash(), r.content_hash());
    }
}
