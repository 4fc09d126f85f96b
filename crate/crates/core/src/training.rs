//! The adaptation schedule: warm-up with all heads active, one-shot
//! responsiveness scoring and pattern fixing at the boundary, then masked
//! continuation. Also the optimizer, evaluation, the arbitrary-front
//! baseline, and the shared-boundary sweep/compare harnesses.

use crate::data::{Split, TaskData};
use crate::error::{Error, Result};
use crate::lora::{requantize_in_place, AdapterSet, LoraConfig};
use crate::model::{BackboneSnapshot, FlopCounter, ModelConfig, VitParams};
use crate::responsiveness::{
    accumulate, layer_scores, select_deactivation_set, AccumulationMode, Criterion,
    DeactivationSpec, HeadPattern, ResponsivenessReport, ScoreSource,
};
use crate::tensor::{Graph, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Criterion choice: fixed, or the Taylor variant picked on validation loss
/// at the warm-up boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionSpec {
    Fixed(Criterion),
    TaylorAuto,
}

/// Pattern construction mode at the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Responsiveness-driven deactivation.
    Heart,
    /// Arbitrarily deactivate the first `ne` head indices.
    FrontK,
    /// No deactivation (plain LoRA).
    None,
}

impl BaselineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineMode::Heart => "heart",
            BaselineMode::FrontK => "front_k",
            BaselineMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "heart" => Ok(BaselineMode::Heart),
            "front_k" => Ok(BaselineMode::FrontK),
            "none" => Ok(BaselineMode::None),
            other => Err(Error::Config(format!("unknown baseline mode '{other}'"))),
        }
    }
}

/// Complete adaptation recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub deactivation: DeactivationSpec,
    pub criterion: CriterionSpec,
    pub accumulation: AccumulationMode,
    pub score_source: ScoreSource,
    pub lora: LoraConfig,
    pub quantize: bool,
    pub seed: u64,
    pub baseline_mode: BaselineMode,
    pub auto_fallback: bool,
}

impl TrainPlan {
    /// Desk-scale preset: 30 epochs with 3 warm-up (same 10% ratio as the
    /// full schedule).
    pub fn desk() -> Self {
        TrainPlan {
            epochs: 30,
            warmup_epochs: 3,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            deactivation: DeactivationSpec::Count(1),
            criterion: CriterionSpec::TaylorAuto,
            accumulation: AccumulationMode::Global,
            score_source: ScoreSource::Sum,
            lora: LoraConfig::default(),
            quantize: true,
            seed: 0,
            baseline_mode: BaselineMode::Heart,
            auto_fallback: false,
        }
    }

    /// Full schedule: 100 epochs with 10 warm-up.
    pub fn paper() -> Self {
        TrainPlan { epochs: 100, warmup_epochs: 10, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.baseline_mode == BaselineMode::FrontK
            && !matches!(self.deactivation, DeactivationSpec::Count(_))
        {
            return Err(Error::Config("front_k baseline needs a head count, not a ratio".into()));
        }
        Ok(())
    }
}

// ── optimizer ───────────────────────────────────────────────────────

/// AdamW with decoupled weight decay. Moment constants default to
/// `β1 = 0.9, β2 = 0.999, ε = 1e-8`; decay multiplies parameters by
/// `1 − lr·wd` before the moment update applies.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64, param_sizes: &[usize]) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: param_sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
        }
    }

    pub fn from_state(
        weight_decay: f64,
        step_count: u64,
        moments: Vec<(Vec<f32>, Vec<f32>)>,
    ) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step_count, moments }
    }

    pub fn moments(&self) -> &[(Vec<f32>, Vec<f32>)] {
        &self.moments
    }

    /// One update over the given parameters at learning rate `lr_t`, then
    /// zeroes their gradients (the graph accumulates; the optimizer clears).
    pub fn step(
        &mut self,
        g: &mut Graph<f32>,
        params: &[(String, TensorId)],
        lr_t: f64,
    ) -> Result<()> {
        assert_eq!(params.len(), self.moments.len(), "optimizer state mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr_t * self.weight_decay;
        for ((name, id), (m, v)) in params.iter().zip(self.moments.iter_mut()) {
            let grad: Vec<f32> = match g.grad(*id) {
                Some(gr) => {
                    if gr.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFiniteGrad {
                            what: name.clone(),
                            step: self.step_count,
                        });
                    }
                    gr.to_vec()
                }
                None => vec![0.0; m.len()],
            };
            let vals = g.values_mut(*id);
            for i in 0..vals.len() {
                let gi = grad[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let p = vals[i] as f64 * decay;
                vals[i] = (p - lr_t * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
            g.zero_grad(*id);
        }
        Ok(())
    }
}

/// Cosine decay: `base_lr · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    assert!(step <= total_steps, "step beyond schedule");
    base_lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()) / 2.0
}

// ── run records ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub pattern_hash: u64,
}

/// Everything observable about one run. `wall_time_s` is the only
/// non-deterministic field; `deterministic_eq` compares the rest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub report: Option<ResponsivenessReport>,
    pub criterion_used: Option<Criterion>,
    pub pattern: HeadPattern,
    pub trainable_params: usize,
    pub flops: FlopCounter,
    pub test_accuracy: Option<f64>,
    pub fallback_applied: bool,
    pub wall_time_s: f64,
}

impl RunRecord {
    /// Equality over every deterministic field (wall time excluded).
    pub fn deterministic_eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.report == other.report
            && self.criterion_used == other.criterion_used
            && self.pattern == other.pattern
            && self.trainable_params == other.trainable_params
            && self.flops == other.flops
            && self.test_accuracy == other.test_accuracy
            && self.fallback_applied == other.fallback_applied
    }
}

// ── training session ────────────────────────────────────────────────

const ADAPTER_SEED_SALT: u64 = 0xada9_7e25;
const CLASSIFIER_SEED_SALT: u64 = 0xc1a5_51f1;
const SHUFFLE_SEED_SALT: u64 = 0x50f7_13d5;

/// Live adaptation session: one single-threaded graph plus optimizer and
/// bookkeeping. Cloning forks the session (shared-boundary continuations).
#[derive(Debug, Clone)]
pub struct TrainState {
    pub graph: Graph<f32>,
    pub params: VitParams,
    pub adapters: AdapterSet,
    pub optimizer: AdamW,
    pub trainable: Vec<(String, TensorId)>,
    pub rng: ChaCha8Rng,
    pub global_step: u64,
    pub total_steps: u64,
    /// Gradients of each pair's B factor accumulated over the final warm-up
    /// epoch, aligned with `adapters.pairs`. Kept separate from the live
    /// gradients so scoring never interferes with optimization.
    pub scoring_grads: Vec<Vec<f32>>,
    pub flops: FlopCounter,
}

impl TrainState {
    /// Frozen backbone from the snapshot, fresh classifier for the task's
    /// class count, fresh adapters; parameters marked persistent.
    pub fn new(plan: &TrainPlan, backbone: &BackboneSnapshot, num_classes: usize) -> Result<Self> {
        plan.validate()?;
        let mut config = backbone.config.clone();
        config.num_classes = num_classes;
        let mut graph = Graph::<f32>::new();
        let mut cls_rng =
            ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(CLASSIFIER_SEED_SALT));
        let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
        let params = VitParams::from_values(&mut graph, &config, false, |name, shape| {
            if name.starts_with("classifier.") {
                let n: usize = shape.iter().product();
                if name.ends_with(".bias") {
                    Ok(vec![0.0f32; n])
                } else {
                    Ok((0..n).map(|_| normal.sample(&mut cls_rng) as f32).collect())
                }
            } else {
                backbone
                    .get(name)
                    .map(|v| v.to_vec())
                    .ok_or_else(|| Error::MissingEntry(name.to_string()))
            }
        })?;
        let adapters = AdapterSet::init(
            &mut graph,
            &config,
            &plan.lora,
            plan.seed.wrapping_add(ADAPTER_SEED_SALT),
        )?;
        graph.mark_persistent();

        let mut trainable = adapters.named_params();
        trainable.extend(params.classifier_params());
        let sizes: Vec<usize> = trainable.iter().map(|(_, id)| graph.values(*id).len()).collect();
        let optimizer = AdamW::new(plan.weight_decay, &sizes);
        let scoring_grads =
            adapters.pairs.iter().map(|p| vec![0.0f32; graph.values(p.b).len()]).collect();
        Ok(TrainState {
            graph,
            params,
            adapters,
            optimizer,
            trainable,
            rng: ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(SHUFFLE_SEED_SALT)),
            global_step: 0,
            total_steps: 0,
            scoring_grads,
            flops: FlopCounter::default(),
        })
    }

    /// Trainable parameter count: all adapter factors plus the classifier.
    pub fn trainable_param_count(&self) -> usize {
        self.trainable.iter().map(|(_, id)| self.graph.values(*id).len()).sum()
    }

    fn shuffled_indices(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    /// One training epoch; returns the sample-weighted mean loss.
    fn train_epoch(
        &mut self,
        plan: &TrainPlan,
        train: &Split,
        pattern: Option<&HeadPattern>,
        collect_scoring: bool,
        epoch: usize,
    ) -> Result<f64> {
        let order = self.shuffled_indices(train.len());
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(plan.batch_size) {
            let patches: Vec<Vec<f32>> =
                chunk.iter().map(|&i| train.patches[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();

            let eff = self.params.effective_weights(
                &mut self.graph,
                Some(&self.adapters),
                Some(&mut self.flops),
            )?;
            let logits = self.params.forward_batch(
                &mut self.graph,
                &eff,
                &patches,
                pattern,
                Some(&mut self.flops),
            )?;
            let loss = self.graph.cross_entropy_logits(logits, &labels)?;
            let loss_val = self.graph.scalar_value(loss) as f64;
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss_val * chunk.len() as f64;
            self.graph.backward(loss)?;

            #[cfg(debug_assertions)]
            if let Some(p) = pattern {
                self.assert_masked_b_grads_zero(p);
            }
            if collect_scoring {
                for (buf, pair) in self.scoring_grads.iter_mut().zip(&self.adapters.pairs) {
                    let grad = self.graph.grad(pair.b).ok_or_else(|| Error::MissingGrad {
                        what: "adapter B during warm-up".into(),
                    })?;
                    for (b, g) in buf.iter_mut().zip(grad) {
                        *b += g;
                    }
                }
            }

            let lr_t = cosine_lr(self.global_step, self.total_steps, plan.learning_rate);
            self.optimizer.step(&mut self.graph, &self.trainable, lr_t)?;
            self.global_step += 1;

            if plan.quantize {
                for pair in &self.adapters.pairs {
                    requantize_in_place(&mut self.graph, pair.a)?;
                    requantize_in_place(&mut self.graph, pair.b)?;
                }
            }
            self.graph.reset();
        }
        Ok(loss_sum / train.len() as f64)
    }

    /// Deactivated heads receive no gradient: their B columns stay exactly
    /// zero after each backward (the optimizer cleared them last step).
    #[cfg(debug_assertions)]
    fn assert_masked_b_grads_zero(&self, pattern: &HeadPattern) {
        let nh = self.params.config.num_heads;
        let hw = self.params.config.head_width();
        let c = self.params.config.embed_dim;
        for pair in &self.adapters.pairs {
            let bits = pattern.layer(pair.layer).expect("pattern layer");
            let Some(grad) = self.graph.grad(pair.b) else { continue };
            let d = self.graph.shape(pair.b)[0];
            for (h, &bit) in bits.iter().enumerate().take(nh) {
                if bit == 1 {
                    continue;
                }
                for r in 0..d {
                    for col in h * hw..(h + 1) * hw {
                        assert_eq!(
                            grad[r * c + col],
                            0.0,
                            "masked head {h} of layer {} received gradient",
                            pair.layer
                        );
                    }
                }
            }
        }
    }

    /// Forward-only pass over a split: (top-1 accuracy, mean loss).
    pub fn eval_pass(
        &mut self,
        split: &Split,
        pattern: Option<&HeadPattern>,
        batch_size: usize,
    ) -> Result<(f64, f64)> {
        if split.is_empty() {
            return Err(Error::Config("evaluation split is empty".into()));
        }
        let classes = self.params.config.num_classes;
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;
        let n = split.len();
        let mut i = 0usize;
        while i < n {
            let end = (i + batch_size).min(n);
            let patches = &split.patches[i..end];
            let labels = &split.labels[i..end];
            let eff = self.params.effective_weights(
                &mut self.graph,
                Some(&self.adapters),
                Some(&mut self.flops),
            )?;
            let logits = self.params.forward_batch(
                &mut self.graph,
                &eff,
                patches,
                pattern,
                Some(&mut self.flops),
            )?;
            let vals = self.graph.values(logits).to_vec();
            for (r, &label) in labels.iter().enumerate() {
                let row = &vals[r * classes..(r + 1) * classes];
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(j, _)| j)
                    .unwrap();
                if pred == label {
                    correct += 1;
                }
            }
            let loss = self.graph.cross_entropy_logits(logits, labels)?;
            loss_sum += self.graph.scalar_value(loss) as f64 * labels.len() as f64;
            self.graph.reset();
            i = end;
        }
        Ok((correct as f64 / n as f64, loss_sum / n as f64))
    }

    /// Builds the responsiveness report from the warm-up scoring buffers and
    /// resolves the criterion (fixed, or Taylor variant by validation loss),
    /// returning the responsiveness-selected pattern.
    pub fn boundary_select(
        &mut self,
        plan: &TrainPlan,
        data: &TaskData,
    ) -> Result<(ResponsivenessReport, Criterion, HeadPattern)> {
        let cfg = self.params.config.clone();
        let heads_per_layer = vec![cfg.num_heads; cfg.num_layers];
        let scoring = self.scoring_grads.clone();
        let build = |state: &TrainState,
                         criterion: Criterion|
         -> Result<(ResponsivenessReport, HeadPattern)> {
            let rows = layer_scores(
                &state.graph,
                &state.adapters,
                |i| Some(scoring[i].clone()),
                cfg.num_layers,
                cfg.num_heads,
                criterion,
                plan.score_source,
            )?;
            let report = accumulate(rows, plan.accumulation, criterion, state.global_step)?;
            let pattern = select_deactivation_set(&report, &heads_per_layer, plan.deactivation)?;
            Ok((report, pattern))
        };
        match plan.criterion {
            CriterionSpec::Fixed(c) => {
                let (report, pattern) = build(self, c)?;
                Ok((report, c, pattern))
            }
            CriterionSpec::TaylorAuto => {
                let mut candidates = Vec::new();
                for c in Criterion::TAYLOR_VARIANTS {
                    candidates.push((c, build(self, c)?));
                }
                let mut best: Option<(f64, usize)> = None;
                #[allow(clippy::needless_range_loop)]
                for i in 0..candidates.len() {
                    let pattern = candidates[i].1 .1.clone();
                    let fwd = if pattern.is_all_ones() { None } else { Some(&pattern) };
                    let (_, val_loss) = self.eval_pass(&data.val, fwd, plan.batch_size)?;
                    if best.is_none_or(|(l, _)| val_loss < l) {
                        best = Some((val_loss, i));
                    }
                }
                let (c, (report, pattern)) = candidates.swap_remove(best.expect("candidates").1);
                Ok((report, c, pattern))
            }
        }
    }
}

// ── schedules ───────────────────────────────────────────────────────

fn batches_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

/// Warm-up state: forked by every continuation.
pub struct Boundary {
    pub state: TrainState,
    pub warmup_records: Vec<EpochRecord>,
    pub boundary_val_accuracy: f64,
}

/// Phase 1: warm-up with every head active, collecting scoring gradients in
/// the final warm-up epoch.
pub fn warmup_phase(
    plan: &TrainPlan,
    backbone: &BackboneSnapshot,
    data: &TaskData,
) -> Result<Boundary> {
    plan.validate()?;
    let mut state = TrainState::new(plan, backbone, data.num_classes)?;
    state.total_steps = plan.epochs as u64 * batches_per_epoch(data.train.len(), plan.batch_size);

    let all_ones_hash =
        HeadPattern::all_ones(state.params.config.num_layers, state.params.config.num_heads)
            .content_hash();
    let mut records = Vec::with_capacity(plan.epochs);
    let mut val_acc = 0.0f64;
    for epoch in 0..plan.warmup_epochs {
        let collect = epoch + 1 == plan.warmup_epochs;
        let lr = cosine_lr(state.global_step, state.total_steps, plan.learning_rate);
        let train_loss = state.train_epoch(plan, &data.train, None, collect, epoch)?;
        let (acc, _) = state.eval_pass(&data.val, None, plan.batch_size)?;
        val_acc = acc;
        records.push(EpochRecord {
            epoch,
            phase: Phase::Warmup,
            train_loss,
            val_accuracy: acc,
            lr,
            pattern_hash: all_ones_hash,
        });
    }
    Ok(Boundary { state, warmup_records: records, boundary_val_accuracy: val_acc })
}

/// Phase 2 with a fixed pattern through the remaining epochs.
fn continue_phase(
    state: &mut TrainState,
    plan: &TrainPlan,
    data: &TaskData,
    pattern: &HeadPattern,
    records: &mut Vec<EpochRecord>,
) -> Result<()> {
    let hash = pattern.content_hash();
    let forward_pattern = if pattern.is_all_ones() { None } else { Some(pattern) };
    for epoch in plan.warmup_epochs..plan.epochs {
        let lr = cosine_lr(state.global_step, state.total_steps, plan.learning_rate);
        let train_loss = state.train_epoch(plan, &data.train, forward_pattern, false, epoch)?;
        let (acc, _) = state.eval_pass(&data.val, forward_pattern, plan.batch_size)?;
        records.push(EpochRecord {
            epoch,
            phase: Phase::Masked,
            train_loss,
            val_accuracy: acc,
            lr,
            pattern_hash: hash,
        });
    }
    Ok(())
}

enum ContinuationKind {
    Heart,
    FrontK,
    AllOnes,
}

impl From<BaselineMode> for ContinuationKind {
    fn from(m: BaselineMode) -> Self {
        match m {
            BaselineMode::Heart => ContinuationKind::Heart,
            BaselineMode::FrontK => ContinuationKind::FrontK,
            BaselineMode::None => ContinuationKind::AllOnes,
        }
    }
}

/// One finished run.
pub struct AdaptationRun {
    pub record: RunRecord,
    pub state: TrainState,
    pub pattern: HeadPattern,
}

/// Forks the boundary, resolves the report/criterion, fixes the pattern for
/// the given kind, runs phase 2, and evaluates on the test split. Every code
/// path (single runs, sweeps, comparisons) funnels through here so identical
/// plans produce identical records.
fn continuation(
    boundary: &Boundary,
    plan: &TrainPlan,
    data: &TaskData,
    kind: ContinuationKind,
) -> Result<AdaptationRun> {
    let start = Instant::now();
    let mut state = boundary.state.clone();
    let cfg = state.params.config.clone();
    let (report, criterion_used, heart_pattern) = state.boundary_select(plan, data)?;
    let pattern = match kind {
        ContinuationKind::Heart => heart_pattern,
        ContinuationKind::FrontK => match plan.deactivation {
            DeactivationSpec::Count(ne) => {
                HeadPattern::front_k(cfg.num_layers, cfg.num_heads, ne)?
            }
            DeactivationSpec::Ratio(_) => {
                return Err(Error::Config("front_k baseline needs a head count".into()))
            }
        },
        ContinuationKind::AllOnes => HeadPattern::all_ones(cfg.num_layers, cfg.num_heads),
    };
    let mut records = boundary.warmup_records.clone();
    continue_phase(&mut state, plan, data, &pattern, &mut records)?;
    let fwd = if pattern.is_all_ones() { None } else { Some(&pattern) };
    let (test_acc, _) = state.eval_pass(&data.test, fwd, plan.batch_size)?;
    let record = RunRecord {
        epochs: records,
        report: Some(report),
        criterion_used: Some(criterion_used),
        pattern: pattern.clone(),
        trainable_params: state.trainable_param_count(),
        flops: state.flops,
        test_accuracy: Some(test_acc),
        fallback_applied: false,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(AdaptationRun { record, state, pattern })
}

/// The full schedule: warm-up, boundary scoring and pattern fixing per the
/// plan's baseline mode, masked continuation, final test evaluation.
///
/// With `auto_fallback` set, a run whose final validation accuracy falls
/// below the warm-up boundary accuracy is replaced by an all-ones rerun from
/// the same boundary.
pub fn run_adaptation(
    plan: &TrainPlan,
    backbone: &BackboneSnapshot,
    data: &TaskData,
) -> Result<AdaptationRun> {
    let boundary = warmup_phase(plan, backbone, data)?;
    let run = continuation(&boundary, plan, data, plan.baseline_mode.into())?;
    if plan.auto_fallback && !run.pattern.is_all_ones() {
        let final_val = run.record.epochs.last().map(|r| r.val_accuracy).unwrap_or(0.0);
        if final_val < boundary.boundary_val_accuracy {
            let mut fb = continuation(&boundary, plan, data, ContinuationKind::AllOnes)?;
            fb.record.fallback_applied = true;
            return Ok(fb);
        }
    }
    Ok(run)
}

/// Top-1 accuracy of the current session on a split.
pub fn evaluate(
    state: &mut TrainState,
    split: &Split,
    pattern: Option<&HeadPattern>,
    batch_size: usize,
) -> Result<f64> {
    state.eval_pass(split, pattern, batch_size).map(|(acc, _)| acc)
}

// ── sweep and compare harnesses ─────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub ne: usize,
    pub criterion: Criterion,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub warmup_loss: f64,
    pub record: RunRecord,
}

fn row_from_run(boundary: &Boundary, ne: usize, run: AdaptationRun) -> SweepRow {
    SweepRow {
        ne,
        criterion: run.record.criterion_used.expect("criterion resolved"),
        val_accuracy: run.record.epochs.last().map(|r| r.val_accuracy).unwrap_or(0.0),
        test_accuracy: run.record.test_accuracy.unwrap_or(0.0),
        warmup_loss: boundary
            .warmup_records
            .last()
            .map(|r| r.train_loss)
            .unwrap_or(f64::NAN),
        record: run.record,
    }
}

/// `ne` ablation: one shared warm-up boundary, one continuation per value
/// (continuations run in parallel; each fork owns a private session).
pub fn sweep_ne(
    plan: &TrainPlan,
    backbone: &BackboneSnapshot,
    data: &TaskData,
    ne_values: &[usize],
) -> Result<Vec<SweepRow>> {
    let boundary = warmup_phase(plan, backbone, data)?;
    ne_values
        .par_iter()
        .map(|&ne| {
            let mut fork_plan = plan.clone();
            fork_plan.deactivation = DeactivationSpec::Count(ne);
            let run = continuation(&boundary, &fork_plan, data, ContinuationKind::Heart)?;
            Ok(row_from_run(&boundary, ne, run))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub ne: usize,
    pub quantize: bool,
    pub warmup_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub trainable_params: usize,
    pub deactivated_heads: usize,
}

/// {plain LoRA, arbitrary front-k, Heart} from the same warm-up boundary.
/// Exactly three rows sharing the warm-up loss column.
pub fn compare_modes(
    plan: &TrainPlan,
    backbone: &BackboneSnapshot,
    data: &TaskData,
) -> Result<Vec<CompareRow>> {
    let ne = match plan.deactivation {
        DeactivationSpec::Count(ne) => ne,
        DeactivationSpec::Ratio(_) => {
            return Err(Error::Config("compare requires a head-count deactivation".into()))
        }
    };
    let boundary = warmup_phase(plan, backbone, data)?;
    let kinds = vec![
        ("lora".to_string(), ContinuationKind::AllOnes),
        ("front".to_string(), ContinuationKind::FrontK),
        ("heart".to_string(), ContinuationKind::Heart),
    ];
    kinds
        .into_par_iter()
        .map(|(label, kind)| {
            let run = continuation(&boundary, plan, data, kind)?;
            let row = row_from_run(&boundary, ne, run);
            Ok(CompareRow {
                label,
                ne,
                quantize: plan.quantize,
                warmup_loss: row.warmup_loss,
                val_accuracy: row.val_accuracy,
                test_accuracy: row.test_accuracy,
                trainable_params: row.record.trainable_params,
                deactivated_heads: (0..row.record.pattern.num_layers())
                    .map(|l| row.record.pattern.zeros_in_layer(l))
                    .sum(),
            })
        })
        .collect()
}

// ── pretraining ─────────────────────────────────────────────────────

/// Supervised pre-task recipe that produces the frozen backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        PretrainPlan {
            epochs: 15,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Trains the whole model (no adapters, no masking) on the pre-task and
/// returns the weights as a snapshot plus the per-epoch records.
pub fn pretrain(
    config: &ModelConfig,
    plan: &PretrainPlan,
    data: &TaskData,
) -> Result<(BackboneSnapshot, Vec<EpochRecord>)> {
    if plan.epochs == 0 {
        return Err(Error::Config("pretrain epochs must be positive".into()));
    }
    let mut config = config.clone();
    config.num_classes = data.num_classes;
    config.validate()?;
    let mut graph = Graph::<f32>::new();
    let params = VitParams::init(&mut graph, &config, plan.seed, true)?;
    graph.mark_persistent();
    let trainable: Vec<(String, TensorId)> = params.named_params().to_vec();
    let sizes: Vec<usize> = trainable.iter().map(|(_, id)| graph.values(*id).len()).collect();
    let optimizer = AdamW::new(plan.weight_decay, &sizes);
    let mut state = TrainState {
        graph,
        params,
        adapters: AdapterSet { config: LoraConfig::default(), pairs: Vec::new() },
        optimizer,
        trainable,
        rng: ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(SHUFFLE_SEED_SALT)),
        global_step: 0,
        total_steps: plan.epochs as u64 * batches_per_epoch(data.train.len(), plan.batch_size),
        scoring_grads: Vec::new(),
        flops: FlopCounter::default(),
    };
    let step_plan = TrainPlan {
        epochs: plan.epochs + 1, // only batch/lr/wd/quantize fields are read here
        warmup_epochs: 0,
        batch_size: plan.batch_size,
        learning_rate: plan.learning_rate,
        weight_decay: plan.weight_decay,
        quantize: false,
        ..TrainPlan::desk()
    };
    let hash = HeadPattern::all_ones(config.num_layers, config.num_heads).content_hash();
    let mut records = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let lr = cosine_lr(state.global_step, state.total_steps, plan.learning_rate);
        let train_loss = state.train_epoch(&step_plan, &data.train, None, false, epoch)?;
        let (acc, _) = state.eval_pass(&data.val, None, plan.batch_size)?;
        records.push(EpochRecord {
            epoch,
            phase: Phase::Warmup,
            train_loss,
            val_accuracy: acc,
            lr,
            pattern_hash: hash,
        });
    }
    Ok((BackboneSnapshot::from_params(&state.graph, &state.params), records))
}
