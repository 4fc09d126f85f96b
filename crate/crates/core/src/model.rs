//! Tiny Vision Transformer: patch embedding, CLS token, positional
//! embeddings, pre-norm blocks of masked multi-head self-attention plus MLP,
//! and a linear classifier head.
//!
//! Attention decomposes per head: for each active head `i`,
//! `softmax(X Q_i K_iᵀ Xᵀ / √(C/N_h)) · X V_i · O_iᵀ`, where `Q/K/V/O` slice
//! the effective (LoRA-adapted) projection weights column-wise. A deactivated
//! head is skipped entirely, which is equivalent to multiplying its
//! value-output by zero and also skips its value/output-path compute.

use crate::error::{Error, Result};
use crate::lora::{effective_weight, AdapterSet, AdapterTarget};
use crate::responsiveness::HeadPattern;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorId};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Model hyper-parameters.
///
/// Attention/projection biases are off by default (`use_bias`); layer norms
/// keep their affine parameters, the MLP is bias-free, and the classifier
/// head always has a bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub use_bias: bool,
}

impl ModelConfig {
    /// Desk-scale default: 32x32 single-channel input, patch 4, width 64,
    /// 8 heads, 4 layers.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 1,
            embed_dim: 64,
            num_heads: 8,
            num_layers: 4,
            mlp_ratio: 4,
            num_classes: 10,
            use_bias: false,
        }
    }

    /// ViT-B/16 geometry (12 heads, 12 layers); supported, not default.
    pub fn vit_b16(num_classes: usize) -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            num_heads: 12,
            num_layers: 12,
            mlp_ratio: 4,
            num_classes,
            use_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Token count including the CLS token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Flattened patch vector length.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Gauss,
    Zeros,
    Ones,
}

/// (name, shape, init) for every backbone tensor, in the canonical order used
/// by init, checkpointing, and gradient checks.
fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = config.embed_dim;
    let hidden = c * config.mlp_ratio;
    let mut out: Vec<(String, Vec<usize>, Init)> = vec![
        ("patch_embed".into(), vec![config.patch_dim(), c], Init::Gauss),
        ("cls_token".into(), vec![1, c], Init::Gauss),
        ("pos_embed".into(), vec![config.tokens(), c], Init::Gauss),
    ];
    for l in 0..config.num_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        out.push((p("ln1.gamma"), vec![c], Init::Ones));
        out.push((p("ln1.beta"), vec![c], Init::Zeros));
        out.push((p("attn.wq"), vec![c, c], Init::Gauss));
        out.push((p("attn.wk"), vec![c, c], Init::Gauss));
        out.push((p("attn.wv"), vec![c, c], Init::Gauss));
        out.push((p("attn.wo"), vec![c, c], Init::Gauss));
        if config.use_bias {
            out.push((p("attn.bq"), vec![c], Init::Zeros));
            out.push((p("attn.bk"), vec![c], Init::Zeros));
            out.push((p("attn.bv"), vec![c], Init::Zeros));
            out.push((p("attn.bo"), vec![c], Init::Zeros));
        }
        out.push((p("ln2.gamma"), vec![c], Init::Ones));
        out.push((p("ln2.beta"), vec![c], Init::Zeros));
        out.push((p("mlp.fc1"), vec![c, hidden], Init::Gauss));
        out.push((p("mlp.fc2"), vec![hidden, c], Init::Gauss));
    }
    out.push(("final_ln.gamma".into(), vec![c], Init::Ones));
    out.push(("final_ln.beta".into(), vec![c], Init::Zeros));
    out.push(("classifier.weight".into(), vec![c, config.num_classes], Init::Gauss));
    out.push(("classifier.bias".into(), vec![config.num_classes], Init::Zeros));
    out
}

/// Weights of one transformer block.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub bq: Option<TensorId>,
    pub bk: Option<TensorId>,
    pub bv: Option<TensorId>,
    pub bo: Option<TensorId>,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
    pub fc1: TensorId,
    pub fc2: TensorId,
}

/// All backbone tensors of a model instance, resident in one graph.
#[derive(Debug, Clone)]
pub struct VitParams {
    pub config: ModelConfig,
    pub patch_embed: TensorId,
    pub cls_token: TensorId,
    pub pos_embed: TensorId,
    pub layers: Vec<LayerParams>,
    pub final_ln_gamma: TensorId,
    pub final_ln_beta: TensorId,
    pub classifier_w: TensorId,
    pub classifier_b: TensorId,
    named: Vec<(String, TensorId)>,
}

fn is_classifier(name: &str) -> bool {
    name.starts_with("classifier.")
}

impl VitParams {
    /// Fresh weights: Gaussians at std 0.02, layer-norm affines at identity.
    /// With `backbone_trainable == false` only the classifier head trains.
    pub fn init<S: Scalar>(
        g: &mut Graph<S>,
        config: &ModelConfig,
        seed: u64,
        backbone_trainable: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
        let mut ids = Vec::new();
        let mut names = Vec::new();
        for (name, shape, init) in param_layout(config) {
            let n: usize = shape.iter().product();
            let vals: Vec<S> = match init {
                Init::Gauss => (0..n).map(|_| S::from_f64(normal.sample(&mut rng))).collect(),
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
            };
            let trainable = backbone_trainable || is_classifier(&name);
            ids.push(g.leaf(&shape, vals, trainable)?);
            names.push(name);
        }
        Ok(Self::assemble(config.clone(), names, ids))
    }

    /// Rebuild from leaves already created in `param_layout` order
    /// (gradient-check harness).
    pub fn from_ids(config: &ModelConfig, ids: &[TensorId]) -> Result<Self> {
        let layout = param_layout(config);
        if ids.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} param tensors, got {}",
                layout.len(),
                ids.len()
            )));
        }
        let names = layout.into_iter().map(|(n, _, _)| n).collect();
        Ok(Self::assemble(config.clone(), names, ids.to_vec()))
    }

    /// Rebuild from stored values (checkpoint load). `get` must return the
    /// value vector for each canonical name at the expected shape.
    pub fn from_values<S: Scalar>(
        g: &mut Graph<S>,
        config: &ModelConfig,
        backbone_trainable: bool,
        mut get: impl FnMut(&str, &[usize]) -> Result<Vec<S>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut ids = Vec::new();
        let mut names = Vec::new();
        for (name, shape, _) in param_layout(config) {
            let vals = get(&name, &shape)?;
            let trainable = backbone_trainable || is_classifier(&name);
            ids.push(g.leaf(&shape, vals, trainable)?);
            names.push(name);
        }
        Ok(Self::assemble(config.clone(), names, ids))
    }

    fn assemble(config: ModelConfig, names: Vec<String>, ids: Vec<TensorId>) -> Self {
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("layout length mismatch");
        let patch_embed = next();
        let cls_token = next();
        let pos_embed = next();
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let ln1_gamma = next();
            let ln1_beta = next();
            let wq = next();
            let wk = next();
            let wv = next();
            let wo = next();
            let (bq, bk, bv, bo) = if config.use_bias {
                (Some(next()), Some(next()), Some(next()), Some(next()))
            } else {
                (None, None, None, None)
            };
            let ln2_gamma = next();
            let ln2_beta = next();
            let fc1 = next();
            let fc2 = next();
            layers.push(LayerParams {
                ln1_gamma, ln1_beta, wq, wk, wv, wo, bq, bk, bv, bo,
                ln2_gamma, ln2_beta, fc1, fc2,
            });
        }
        let final_ln_gamma = next();
        let final_ln_beta = next();
        let classifier_w = next();
        let classifier_b = next();
        let named = names.into_iter().zip(ids).collect();
        VitParams {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            layers,
            final_ln_gamma,
            final_ln_beta,
            classifier_w,
            classifier_b,
            named,
        }
    }

    /// (name, id) pairs in canonical order.
    pub fn named_params(&self) -> &[(String, TensorId)] {
        &self.named
    }

    /// Ids of the classifier head (the only trainable backbone part during
    /// adaptation).
    pub fn classifier_params(&self) -> Vec<(String, TensorId)> {
        self.named
            .iter()
            .filter(|(n, _)| is_classifier(n))
            .cloned()
            .collect()
    }

    pub fn param_count<S: Scalar>(&self, g: &Graph<S>) -> usize {
        self.named.iter().map(|(_, id)| g.values(*id).len()).sum()
    }
}

/// Plain-data copy of all backbone tensors, the exchange format between
/// pretraining, checkpointing, and adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSnapshot {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Vec<f32>)>,
}

impl BackboneSnapshot {
    pub fn from_params(g: &Graph<f32>, params: &VitParams) -> Self {
        BackboneSnapshot {
            config: params.config.clone(),
            tensors: params
                .named_params()
                .iter()
                .map(|(name, id)| (name.clone(), g.values(*id).to_vec()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

// ── patch extraction ────────────────────────────────────────────────

/// Rearranges a `[channels][H][W]` image into a `[num_patches, patch_dim]`
/// row-major matrix. Patches run row-major over the grid; within a patch the
/// order is channel, then row, then column.
pub fn patchify(config: &ModelConfig, image: &[f32]) -> Result<Vec<f32>> {
    let (h, w, ch, p) =
        (config.image_size, config.image_size, config.channels, config.patch_size);
    if image.len() != ch * h * w {
        return Err(Error::BadShape {
            op: "patchify",
            expected: "channels * image_size^2 pixels",
            got: vec![image.len()],
        });
    }
    let side = config.patches_per_side();
    let mut out = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for pr in 0..side {
        for pc in 0..side {
            for c in 0..ch {
                for r in 0..p {
                    let row = pr * p + r;
                    let base = c * h * w + row * w + pc * p;
                    out.extend_from_slice(&image[base..base + p]);
                }
            }
        }
    }
    Ok(out)
}

// ── forward ─────────────────────────────────────────────────────────

/// Matmul FLOP tally split into the attention QK path, the per-head
/// value/output path, and everything else.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    pub qk: u64,
    pub value_output: u64,
    pub other: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.qk + self.value_output + self.other
    }
}

/// CLS-row attention captured per layer: `(head index, softmax row)`.
#[derive(Debug, Default, Clone)]
pub struct AttentionCapture {
    pub layers: Vec<Vec<(usize, Vec<f64>)>>,
}

/// Per-layer effective projection weights (LoRA-adapted where adapters
/// exist). Computed once per step and shared across a batch.
#[derive(Debug, Clone)]
pub struct EffectiveLayer {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

#[derive(Debug, Clone)]
pub struct EffectiveWeights {
    pub layers: Vec<EffectiveLayer>,
}

impl VitParams {
    /// Wires `H0 + s·A·B` for every adapted projection; untouched projections
    /// pass through as the raw frozen tensors.
    pub fn effective_weights<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        adapters: Option<&AdapterSet>,
        flops: Option<&mut FlopCounter>,
    ) -> Result<EffectiveWeights> {
        let c = self.config.embed_dim as u64;
        let mut delta_flops = 0u64;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, lp) in self.layers.iter().enumerate() {
            let mut resolve = |g: &mut Graph<S>, target, raw| -> Result<TensorId> {
                match adapters.and_then(|set| set.get(l, target).map(|p| (set, p))) {
                    Some((set, pair)) => {
                        delta_flops += 2 * c * set.config.rank as u64 * c;
                        effective_weight(g, raw, pair, set.config.scale)
                    }
                    None => Ok(raw),
                }
            };
            layers.push(EffectiveLayer {
                wq: resolve(g, AdapterTarget::Q, lp.wq)?,
                wk: resolve(g, AdapterTarget::K, lp.wk)?,
                wv: resolve(g, AdapterTarget::V, lp.wv)?,
                wo: resolve(g, AdapterTarget::O, lp.wo)?,
            });
        }
        if let Some(f) = flops {
            f.other += delta_flops;
        }
        Ok(EffectiveWeights { layers })
    }
}

/// Masked multi-head self-attention on one token matrix `x: [t, C]`.
///
/// Head `i` contributes `softmax(x Q_i K_iᵀ xᵀ / √(C/N_h)) x V_i O_iᵀ`;
/// a pattern bit of 0 removes the summand entirely. `None` is the no-masking
/// code path and is bit-identical to an all-ones pattern.
#[allow(clippy::too_many_arguments)]
pub fn mhsa_forward<S: Scalar>(
    g: &mut Graph<S>,
    config: &ModelConfig,
    layer: &LayerParams,
    eff: &EffectiveLayer,
    x: TensorId,
    pattern_bits: Option<&[u8]>,
    mut flops: Option<&mut FlopCounter>,
    mut capture: Option<&mut Vec<(usize, Vec<f64>)>>,
) -> Result<TensorId> {
    let nh = config.num_heads;
    let hw = config.head_width();
    let t = g.shape(x)[0];
    let c = config.embed_dim;
    if let Some(bits) = pattern_bits {
        if bits.len() != nh {
            return Err(Error::Config(format!(
                "head pattern has {} entries, model has {nh} heads",
                bits.len()
            )));
        }
        debug_assert!(bits.iter().all(|&b| b <= 1), "pattern bits must be 0/1");
    }

    let mut q = g.matmul(x, eff.wq)?;
    let mut k = g.matmul(x, eff.wk)?;
    if let Some(bq) = layer.bq {
        q = g.broadcast_add_bias(q, bq)?;
    }
    if let Some(bk) = layer.bk {
        k = g.broadcast_add_bias(k, bk)?;
    }
    if let Some(f) = flops.as_deref_mut() {
        f.qk += 2 * 2 * (t * c * c) as u64;
    }

    let inv_sqrt = S::from_f64(1.0 / (hw as f64).sqrt());
    let mut acc: Option<TensorId> = None;
    for i in 0..nh {
        if let Some(bits) = pattern_bits {
            if bits[i] == 0 {
                continue;
            }
        }
        let (lo, hi) = (i * hw, (i + 1) * hw);
        let q_i = g.slice_cols(q, lo, hi)?;
        let k_i = g.slice_cols(k, lo, hi)?;
        let wv_i = g.slice_cols(eff.wv, lo, hi)?;
        let mut v_i = g.matmul(x, wv_i)?;
        if let Some(bv) = layer.bv {
            let bv2 = g.reshape(bv, &[1, c])?;
            let bv_slice = g.slice_cols(bv2, lo, hi)?;
            let bv_i = g.reshape(bv_slice, &[hw])?;
            v_i = g.broadcast_add_bias(v_i, bv_i)?;
        }
        let k_t = g.transpose(k_i)?;
        let scores = g.matmul(q_i, k_t)?;
        let scaled = g.scale(scores, inv_sqrt)?;
        let attn = g.softmax_rows(scaled)?;
        if let Some(cap) = capture.as_deref_mut() {
            let row: Vec<f64> = g.values(attn)[..t].iter().map(|v| v.as_f64()).collect();
            cap.push((i, row));
        }
        let head_out = g.matmul(attn, v_i)?;
        let wo_i = g.slice_cols(eff.wo, lo, hi)?;
        let wo_t = g.transpose(wo_i)?;
        let proj = g.matmul(head_out, wo_t)?;
        if let Some(f) = flops.as_deref_mut() {
            f.qk += 2 * (t * t * hw) as u64;
            f.value_output +=
                2 * (t * c * hw) as u64 + 2 * (t * t * hw) as u64 + 2 * (t * hw * c) as u64;
        }
        acc = Some(match acc {
            None => proj,
            Some(prev) => g.add(prev, proj)?,
        });
    }

    let mut out = match acc {
        Some(id) => id,
        // every summand deactivated: only the output-projection bias remains
        None => g.input(&[t, c], vec![S::zero(); t * c])?,
    };
    if let Some(bo) = layer.bo {
        out = g.broadcast_add_bias(out, bo)?;
    }
    Ok(out)
}

impl VitParams {
    /// Forward for one sample given its patch matrix, producing
    /// `[1, num_classes]` logits.
    pub fn forward_sample<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        eff: &EffectiveWeights,
        patches: &[f32],
        pattern: Option<&HeadPattern>,
        mut flops: Option<&mut FlopCounter>,
        mut capture: Option<&mut AttentionCapture>,
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let (np, pd, c) = (cfg.num_patches(), cfg.patch_dim(), cfg.embed_dim);
        if patches.len() != np * pd {
            return Err(Error::BadShape {
                op: "forward_sample",
                expected: "num_patches * patch_dim values",
                got: vec![patches.len()],
            });
        }
        if let Some(p) = pattern {
            p.validate_for(cfg.num_layers, cfg.num_heads)?;
        }
        let eps = S::from_f64(LN_EPS);
        let pvals: Vec<S> = patches.iter().map(|&v| S::from_f64(v as f64)).collect();
        let pmat = g.input(&[np, pd], pvals)?;
        let embedded = g.matmul(pmat, self.patch_embed)?;
        if let Some(f) = flops.as_deref_mut() {
            f.other += 2 * (np * pd * c) as u64;
        }
        let tokens = g.concat_rows(&[self.cls_token, embedded])?;
        let mut x = g.embedding_add(tokens, self.pos_embed)?;
        let t = cfg.tokens();

        if let Some(cap) = capture.as_deref_mut() {
            cap.layers.clear();
        }
        for (l, lp) in self.layers.iter().enumerate() {
            let normed = g.layer_norm(x, lp.ln1_gamma, lp.ln1_beta, eps)?;
            let mut layer_cap: Vec<(usize, Vec<f64>)> = Vec::new();
            let attn = mhsa_forward(
                g,
                cfg,
                lp,
                &eff.layers[l],
                normed,
                pattern.map(|p| p.layer(l)).transpose()?,
                flops.as_deref_mut(),
                capture.as_deref_mut().map(|_| &mut layer_cap),
            )?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.layers.push(layer_cap);
            }
            x = g.add(x, attn)?;
            let normed2 = g.layer_norm(x, lp.ln2_gamma, lp.ln2_beta, eps)?;
            let h1 = g.matmul(normed2, lp.fc1)?;
            let h1a = g.gelu(h1)?;
            let h2 = g.matmul(h1a, lp.fc2)?;
            if let Some(f) = flops.as_deref_mut() {
                let hidden = c * cfg.mlp_ratio;
                f.other += 2 * (t * c * hidden) as u64 + 2 * (t * hidden * c) as u64;
            }
            x = g.add(x, h2)?;
        }
        let xf = g.layer_norm(x, self.final_ln_gamma, self.final_ln_beta, eps)?;
        let cls = g.slice_rows(xf, 0, 1)?;
        let logits = g.matmul(cls, self.classifier_w)?;
        if let Some(f) = flops {
            f.other += 2 * (c * cfg.num_classes) as u64;
        }
        g.broadcast_add_bias(logits, self.classifier_b)
    }

    /// Batched forward: per-sample logits stacked into `[b, num_classes]`.
    pub fn forward_batch<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        eff: &EffectiveWeights,
        patch_rows: &[Vec<f32>],
        pattern: Option<&HeadPattern>,
        mut flops: Option<&mut FlopCounter>,
    ) -> Result<TensorId> {
        assert!(!patch_rows.is_empty(), "empty batch");
        let mut per_sample = Vec::with_capacity(patch_rows.len());
        for patches in patch_rows {
            per_sample.push(self.forward_sample(
                g,
                eff,
                patches,
                pattern,
                flops.as_deref_mut(),
                None,
            )?);
        }
        let wide = g.concat_cols(&per_sample)?;
        g.reshape(wide, &[patch_rows.len(), self.config.num_classes])
    }
}
