//! LoRA adapter pairs: `H = H0 + s·A·B` on selected attention projections,
//! plus symmetric per-tensor int8 quantization of the factors and
//! deactivation-aware merged storage.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::responsiveness::HeadPattern;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorId};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Projection a pair of adapters attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterTarget {
    Q,
    K,
    V,
    O,
}

impl AdapterTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterTarget::Q => "q",
            AdapterTarget::K => "k",
            AdapterTarget::V => "v",
            AdapterTarget::O => "o",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(AdapterTarget::Q),
            "k" => Ok(AdapterTarget::K),
            "v" => Ok(AdapterTarget::V),
            "o" => Ok(AdapterTarget::O),
            other => Err(Error::Config(format!("unknown adapter target '{other}'"))),
        }
    }

    /// Default adapted projections.
    pub fn defaults() -> Vec<Self> {
        vec![AdapterTarget::Q, AdapterTarget::V]
    }
}

/// Adapter hyper-parameters shared by all pairs of a set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub targets: Vec<AdapterTarget>,
    /// Rank `d` of the factors.
    pub rank: usize,
    /// Scaling factor `s`.
    pub scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { targets: AdapterTarget::defaults(), rank: 8, scale: 1.0 }
    }
}

/// One `A[C×d]`, `B[d×C]` pair attached to a projection of one layer.
#[derive(Debug, Clone)]
pub struct AdapterPair {
    pub layer: usize,
    pub target: AdapterTarget,
    pub a: TensorId,
    pub b: TensorId,
}

/// All adapter pairs of a run, one per (layer, target).
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub config: LoraConfig,
    pub pairs: Vec<AdapterPair>,
}

impl AdapterSet {
    /// Creates one pair per (layer, target): `A ~ N(0, 0.02)`, `B = 0`, so
    /// `s·A·B == 0` and the adapted forward starts bitwise-equal to the
    /// frozen forward.
    pub fn init<S: Scalar>(
        g: &mut Graph<S>,
        model: &ModelConfig,
        config: &LoraConfig,
        seed: u64,
    ) -> Result<Self> {
        if config.rank < 1 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        if config.rank > model.embed_dim / 2 {
            return Err(Error::Config(format!(
                "adapter rank {} exceeds embed_dim/2 = {}",
                config.rank,
                model.embed_dim / 2
            )));
        }
        if config.scale <= 0.0 {
            return Err(Error::Config("adapter scale must be positive".into()));
        }
        let c = model.embed_dim;
        let d = config.rank;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
        let mut pairs = Vec::new();
        for layer in 0..model.num_layers {
            for &target in &config.targets {
                let a_vals: Vec<S> =
                    (0..c * d).map(|_| S::from_f64(normal.sample(&mut rng))).collect();
                let a = g.param(&[c, d], a_vals)?;
                let b = g.param(&[d, c], vec![S::zero(); d * c])?;
                pairs.push(AdapterPair { layer, target, a, b });
            }
        }
        Ok(AdapterSet { config: config.clone(), pairs })
    }

    pub fn get(&self, layer: usize, target: AdapterTarget) -> Option<&AdapterPair> {
        self.pairs.iter().find(|p| p.layer == layer && p.target == target)
    }

    /// Stable names for persistence, in pair order: `adapter.{layer}.{t}.a/b`.
    pub fn named_params(&self) -> Vec<(String, TensorId)> {
        let mut out = Vec::with_capacity(self.pairs.len() * 2);
        for p in &self.pairs {
            out.push((format!("adapter.{}.{}.a", p.layer, p.target.as_str()), p.a));
            out.push((format!("adapter.{}.{}.b", p.layer, p.target.as_str()), p.b));
        }
        out
    }

    /// Trainable parameter count of the set: `2·C·d` per pair.
    pub fn param_count<S: Scalar>(&self, g: &Graph<S>) -> usize {
        self.pairs
            .iter()
            .map(|p| g.values(p.a).len() + g.values(p.b).len())
            .sum()
    }
}

/// `H0 + s·(A·B)` recorded on the graph; gradient flows only into A and B
/// when `H0` is frozen.
pub fn effective_weight<S: Scalar>(
    g: &mut Graph<S>,
    h0: TensorId,
    pair: &AdapterPair,
    scale: f64,
) -> Result<TensorId> {
    let delta = g.matmul(pair.a, pair.b)?;
    let scaled = g.scale(delta, S::from_f64(scale))?;
    g.add(h0, scaled)
}

// ── quantization ────────────────────────────────────────────────────

/// Symmetric per-tensor int8 image of one adapter factor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedAdapter {
    pub q_values: Vec<i8>,
    pub scale: f32,
    pub shape: Vec<usize>,
}

/// Symmetric int8 quantization: `scale = max|x|/127` (1 if all-zero),
/// `q = round(x/scale)` clamped to `[-127, 127]`.
pub fn quantize(values: &[f32], shape: &[usize]) -> Result<QuantizedAdapter> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "quantize" });
    }
    let max_abs = values.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    let q_values = values
        .iter()
        .map(|&v| {
            let q = (v as f64 / scale as f64).round();
            q.clamp(-127.0, 127.0) as i8
        })
        .collect();
    Ok(QuantizedAdapter { q_values, scale, shape: shape.to_vec() })
}

pub fn dequantize(q: &QuantizedAdapter) -> Vec<f32> {
    q.q_values.iter().map(|&v| (v as f64 * q.scale as f64) as f32).collect()
}

/// Projects a live adapter factor onto its int8 grid in place
/// (quantize-aware storage with dequantized compute).
pub fn requantize_in_place(g: &mut Graph<f32>, id: TensorId) -> Result<()> {
    let shape = g.shape(id).to_vec();
    let q = quantize(g.values(id), &shape)?;
    let deq = dequantize(&q);
    g.values_mut(id).copy_from_slice(&deq);
    Ok(())
}

// ── merged storage ──────────────────────────────────────────────────

/// One adapter pair with deactivated head column-slices of `B` dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedPair {
    pub layer: usize,
    pub target: AdapterTarget,
    pub a: Vec<f32>,
    /// Columns of `B` for the kept heads, in ascending head order,
    /// `[d × kept·head_width]` row-major.
    pub b_kept: Vec<f32>,
    pub kept_heads: Vec<usize>,
}

/// Adapter set reduced for storage under a fixed head pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedAdapters {
    pub config: LoraConfig,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub pairs: Vec<MergedPair>,
}

impl MergedAdapters {
    /// Stored f32 payload in bytes (A plus kept B columns, all pairs).
    pub fn storage_bytes(&self) -> usize {
        self.pairs.iter().map(|p| (p.a.len() + p.b_kept.len()) * 4).sum()
    }

    /// Stored bytes of the B factors alone.
    pub fn b_storage_bytes(&self) -> usize {
        self.pairs.iter().map(|p| p.b_kept.len() * 4).sum()
    }
}

/// Drops the `B` columns of deactivated heads from every pair. The pattern is
/// indexed per layer; reloading reconstructs dropped columns as zeros, and the
/// reconstructed forward is bitwise identical to the masked forward.
pub fn merge_for_storage(
    g: &Graph<f32>,
    set: &AdapterSet,
    model: &ModelConfig,
    pattern: &HeadPattern,
) -> Result<MergedAdapters> {
    let c = model.embed_dim;
    let hw = model.head_width();
    let d = set.config.rank;
    let mut pairs = Vec::with_capacity(set.pairs.len());
    for p in &set.pairs {
        let bits = pattern.layer(p.layer)?;
        if bits.len() != model.num_heads {
            return Err(Error::Config(format!(
                "pattern for layer {} has {} entries, model has {} heads",
                p.layer,
                bits.len(),
                model.num_heads
            )));
        }
        let kept_heads: Vec<usize> =
            (0..model.num_heads).filter(|&h| bits[h] == 1).collect();
        let b = g.values(p.b);
        let mut b_kept = Vec::with_capacity(d * kept_heads.len() * hw);
        for r in 0..d {
            for &h in &kept_heads {
                b_kept.extend_from_slice(&b[r * c + h * hw..r * c + (h + 1) * hw]);
            }
        }
        pairs.push(MergedPair {
            layer: p.layer,
            target: p.target,
            a: g.values(p.a).to_vec(),
            b_kept,
            kept_heads,
        });
    }
    Ok(MergedAdapters {
        config: set.config.clone(),
        embed_dim: c,
        num_heads: model.num_heads,
        pairs,
    })
}

/// Reconstructs a live adapter set from merged storage; dropped `B` columns
/// come back as zeros.
pub fn restore_merged(g: &mut Graph<f32>, merged: &MergedAdapters) -> Result<AdapterSet> {
    let c = merged.embed_dim;
    let hw = c / merged.num_heads;
    let d = merged.config.rank;
    let mut pairs = Vec::with_capacity(merged.pairs.len());
    for p in &merged.pairs {
        let a = g.param(&[c, d], p.a.clone())?;
        let mut b_vals = vec![0.0f32; d * c];
        for r in 0..d {
            for (ki, &h) in p.kept_heads.iter().enumerate() {
                let src = r * p.kept_heads.len() * hw + ki * hw;
                let dst = r * c + h * hw;
                b_vals[dst..dst + hw].copy_from_slice(&p.b_kept[src..src + hw]);
            }
        }
        let b = g.param(&[d, c], b_vals)?;
        pairs.push(AdapterPair { layer: p.layer, target: p.target, a, b });
    }
    Ok(AdapterSet { config: merged.config.clone(), pairs })
}
