//! Shared builders for integration tests: toy configs, random batches, and
//! complete sessions.
#![allow(dead_code)]

use heartlora::lora::{AdapterSet, LoraConfig};
use heartlora::model::{patchify, ModelConfig, VitParams};
use heartlora::scalar::Scalar;
use heartlora::tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8x8 single-channel input, width 16, 4 heads, 2 layers, 3 classes.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 16,
        num_heads: 4,
        num_layers: 2,
        mlp_ratio: 2,
        num_classes: 3,
        use_bias: false,
    }
}

/// Random patchified images plus labels.
pub fn toy_batch(
    cfg: &ModelConfig,
    n: usize,
    seed: u64,
) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = cfg.channels * cfg.image_size * cfg.image_size;
    let mut patches = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let img: Vec<f32> = (0..pixels).map(|_| rng.gen_range(0.0..1.0)).collect();
        patches.push(patchify(cfg, &img).unwrap());
        labels.push(rng.gen_range(0..cfg.num_classes));
    }
    (patches, labels)
}

pub struct ToySession<S: Scalar> {
    pub graph: Graph<S>,
    pub params: VitParams,
    pub adapters: AdapterSet,
}

/// Re-materializes a trained f32 session on the f64 reference path:
/// identical weights, widened element type.
pub fn state_to_f64(state: &heartlora::training::TrainState) -> ToySession<f64> {
    use heartlora::lora::AdapterPair;
    let mut graph = Graph::<f64>::new();
    let params = VitParams::from_values(&mut graph, &state.params.config, false, |name, _| {
        let (_, id) = state
            .params
            .named_params()
            .iter()
            .find(|(n, _)| n == name)
            .expect("param name");
        Ok(state.graph.values(*id).iter().map(|&v| v as f64).collect())
    })
    .unwrap();
    let pairs = state
        .adapters
        .pairs
        .iter()
        .map(|p| {
            let a_vals: Vec<f64> = state.graph.values(p.a).iter().map(|&v| v as f64).collect();
            let b_vals: Vec<f64> = state.graph.values(p.b).iter().map(|&v| v as f64).collect();
            let a = graph.param(state.graph.shape(p.a), a_vals).unwrap();
            let b = graph.param(state.graph.shape(p.b), b_vals).unwrap();
            AdapterPair { layer: p.layer, target: p.target, a, b }
        })
        .collect();
    let adapters = AdapterSet { config: state.adapters.config.clone(), pairs };
    graph.mark_persistent();
    ToySession { graph, params, adapters }
}

/// Frozen-backbone session with default q/v adapters, parameters marked
/// persistent. `perturb_b` fills the B factors with small non-zero values so
/// the adapters actually contribute.
pub fn toy_session<S: Scalar>(cfg: &ModelConfig, seed: u64, perturb_b: bool) -> ToySession<S> {
    let mut graph = Graph::<S>::new();
    let params = VitParams::init(&mut graph, cfg, seed, false).unwrap();
    let lora_cfg = LoraConfig { rank: 4, ..Default::default() };
    let adapters = AdapterSet::init(&mut graph, cfg, &lora_cfg, seed ^ 0x5eed).unwrap();
    if perturb_b {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
        for p in &adapters.pairs {
            let n = graph.values(p.b).len();
            let vals: Vec<S> =
                (0..n).map(|_| S::from_f64(rng.gen_range(-0.05..0.05))).collect();
            graph.values_mut(p.b).copy_from_slice(&vals);
        }
    }
    graph.mark_persistent();
    ToySession { graph, params, adapters }
}
