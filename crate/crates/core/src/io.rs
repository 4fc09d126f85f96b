//! Bit-exact persistence and exports.
//!
//! Checkpoint container (`HLRA`): magic, version u16 LE, entry count u32 LE;
//! per entry: name length u16 LE + UTF-8 name, dtype u8 (0 = f32, 1 = i8,
//! 2 = u8), ndim u8, dims as u64 LE, then the little-endian payload. A
//! trailing CRC32 (IEEE) covers every byte between the fixed header and the
//! checksum itself. Loads verify the CRC and all shapes; duplicate names and
//! unknown dtypes are rejected.

use crate::error::{Error, Result};
use crate::lora::{AdapterPair, AdapterSet, MergedAdapters, MergedPair};
use crate::model::{BackboneSnapshot, ModelConfig, VitParams};
use crate::responsiveness::{HeadPattern, ResponsivenessReport};
use crate::tensor::Graph;
use crate::training::{AdamW, EpochRecord, RunRecord, TrainPlan, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HLRA";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    I8 = 1,
    U8 = 2,
}

impl Dtype {
    fn from_u8(v: u8, offset: u64) -> Result<Self> {
        match v {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::I8),
            2 => Ok(Dtype::U8),
            other => {
                Err(Error::Parse { offset, msg: format!("unknown dtype {other}") })
            }
        }
    }

    fn elem_size(&self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I8 | Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    pub fn as_f32(&self) -> Result<Vec<f32>> {
        if self.dtype != Dtype::F32 {
            return Err(Error::Config("entry is not f32".into()));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        if self.dtype != Dtype::U8 {
            return Err(Error::Config("entry is not u8".into()));
        }
        Ok(&self.payload)
    }

    pub fn as_i8(&self) -> Result<Vec<i8>> {
        if self.dtype != Dtype::I8 {
            return Err(Error::Config("entry is not i8".into()));
        }
        Ok(self.payload.iter().map(|&b| b as i8).collect())
    }
}

/// Ordered named tensor table with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, name: &str, entry: Entry) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::DuplicateName(name.to_string()));
        }
        self.entries.push((name.to_string(), entry));
        Ok(())
    }

    pub fn push_f32(&mut self, name: &str, dims: &[usize], values: &[f32]) -> Result<()> {
        assert_eq!(dims.iter().product::<usize>(), values.len(), "{name}: dims/len");
        let mut payload = Vec::with_capacity(values.len() * 4);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        self.push(
            name,
            Entry { dtype: Dtype::F32, dims: dims.iter().map(|&d| d as u64).collect(), payload },
        )
    }

    pub fn push_u8(&mut self, name: &str, values: &[u8]) -> Result<()> {
        self.push(
            name,
            Entry { dtype: Dtype::U8, dims: vec![values.len() as u64], payload: values.to_vec() },
        )
    }

    pub fn push_i8(&mut self, name: &str, dims: &[usize], values: &[i8]) -> Result<()> {
        assert_eq!(dims.iter().product::<usize>(), values.len(), "{name}: dims/len");
        self.push(
            name,
            Entry {
                dtype: Dtype::I8,
                dims: dims.iter().map(|&d| d as u64).collect(),
                payload: values.iter().map(|&v| v as u8).collect(),
            },
        )
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let body_start = buf.len();
        for (name, e) in &self.entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(e.dtype as u8);
            buf.push(e.dims.len() as u8);
            for d in &e.dims {
                buf.extend_from_slice(&d.to_le_bytes());
            }
            buf.extend_from_slice(&e.payload);
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&buf[body_start..]);
        buf.extend_from_slice(&hasher.finalize().to_le_bytes());
        buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if *off + n > data.len() {
                return Err(Error::Parse {
                    offset: *off as u64,
                    msg: format!("truncated while reading {what}"),
                });
            }
            let s = &data[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let magic = take(&mut off, 4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Parse { offset: 0, msg: format!("bad magic {magic:?}") });
        }
        let version = u16::from_le_bytes(take(&mut off, 2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Parse { offset: 4, msg: format!("unsupported version {version}") });
        }
        let count = u32::from_le_bytes(take(&mut off, 4, "count")?.try_into().unwrap()) as usize;
        if data.len() < 4 {
            return Err(Error::Parse { offset: data.len() as u64, msg: "missing CRC".into() });
        }
        let body_start = off;
        let crc_off = data.len() - 4;
        if crc_off < body_start {
            return Err(Error::Parse { offset: crc_off as u64, msg: "missing CRC".into() });
        }
        let stored = u32::from_le_bytes(data[crc_off..].try_into().unwrap());
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&data[body_start..crc_off]);
        let computed = hasher.finalize();
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut cp = Checkpoint::new();
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(take(&mut off, 2, "name length")?.try_into().unwrap()) as usize;
            let name_off = off;
            let name = std::str::from_utf8(take(&mut off, name_len, "name")?)
                .map_err(|e| Error::Parse {
                    offset: name_off as u64,
                    msg: format!("name not UTF-8: {e}"),
                })?
                .to_string();
            let dtype_off = off;
            let dtype = Dtype::from_u8(take(&mut off, 1, "dtype")?[0], dtype_off as u64)?;
            let ndim = take(&mut off, 1, "ndim")?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(take(&mut off, 8, "dim")?.try_into().unwrap()));
            }
            let payload_len = dims.iter().product::<u64>() as usize * dtype.elem_size();
            if off + payload_len > crc_off {
                return Err(Error::Parse {
                    offset: off as u64,
                    msg: format!("payload for '{name}' overruns file"),
                });
            }
            let payload = take(&mut off, payload_len, "payload")?.to_vec();
            cp.push(&name, Entry { dtype, dims, payload })?;
        }
        if off != crc_off {
            return Err(Error::Parse {
                offset: off as u64,
                msg: format!("{} unparsed bytes before CRC", crc_off - off),
            });
        }
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }
}

// ── training checkpoints ────────────────────────────────────────────

fn push_json<T: serde::Serialize>(cp: &mut Checkpoint, name: &str, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value).expect("serializable");
    cp.push_u8(name, &bytes)
}

fn read_json<T: serde::de::DeserializeOwned>(cp: &Checkpoint, name: &str) -> Result<T> {
    let entry = cp.require(name)?;
    serde_json::from_slice(entry.as_u8()?)
        .map_err(|e| Error::Parse { offset: 0, msg: format!("{name}: {e}") })
}

/// Serializes a full session: model config and plan digests, every model
/// tensor, adapters, optimizer moments, warm-up scoring gradients, and the
/// fixed pattern (when present).
pub fn save_training_checkpoint(
    path: &Path,
    state: &TrainState,
    plan: &TrainPlan,
    pattern: Option<&HeadPattern>,
) -> Result<()> {
    let mut cp = Checkpoint::new();
    push_json(&mut cp, "meta.model_config", &state.params.config)?;
    push_json(&mut cp, "meta.plan", plan)?;
    if let Some(p) = pattern {
        push_json(&mut cp, "meta.pattern", p)?;
        for (l, row) in p.rows().iter().enumerate() {
            cp.push_u8(&format!("pattern.{l}"), row)?;
        }
    }
    for (name, id) in state.params.named_params() {
        cp.push_f32(
            &format!("model.{name}"),
            state.graph.shape(*id),
            state.graph.values(*id),
        )?;
    }
    for pair in &state.adapters.pairs {
        let base = format!("adapter.{}.{}", pair.layer, pair.target.as_str());
        cp.push_f32(&format!("{base}.a"), state.graph.shape(pair.a), state.graph.values(pair.a))?;
        cp.push_f32(&format!("{base}.b"), state.graph.shape(pair.b), state.graph.values(pair.b))?;
    }
    cp.push_u8("opt.step", &state.optimizer.step_count.to_le_bytes())?;
    for ((name, _), (m, v)) in state.trainable.iter().zip(state.optimizer.moments()) {
        cp.push_f32(&format!("opt.{name}.m"), &[m.len()], m)?;
        cp.push_f32(&format!("opt.{name}.v"), &[v.len()], v)?;
    }
    for (pair, buf) in state.adapters.pairs.iter().zip(&state.scoring_grads) {
        cp.push_f32(
            &format!("scoring.{}.{}.b", pair.layer, pair.target.as_str()),
            &[buf.len()],
            buf,
        )?;
    }
    cp.save(path)
}

/// A deserialized session plus its plan and pattern.
pub struct LoadedCheckpoint {
    pub state: TrainState,
    pub plan: TrainPlan,
    pub pattern: Option<HeadPattern>,
}

/// Rebuilds a session from a checkpoint. The stored model config is checked
/// against `expected_config` (when given) before any tensor is touched.
pub fn load_training_checkpoint(
    path: &Path,
    expected_config: Option<&ModelConfig>,
) -> Result<LoadedCheckpoint> {
    let cp = Checkpoint::load(path)?;
    let config: ModelConfig = read_json(&cp, "meta.model_config")?;
    if let Some(expected) = expected_config {
        if *expected != config {
            return Err(Error::ConfigMismatch(format!("{config:?} vs expected {expected:?}")));
        }
    }
    let plan: TrainPlan = read_json(&cp, "meta.plan")?;
    let pattern: Option<HeadPattern> = match cp.get("meta.pattern") {
        Some(_) => Some(read_json(&cp, "meta.pattern")?),
        None => None,
    };

    let mut graph = Graph::<f32>::new();
    let params = VitParams::from_values(&mut graph, &config, false, |name, shape| {
        let entry = cp.require(&format!("model.{name}"))?;
        let dims: Vec<usize> = entry.dims.iter().map(|&d| d as usize).collect();
        if dims != shape {
            return Err(Error::ConfigMismatch(format!(
                "model.{name}: stored {dims:?} vs expected {shape:?}"
            )));
        }
        entry.as_f32()
    })?;
    let mut pairs = Vec::new();
    for layer in 0..config.num_layers {
        for &target in &plan.lora.targets {
            let base = format!("adapter.{layer}.{}", target.as_str());
            let a_entry = cp.require(&format!("{base}.a"))?;
            let b_entry = cp.require(&format!("{base}.b"))?;
            let a_dims: Vec<usize> = a_entry.dims.iter().map(|&d| d as usize).collect();
            let b_dims: Vec<usize> = b_entry.dims.iter().map(|&d| d as usize).collect();
            let a = graph.param(&a_dims, a_entry.as_f32()?)?;
            let b = graph.param(&b_dims, b_entry.as_f32()?)?;
            pairs.push(AdapterPair { layer, target, a, b });
        }
    }
    let adapters = AdapterSet { config: plan.lora.clone(), pairs };
    graph.mark_persistent();

    let mut trainable = adapters.named_params();
    trainable.extend(params.classifier_params());
    let step_bytes = cp.require("opt.step")?.as_u8()?;
    let step_count = u64::from_le_bytes(step_bytes.try_into().map_err(|_| Error::Parse {
        offset: 0,
        msg: "opt.step must be 8 bytes".into(),
    })?);
    let mut moments = Vec::with_capacity(trainable.len());
    for (name, _) in &trainable {
        let m = cp.require(&format!("opt.{name}.m"))?.as_f32()?;
        let v = cp.require(&format!("opt.{name}.v"))?.as_f32()?;
        moments.push((m, v));
    }
    let optimizer = AdamW::from_state(plan.weight_decay, step_count, moments);
    let mut scoring_grads = Vec::with_capacity(adapters.pairs.len());
    for pair in &adapters.pairs {
        let name = format!("scoring.{}.{}.b", pair.layer, pair.target.as_str());
        scoring_grads.push(cp.require(&name)?.as_f32()?);
    }

    let state = TrainState {
        graph,
        params,
        adapters,
        optimizer,
        trainable,
        rng: ChaCha8Rng::seed_from_u64(plan.seed),
        global_step: step_count,
        total_steps: step_count,
        scoring_grads,
        flops: Default::default(),
    };
    Ok(LoadedCheckpoint { state, plan, pattern })
}

/// Backbone-only checkpoint (the pretrain artifact).
pub fn save_backbone(path: &Path, snapshot: &BackboneSnapshot) -> Result<()> {
    let mut cp = Checkpoint::new();
    push_json(&mut cp, "meta.model_config", &snapshot.config)?;
    let mut g = Graph::<f32>::new();
    let params = VitParams::init(&mut g, &snapshot.config, 0, true)?;
    for (name, id) in params.named_params() {
        let values = snapshot
            .get(name)
            .ok_or_else(|| Error::MissingEntry(name.clone()))?;
        cp.push_f32(&format!("model.{name}"), g.shape(*id), values)?;
    }
    cp.save(path)
}

pub fn load_backbone(path: &Path) -> Result<BackboneSnapshot> {
    let cp = Checkpoint::load(path)?;
    let config: ModelConfig = read_json(&cp, "meta.model_config")?;
    let mut g = Graph::<f32>::new();
    let params = VitParams::init(&mut g, &config, 0, true)?;
    let mut tensors = Vec::new();
    for (name, id) in params.named_params() {
        let entry = cp.require(&format!("model.{name}"))?;
        let dims: Vec<usize> = entry.dims.iter().map(|&d| d as usize).collect();
        if dims != g.shape(*id) {
            return Err(Error::ConfigMismatch(format!("model.{name}: shape {dims:?}")));
        }
        tensors.push((name.clone(), entry.as_f32()?));
    }
    Ok(BackboneSnapshot { config, tensors })
}

/// Merged-adapter storage: A factors in full, B factors reduced to the kept
/// head columns.
pub fn save_merged_adapters(path: &Path, merged: &MergedAdapters) -> Result<()> {
    let mut cp = Checkpoint::new();
    push_json(&mut cp, "meta.lora_config", &merged.config)?;
    push_json(
        &mut cp,
        "meta.geometry",
        &(merged.embed_dim, merged.num_heads),
    )?;
    for p in &merged.pairs {
        let base = format!("merged.{}.{}", p.layer, p.target.as_str());
        let d = merged.config.rank;
        cp.push_f32(&format!("{base}.a"), &[merged.embed_dim, d], &p.a)?;
        let kept_cols = p.b_kept.len() / d.max(1);
        cp.push_f32(&format!("{base}.b_kept"), &[d, kept_cols], &p.b_kept)?;
        let kept: Vec<u8> = p.kept_heads.iter().map(|&h| h as u8).collect();
        cp.push_u8(&format!("{base}.kept_heads"), &kept)?;
    }
    cp.save(path)
}

pub fn load_merged_adapters(path: &Path) -> Result<MergedAdapters> {
    let cp = Checkpoint::load(path)?;
    let config: crate::lora::LoraConfig = read_json(&cp, "meta.lora_config")?;
    let (embed_dim, num_heads): (usize, usize) = read_json(&cp, "meta.geometry")?;
    let mut pairs = Vec::new();
    let layers: usize = cp
        .names()
        .filter_map(|n| {
            n.strip_prefix("merged.")
                .and_then(|r| r.split('.').next())
                .and_then(|l| l.parse::<usize>().ok())
        })
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    for layer in 0..layers {
        for &target in &config.targets {
            let base = format!("merged.{layer}.{}", target.as_str());
            let a = cp.require(&format!("{base}.a"))?.as_f32()?;
            let b_kept = cp.require(&format!("{base}.b_kept"))?.as_f32()?;
            let kept_heads: Vec<usize> = cp
                .require(&format!("{base}.kept_heads"))?
                .as_u8()?
                .iter()
                .map(|&h| h as usize)
                .collect();
            pairs.push(MergedPair { layer, target, a, b_kept, kept_heads });
        }
    }
    Ok(MergedAdapters { config, embed_dim, num_heads, pairs })
}

/// Byte size of the stored `B` payloads in a merged-adapter checkpoint file.
pub fn merged_b_payload_bytes(path: &Path) -> Result<usize> {
    let cp = Checkpoint::load(path)?;
    Ok(cp
        .names()
        .filter(|n| n.ends_with(".b_kept"))
        .map(|n| cp.get(n).map(|e| e.payload.len()).unwrap_or(0))
        .sum())
}

// ── responsiveness / pattern / run-record exports ───────────────────

/// CSV with header `layer,head,score,criterion,mode`, layer-major rows,
/// scores at 9 significant digits.
pub fn export_responsiveness_csv(report: &ResponsivenessReport, path: &Path) -> Result<()> {
    report.validate()?;
    let mut out = String::from("layer,head,score,criterion,mode\n");
    for (layer, row) in report.scores.iter().enumerate() {
        for (head, score) in row.iter().enumerate() {
            out.push_str(&format!(
                "{layer},{head},{:.8e},{},{}\n",
                score,
                report.criterion.as_str(),
                report.mode.as_str()
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a responsiveness CSV back into (layer, head, score) triples.
pub fn parse_responsiveness_csv(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Parse { offset: i as u64, msg: format!("bad row '{line}'") });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::Parse { offset: i as u64, msg: format!("{e}") })
        };
        rows.push((parse(parts[0])? as usize, parse(parts[1])? as usize, parse(parts[2])?));
    }
    Ok(rows)
}

/// Pattern as structured text: `{"0": [1,1,0,...], "1": [...]}` with layers
/// in ascending order.
pub fn export_pattern_json(pattern: &HeadPattern, path: &Path) -> Result<()> {
    let mut out = String::from("{");
    for (l, row) in pattern.rows().iter().enumerate() {
        if l > 0 {
            out.push_str(", ");
        }
        let bits: Vec<String> = row.iter().map(|b| b.to_string()).collect();
        out.push_str(&format!("\"{l}\": [{}]", bits.join(", ")));
    }
    out.push_str("}\n");
    std::fs::write(path, out)?;
    Ok(())
}

/// One epoch record per line (line-delimited JSON).
pub fn write_epoch_lines(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Final summary document for a run.
pub fn write_run_summary(record: &RunRecord, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(record).expect("serializable");
    std::fs::write(path, json)?;
    Ok(())
}

// ── attention maps ──────────────────────────────────────────────────

/// Per-layer CLS-row attention averaged over active heads, reshaped to the
/// patch grid.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub side: usize,
    /// One `side*side` grid per layer.
    pub grids: Vec<Vec<f64>>,
    pub active_heads: Vec<usize>,
}

/// Runs one sample through the model and averages the CLS attention row over
/// the active heads of each layer (masked heads never contribute).
pub fn compute_attention_maps(
    state: &mut TrainState,
    patches: &[f32],
    pattern: Option<&HeadPattern>,
) -> Result<AttentionMaps> {
    let cfg = state.params.config.clone();
    let side = cfg.patches_per_side();
    let mut capture = crate::model::AttentionCapture::default();
    let eff = state.params.effective_weights(&mut state.graph, Some(&state.adapters), None)?;
    state.params.forward_sample(
        &mut state.graph,
        &eff,
        patches,
        pattern,
        None,
        Some(&mut capture),
    )?;
    state.graph.reset();

    let mut grids = Vec::with_capacity(capture.layers.len());
    let mut active_heads = Vec::with_capacity(capture.layers.len());
    for layer_rows in &capture.layers {
        let mut grid = vec![0.0f64; side * side];
        if !layer_rows.is_empty() {
            for (_, row) in layer_rows {
                // row[0] is CLS-to-CLS; the rest is the patch grid
                for (i, v) in row[1..].iter().enumerate() {
                    grid[i] += v;
                }
            }
            let inv = 1.0 / layer_rows.len() as f64;
            for v in grid.iter_mut() {
                *v *= inv;
            }
        }
        active_heads.push(layer_rows.len());
        grids.push(grid);
    }
    Ok(AttentionMaps { side, grids, active_heads })
}

/// Writes per-layer CSV grids, binary P5 PGM images scaled to `[0, 255]`,
/// and a metadata file flagging all-heads-masked layers.
pub fn write_attention_maps(maps: &AttentionMaps, base: &Path) -> Result<()> {
    let base_str = base.to_string_lossy();
    let mut meta = String::new();
    meta.push_str(&format!("layers={}\n", maps.grids.len()));
    meta.push_str(&format!("grid={}x{}\n", maps.side, maps.side));
    for (l, (grid, &active)) in maps.grids.iter().zip(&maps.active_heads).enumerate() {
        let csv_path = format!("{base_str}_layer{l}.csv");
        let mut csv = String::new();
        for r in 0..maps.side {
            let row: Vec<String> = (0..maps.side)
                .map(|c| format!("{:.8e}", grid[r * maps.side + c]))
                .collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        std::fs::write(csv_path, csv)?;

        let pgm_path = format!("{base_str}_layer{l}.pgm");
        let max = grid.iter().cloned().fold(0.0f64, f64::max);
        let mut pgm = format!("P5\n{} {}\n255\n", maps.side, maps.side).into_bytes();
        for &v in grid {
            let scaled = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
            pgm.push(scaled);
        }
        std::fs::write(pgm_path, pgm)?;

        meta.push_str(&format!("layer{l}.active_heads={active}\n"));
        if active == 0 {
            meta.push_str(&format!("layer{l}.warning=all_heads_masked\n"));
        }
    }
    std::fs::write(format!("{base_str}_metadata.txt"), meta)?;
    Ok(())
}

/// Cosine similarity between two attention grids.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
