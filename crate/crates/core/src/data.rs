//! Deterministic synthetic image-classification tasks and the raw binary
//! dataset format.
//!
//! Each class of a task shares a deterministic motif (stripe angle, blob
//! count, checker cell size, or 2-D frequency) plus Gaussian pixel noise.
//! Train/val/test splits draw from distinct seed streams, so they are
//! disjoint by construction. Pretrain and adaptation workflows use different
//! motif families, making adaptation a genuine transfer.
//!
//! Pixels are stored as `u8`; normalization to `[0, 1]` happens exactly once,
//! in the loader boundary that produces model inputs.

use crate::error::{Error, Result};
use crate::model::{patchify, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

/// Class-conditional structure family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifFamily {
    Stripes,
    Blobs,
    Checker,
    Frequency,
}

impl MotifFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            MotifFamily::Stripes => "stripes",
            MotifFamily::Blobs => "blobs",
            MotifFamily::Checker => "checker",
            MotifFamily::Frequency => "frequency",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(MotifFamily::Stripes),
            "blobs" => Ok(MotifFamily::Blobs),
            "checker" => Ok(MotifFamily::Checker),
            "frequency" => Ok(MotifFamily::Frequency),
            other => Err(Error::Config(format!("unknown motif family '{other}'"))),
        }
    }
}

/// Parameters of one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub image_size: usize,
    pub noise_std: f32,
    pub seed: u64,
    pub motif: MotifFamily,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Raw single-split dataset: u8 pixels, u16 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub images: Vec<u8>,
    pub labels: Vec<u16>,
}

impl RawDataset {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn image_len(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }
}

/// Generated task splits.
#[derive(Debug, Clone)]
pub struct SyntheticSplits {
    pub spec: SyntheticTaskSpec,
    pub train: RawDataset,
    pub val: RawDataset,
    pub test: RawDataset,
}

fn motif_value(family: MotifFamily, class: usize, num_classes: usize, x: usize, y: usize, size: usize) -> f64 {
    let s = size as f64;
    let (xf, yf) = (x as f64, y as f64);
    match family {
        MotifFamily::Stripes => {
            let theta = class as f64 * PI / num_classes as f64;
            let u = (xf * theta.cos() + yf * theta.sin()) / s;
            0.5 + 0.5 * (2.0 * PI * 3.0 * u).sin()
        }
        MotifFamily::Frequency => {
            let f = (class + 1) as f64;
            0.5 + 0.5 * (2.0 * PI * f * xf / s).sin() * (2.0 * PI * f * yf / s).sin()
        }
        MotifFamily::Checker => {
            let cell = class + 2;
            if (x / cell + y / cell).is_multiple_of(2) {
                0.85
            } else {
                0.15
            }
        }
        MotifFamily::Blobs => {
            let k = class + 1;
            let sigma = s / 8.0;
            let mut v = 0.0f64;
            for j in 0..k {
                let angle = 2.0 * PI * j as f64 / k as f64 + class as f64 * 0.7;
                let cx = s / 2.0 + (s / 3.0) * angle.cos();
                let cy = s / 2.0 + (s / 3.0) * angle.sin();
                let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                v += (-d2 / (2.0 * sigma * sigma)).exp();
            }
            v.min(1.0)
        }
    }
}

fn generate_split(spec: &SyntheticTaskSpec, samples: usize, stream_salt: u64) -> RawDataset {
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stream_salt);
    let noise = Normal::new(0.0f64, spec.noise_std as f64).expect("valid stddev");

    // class-balanced labels (round-robin), order shuffled within the split
    let mut labels: Vec<u16> = (0..samples).map(|i| (i % spec.num_classes) as u16).collect();
    for i in (1..labels.len()).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }

    let mut images = Vec::with_capacity(samples * size * size);
    for &label in &labels {
        for y in 0..size {
            for x in 0..size {
                let base = motif_value(spec.motif, label as usize, spec.num_classes, x, y, size);
                let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                images.push((v * 255.0).round() as u8);
            }
        }
    }
    RawDataset { height: size as u16, width: size as u16, channels: 1, images, labels }
}

const TRAIN_SALT: u64 = 0x7261_696e;
const VAL_SALT: u64 = 0x76_616c;
const TEST_SALT: u64 = 0x7465_7374;

/// Deterministic generation: same spec (including seed) gives bitwise-equal
/// datasets; the three splits use distinct seed streams.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<SyntheticSplits> {
    spec.validate()?;
    Ok(SyntheticSplits {
        spec: spec.clone(),
        train: generate_split(spec, spec.train_samples, TRAIN_SALT),
        val: generate_split(spec, spec.val_samples, VAL_SALT),
        test: generate_split(spec, spec.test_samples, TEST_SALT),
    })
}

// ── model-ready views ───────────────────────────────────────────────

/// One split normalized and patchified for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub patches: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// All three splits plus the class count, ready for training.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub num_classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Normalizes pixels to `[0, 1]` (the single normalization point) and
/// patchifies one raw split for the given model geometry.
pub fn prepare_split(model: &ModelConfig, raw: &RawDataset) -> Result<Split> {
    if raw.height as usize != model.image_size
        || raw.width as usize != model.image_size
        || raw.channels as usize != model.channels
    {
        return Err(Error::ConfigMismatch(format!(
            "dataset {}x{}x{} vs model {}x{}x{}",
            raw.channels, raw.height, raw.width, model.channels, model.image_size, model.image_size
        )));
    }
    let n = raw.count();
    let mut patches = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let img: Vec<f32> = raw.image(i).iter().map(|&p| p as f32 / 255.0).collect();
        patches.push(patchify(model, &img)?);
        labels.push(raw.labels[i] as usize);
    }
    Ok(Split { patches, labels })
}

pub fn task_data(model: &ModelConfig, splits: &SyntheticSplits) -> Result<TaskData> {
    Ok(TaskData {
        num_classes: splits.spec.num_classes,
        train: prepare_split(model, &splits.train)?,
        val: prepare_split(model, &splits.val)?,
        test: prepare_split(model, &splits.test)?,
    })
}

// ── raw binary format ───────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"HLDS";
const VERSION: u16 = 1;

/// Writes the `HLDS` container: magic, version u16 LE, count u32 LE,
/// height u16, width u16, channels u8, label_width u8 in {1, 2}, images
/// row-major, then labels.
pub fn save_raw(ds: &RawDataset, path: &Path) -> Result<()> {
    let expected = ds.count() * ds.image_len();
    if ds.images.len() != expected {
        return Err(Error::Config(format!(
            "image payload {} bytes, header implies {expected}",
            ds.images.len()
        )));
    }
    let label_width: u8 = if ds.labels.iter().all(|&l| l < 256) { 1 } else { 2 };
    let mut buf = Vec::with_capacity(16 + ds.images.len() + ds.labels.len() * label_width as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.count() as u32).to_le_bytes());
    buf.extend_from_slice(&ds.height.to_le_bytes());
    buf.extend_from_slice(&ds.width.to_le_bytes());
    buf.push(ds.channels);
    buf.push(label_width);
    buf.extend_from_slice(&ds.images);
    for &l in &ds.labels {
        if label_width == 1 {
            buf.push(l as u8);
        } else {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.data.len() {
            return Err(Error::Parse {
                offset: self.offset as u64,
                msg: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let s = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Reads an `HLDS` container; parse errors carry the byte offset.
pub fn load_raw(path: &Path) -> Result<RawDataset> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut cur = Cursor { data: &data, offset: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse { offset: 0, msg: format!("bad magic {magic:?}") });
    }
    let version = cur.u16_le("version")?;
    if version != VERSION {
        return Err(Error::Parse { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = cur.u32_le("count")? as usize;
    let height = cur.u16_le("height")?;
    let width = cur.u16_le("width")?;
    let channels = cur.u8("channels")?;
    let label_width = cur.u8("label_width")?;
    if label_width != 1 && label_width != 2 {
        return Err(Error::Parse {
            offset: (cur.offset - 1) as u64,
            msg: format!("label_width {label_width} not in {{1, 2}}"),
        });
    }
    let image_bytes = count * height as usize * width as usize * channels as usize;
    let images = cur.take(image_bytes, "image payload")?.to_vec();
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(if label_width == 1 {
            cur.u8("label")? as u16
        } else {
            cur.u16_le("label")?
        });
    }
    if cur.offset != data.len() {
        return Err(Error::Parse {
            offset: cur.offset as u64,
            msg: format!("{} trailing bytes", data.len() - cur.offset),
        });
    }
    Ok(RawDataset { height, width, channels, images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            num_classes: 4,
            train_samples: 16,
            val_samples: 8,
            test_samples: 8,
            image_size: 16,
            noise_std: 0.05,
            seed: 42,
            motif: MotifFamily::Stripes,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec()).unwrap();
        let b = generate(&spec()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn zero_noise_makes_class_images_identical() {
        let mut s = spec();
        s.noise_std = 0.0;
        let d = generate(&s).unwrap();
        let per_class: Vec<Vec<&[u8]>> = (0..s.num_classes)
            .map(|c| {
                (0..d.train.count())
                    .filter(|&i| d.train.labels[i] as usize == c)
                    .map(|i| d.train.image(i))
                    .collect()
            })
            .collect();
        for imgs in per_class {
            assert!(imgs.len() >= 2);
            for w in imgs.windows(2) {
                assert_eq!(w[0], w[1]);
            }
        }
    }

    #[test]
    fn splits_are_class_balanced() {
        let d = generate(&spec()).unwrap();
        for split in [&d.train, &d.val, &d.test] {
            let mut counts = vec![0usize; 4];
            for &l in &split.labels {
                counts[l as usize] += 1;
            }
            let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(mx - mn <= 1, "{counts:?}");
        }
    }

    #[test]
    fn motif_families_differ() {
        let mut s = spec();
        s.noise_std = 0.0;
        let stripes = generate(&s).unwrap();
        s.motif = MotifFamily::Checker;
        let checker = generate(&s).unwrap();
        assert_ne!(stripes.train.images, checker.train.images);
    }

    #[test]
    fn raw_round_trip_bitwise() {
        let d = generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.hlds");
        save_raw(&d.train, &path).unwrap();
        let loaded = load_raw(&path).unwrap();
        assert_eq!(loaded, d.train);
        // save again: byte-identical files
        let path2 = dir.path().join("again.hlds");
        save_raw(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_errors_with_offset() {
        let d = generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.hlds");
        save_raw(&d.train, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() - 10;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        match load_raw(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_errors_at_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hlds");
        std::fs::write(&path, b"NOPE----------------").unwrap();
        match load_raw(&path) {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("expected parse error at 0, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let empty = RawDataset { height: 8, width: 8, channels: 1, images: vec![], labels: vec![] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.hlds");
        save_raw(&empty, &path).unwrap();
        let loaded = load_raw(&path).unwrap();
        assert_eq!(loaded, empty);
        assert_eq!(loaded.count(), 0);
    }

    #[test]
    fn wide_labels_use_two_bytes() {
        let ds = RawDataset {
            height: 1,
            width: 1,
            channels: 1,
            images: vec![0, 1],
            labels: vec![0, 300],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.hlds");
        save_raw(&ds, &path).unwrap();
        assert_eq!(load_raw(&path).unwrap(), ds);
    }
}
