//! Datasets, ingestion, augmentation, and rank-aware batch sampling.
//!
//! Two sources: the CIFAR-10 binary layout (one label byte + 3072 channel-major
//! pixel bytes per record) and a seeded Gaussian blob generator that also
//! emits a ground-truth ranking ordered by distance between class means.
//! Batches pair every drawn sample with one augmented view and are stratified
//! so each anchor's positive sets are populated whenever the data allows.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ranking::RankingTable;
use crate::tensor::{Tensor, TensorError};

const CACHE_MAGIC: &[u8; 4] = b"RCDS";
const CACHE_VERSION: u32 = 1;

pub const CIFAR10_NAMES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];
const CIFAR_SIDE: usize = 32;
const CIFAR_CHANNELS: usize = 3;
const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_RECORDS_PER_FILE: usize = 10000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file}: {reason}")]
    Ingest { file: String, reason: String },
    #[error("dataset: {0}")]
    Validation(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What the feature vectors are, which controls augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Vector,
    Image { side: usize, channels: usize },
}

/// An immutable labeled feature set.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<usize>,
    names: Vec<String>,
    dim: usize,
    kind: DataKind,
    source: String,
    class_indices: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        labels: Vec<usize>,
        names: Vec<String>,
        dim: usize,
        kind: DataKind,
        source: String,
    ) -> Result<Dataset, DataError> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(DataError::Validation(format!(
                "{} feature values for {} labels of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(DataError::Validation("empty dataset".into()));
        }
        let classes = names.len();
        if classes == 0 {
            return Err(DataError::Validation("no class names".into()));
        }
        let mut class_indices = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(DataError::Validation(format!(
                    "label {l} at sample {i} outside 0..{classes}"
                )));
            }
            class_indices[l].push(i);
        }
        Ok(Dataset {
            features,
            labels,
            names,
            dim,
            kind,
            source,
            class_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices.iter().map(Vec::len).collect()
    }

    pub fn indices_of_class(&self, c: usize) -> &[usize] {
        &self.class_indices[c]
    }

    /// The selected rows as an `[n, dim]` tensor (not on the tape).
    pub fn rows_tensor(&self, indices: &[usize]) -> Result<Tensor, DataError> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Validation(format!("index {i} out of range")));
            }
            data.extend(self.feature(i).iter().map(|&v| v as f64));
        }
        Ok(Tensor::from_vec(data, &[indices.len(), self.dim], false)?)
    }

    pub fn all_tensor(&self) -> Result<Tensor, DataError> {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.rows_tensor(&indices)
    }

    /// Samples of the kept classes only, relabeled through `remap` (old id →
    /// new id, None = dropped). Returns the dataset plus each row's original
    /// index for audits.
    pub fn without_classes(
        &self,
        remap: &[Option<usize>],
        new_names: Vec<String>,
    ) -> Result<(Dataset, Vec<usize>), DataError> {
        if remap.len() != self.class_count() {
            return Err(DataError::Validation(format!(
                "remap covers {} classes, dataset has {}",
                remap.len(),
                self.class_count()
            )));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut original = Vec::new();
        for i in 0..self.len() {
            if let Some(new_label) = remap[self.labels[i]] {
                features.extend_from_slice(self.feature(i));
                labels.push(new_label);
                original.push(i);
            }
        }
        let ds = Dataset::new(
            features,
            labels,
            new_names,
            self.dim,
            self.kind,
            format!("{} (classes withheld)", self.source),
        )?;
        Ok((ds, original))
    }

    /// The first `n` samples in stored order.
    pub fn head(&self, n: usize) -> Result<Dataset, DataError> {
        if n == 0 || n > self.len() {
            return Err(DataError::Validation(format!(
                "head of {n} from {} samples",
                self.len()
            )));
        }
        Dataset::new(
            self.features[..n * self.dim].to_vec(),
            self.labels[..n].to_vec(),
            self.names.clone(),
            self.dim,
            self.kind,
            format!("{} (first {n})", self.source),
        )
    }

    /// Exactly `max` samples (or all, if fewer exist) picked by a fixed hash
    /// of the row index: deterministic, but free of the aliasing a fixed
    /// stride shows on class-periodic layouts. Returns the subset and the
    /// chosen row indices, in stored order.
    pub fn subsample(&self, max: usize) -> Result<(Dataset, Vec<usize>), DataError> {
        if max == 0 {
            return Err(DataError::Validation("subsample of size 0".into()));
        }
        if self.len() <= max {
            return Ok((self.clone(), (0..self.len()).collect()));
        }
        let mut ranked: Vec<usize> = (0..self.len()).collect();
        ranked.sort_by_key(|&i| splitmix64(i as u64));
        let mut indices = ranked[..max].to_vec();
        indices.sort_unstable();
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            features.extend_from_slice(self.feature(i));
            labels.push(self.labels[i]);
        }
        let ds = Dataset::new(
            features,
            labels,
            self.names.clone(),
            self.dim,
            self.kind,
            format!("{} (subsampled to {})", self.source, indices.len()),
        )?;
        Ok((ds, indices))
    }

    /// Only the samples of the given classes, labels untouched.
    pub fn only_classes(&self, keep: &[usize]) -> Result<(Dataset, Vec<usize>), DataError> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut original = Vec::new();
        for i in 0..self.len() {
            if keep.contains(&self.labels[i]) {
                features.extend_from_slice(self.feature(i));
                labels.push(self.labels[i]);
                original.push(i);
            }
        }
        let ds = Dataset::new(
            features,
            labels,
            self.names.clone(),
            self.dim,
            self.kind,
            format!("{} (subset)", self.source),
        )?;
        Ok((ds, original))
    }

    // ── native cache format ─────────────────────────────────────────

    /// Serialize to the native cache layout: magic "RCDS", version, kind,
    /// geometry, names, labels, then f32 features, all little-endian.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        match self.kind {
            DataKind::Vector => {
                buf.push(0);
                buf.extend_from_slice(&0u32.to_le_bytes());
                buf.extend_from_slice(&0u32.to_le_bytes());
            }
            DataKind::Image { side, channels } => {
                buf.push(1);
                buf.extend_from_slice(&(side as u32).to_le_bytes());
                buf.extend_from_slice(&(channels as u32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.names.len() as u32).to_le_bytes());
        for name in &self.names {
            let b = name.as_bytes();
            buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
            buf.extend_from_slice(b);
        }
        let src = self.source.as_bytes();
        buf.extend_from_slice(&(src.len() as u32).to_le_bytes());
        buf.extend_from_slice(src);
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &f in &self.features {
            buf.extend_from_slice(&f.to_le_bytes());
        }
        buf
    }

    pub fn save_cache(&self, path: &Path) -> Result<(), DataError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_cache_bytes())?;
        Ok(())
    }

    pub fn from_cache_bytes(buf: &[u8], file: &str) -> Result<Dataset, DataError> {
        let err = |reason: String| DataError::Ingest {
            file: file.to_string(),
            reason,
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], DataError> {
            if pos + n > buf.len() {
                return Err(DataError::Ingest {
                    file: file.to_string(),
                    reason: format!("truncated at offset {pos}"),
                });
            }
            let s = &buf[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != CACHE_MAGIC {
            return Err(err("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(err(format!("unsupported cache version {version}")));
        }
        let kind_byte = take(1)?[0];
        let side = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let channels = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let kind = match kind_byte {
            0 => DataKind::Vector,
            1 => DataKind::Image { side, channels },
            other => return Err(err(format!("unknown kind byte {other}"))),
        };
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let class_count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut names = Vec::with_capacity(class_count);
        for _ in 0..class_count {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let s = std::str::from_utf8(take(len)?)
                .map_err(|e| DataError::Ingest {
                    file: file.to_string(),
                    reason: format!("name not utf-8: {e}"),
                })?
                .to_string();
            names.push(s);
        }
        let src_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let source = std::str::from_utf8(take(src_len)?)
            .map_err(|e| DataError::Ingest {
                file: file.to_string(),
                reason: format!("source not utf-8: {e}"),
            })?
            .to_string();
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let mut features = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            features.push(f32::from_le_bytes(take(4)?.try_into().unwrap()));
        }
        if pos != buf.len() {
            return Err(err(format!("{} trailing bytes", buf.len() - pos)));
        }
        Dataset::new(features, labels, names, dim, kind, source)
    }

    pub fn load_cache(path: &Path) -> Result<Dataset, DataError> {
        let buf = fs::read(path)?;
        Dataset::from_cache_bytes(&buf, &path.display().to_string())
    }
}

// ── CIFAR-10 binary ingestion ────────────────────────────────────────

fn read_cifar_file(
    path: &Path,
    features: &mut Vec<f32>,
    labels: &mut Vec<usize>,
) -> Result<(), DataError> {
    let name = path.display().to_string();
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| DataError::Ingest {
            file: name.clone(),
            reason: format!("cannot open: {e}"),
        })?
        .read_to_end(&mut buf)?;
    if buf.is_empty() || buf.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Ingest {
            file: name,
            reason: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records \
                 (full batches hold {CIFAR_RECORDS_PER_FILE})",
                buf.len(),
            ),
        });
    }
    for rec in buf.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(DataError::Ingest {
                file: name,
                reason: format!("label byte {label} >= 10"),
            });
        }
        labels.push(label);
        features.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

/// Load the CIFAR-10 binary directory: five training batch files plus
/// `test_batch.bin`, 10000 records each. Pixels are scaled to [0,1] and the
/// channel-major layout is preserved. Returns (train, test).
pub fn load_cifar10_binary(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let names: Vec<String> = CIFAR10_NAMES.iter().map(|s| s.to_string()).collect();
    let dim = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
    let kind = DataKind::Image {
        side: CIFAR_SIDE,
        channels: CIFAR_CHANNELS,
    };

    let mut train_features = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        read_cifar_file(
            &dir.join(format!("data_batch_{i}.bin")),
            &mut train_features,
            &mut train_labels,
        )?;
    }
    let mut test_features = Vec::new();
    let mut test_labels = Vec::new();
    read_cifar_file(&dir.join("test_batch.bin"), &mut test_features, &mut test_labels)?;

    let train = Dataset::new(
        train_features,
        train_labels,
        names.clone(),
        dim,
        kind,
        format!("cifar10 train ({})", dir.display()),
    )?;
    let test = Dataset::new(
        test_features,
        test_labels,
        names,
        dim,
        kind,
        format!("cifar10 test ({})", dir.display()),
    )?;
    Ok((train, test))
}

/// Synthetic stand-in for the CIFAR-10 binaries: ten classes of smooth
/// per-class color patterns plus pixel noise, channel-major like the real
/// files. Samples interleave classes so any prefix stays balanced.
pub fn synthetic_cifar(
    per_class_train: usize,
    per_class_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let classes = CIFAR10_NAMES.len();
    let dim = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
    let names: Vec<String> = CIFAR10_NAMES.iter().map(|s| s.to_string()).collect();
    let kind = DataKind::Image {
        side: CIFAR_SIDE,
        channels: CIFAR_CHANNELS,
    };

    // one smooth pattern per class and channel
    let mut patterns = vec![vec![0.0f64; dim]; classes];
    for (c, pattern) in patterns.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xC1A5_5E5 + c as u64));
        for ch in 0..CIFAR_CHANNELS {
            let fx = rng.random_range(1..4) as f64;
            let fy = rng.random_range(1..4) as f64;
            let gx = rng.random_range(1..4) as f64;
            let gy = rng.random_range(1..4) as f64;
            let p1: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let p2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for y in 0..CIFAR_SIDE {
                for x in 0..CIFAR_SIDE {
                    let u = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / 32.0;
                    let v = std::f64::consts::TAU * (gx * x as f64 + gy * y as f64) / 32.0;
                    pattern[ch * CIFAR_SIDE * CIFAR_SIDE + y * CIFAR_SIDE + x] =
                        0.5 + 0.18 * (u + p1).sin() + 0.12 * (v + p2).cos();
                }
            }
        }
    }

    let draw = |count_per_class: usize, salt: u64| -> (Vec<f32>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
        let total = count_per_class * classes;
        let mut features = Vec::with_capacity(total * dim);
        let mut labels = Vec::with_capacity(total);
        for i in 0..total {
            let c = i % classes;
            labels.push(c);
            for &p in &patterns[c] {
                let noisy = (p + 0.08 * gauss(&mut rng)).clamp(0.0, 1.0);
                // quantize like the byte format so files round-trip exactly
                features.push((noisy * 255.0).round() as f32 / 255.0);
            }
        }
        (features, labels)
    };

    let (train_f, train_l) = draw(per_class_train, 0x71A1);
    let (test_f, test_l) = draw(per_class_test, 0x7E57);
    let train = Dataset::new(train_f, train_l, names.clone(), dim, kind, "synthetic cifar train".into())?;
    let test = Dataset::new(test_f, test_l, names, dim, kind, "synthetic cifar test".into())?;
    Ok((train, test))
}

/// Write an image dataset pair as CIFAR-10 style binaries: five equal train
/// batch files plus `test_batch.bin`. Train size must divide by five.
pub fn write_cifar10_binary(dir: &Path, train: &Dataset, test: &Dataset) -> Result<(), DataError> {
    for ds in [train, test] {
        if ds.kind() != (DataKind::Image { side: CIFAR_SIDE, channels: CIFAR_CHANNELS }) {
            return Err(DataError::Validation(
                "only 3x32x32 image datasets fit the cifar10 binary format".into(),
            ));
        }
        if ds.class_count() > 10 {
            return Err(DataError::Validation("cifar10 format holds at most 10 classes".into()));
        }
    }
    if train.len() % 5 != 0 {
        return Err(DataError::Validation(format!(
            "train size {} does not split into 5 batch files",
            train.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let encode = |ds: &Dataset, range: std::ops::Range<usize>| -> Vec<u8> {
        let mut buf = Vec::with_capacity(range.len() * CIFAR_RECORD);
        for i in range {
            buf.push(ds.label(i) as u8);
            buf.extend(ds.feature(i).iter().map(|&v| (v * 255.0).round() as u8));
        }
        buf
    };
    let per_batch = train.len() / 5;
    for b in 0..5 {
        let bytes = encode(train, b * per_batch..(b + 1) * per_batch);
        fs::write(dir.join(format!("data_batch_{}.bin", b + 1)), bytes)?;
    }
    fs::write(dir.join("test_batch.bin"), encode(test, 0..test.len()))?;
    Ok(())
}

// ── synthetic blobs ──────────────────────────────────────────────────

/// Gaussian blob layout: one mean per class, shared isotropic spread.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub per_class: usize,
    pub names: Vec<String>,
}

impl SyntheticSpec {
    /// Class means spaced `spacing` apart along the first axis, so class
    /// similarity decays with index distance.
    pub fn chain(classes: usize, dims: usize, spacing: f64, sigma: f64, per_class: usize) -> SyntheticSpec {
        let means = (0..classes)
            .map(|c| {
                let mut m = vec![0.0; dims];
                m[0] = c as f64 * spacing;
                m
            })
            .collect();
        SyntheticSpec {
            means,
            sigma,
            per_class,
            names: (0..classes).map(|c| format!("class{c}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.means.len() < 2 {
            return Err(DataError::Validation("need at least 2 classes".into()));
        }
        if self.names.len() != self.means.len() {
            return Err(DataError::Validation(format!(
                "{} names for {} means",
                self.names.len(),
                self.means.len()
            )));
        }
        let dims = self.means[0].len();
        if dims == 0 || self.means.iter().any(|m| m.len() != dims) {
            return Err(DataError::Validation("means must share a positive dim".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(DataError::Validation(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.per_class == 0 {
            return Err(DataError::Validation("per_class must be > 0".into()));
        }
        for i in 0..self.means.len() {
            for j in (i + 1)..self.means.len() {
                if self.means[i] == self.means[j] {
                    return Err(DataError::Validation(format!(
                        "classes {i} and {j} share a mean"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to rank row indices for subsampling.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One standard normal draw (Box–Muller).
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.random();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Sample the blobs and derive the companion ranking: per class, other
/// classes sorted by ascending distance between means, exact ties sharing a
/// rank set. Deterministic in the seed.
pub fn generate_blobs(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, RankingTable), DataError> {
    spec.validate()?;
    let classes = spec.means.len();
    let dims = spec.means[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(classes * spec.per_class * dims);
    let mut labels = Vec::with_capacity(classes * spec.per_class);
    for (c, mean) in spec.means.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &m in mean {
                features.push((m + spec.sigma * gauss(&mut rng)) as f32);
            }
            labels.push(c);
        }
    }
    let dataset = Dataset::new(
        features,
        labels,
        spec.names.clone(),
        dims,
        DataKind::Vector,
        format!("synthetic blobs ({classes} classes, seed {seed})"),
    )?;

    let mut ranks = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut by_distance: Vec<(f64, usize)> = (0..classes)
            .filter(|&o| o != c)
            .map(|o| {
                let d: f64 = spec.means[c]
                    .iter()
                    .zip(&spec.means[o])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, o)
            })
            .collect();
        by_distance.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut sets: Vec<Vec<usize>> = Vec::new();
        let mut last_distance = f64::NAN;
        for (d, o) in by_distance {
            if sets.is_empty() || d != last_distance {
                sets.push(vec![o]);
                last_distance = d;
            } else {
                sets.last_mut().unwrap().push(o);
            }
        }
        ranks.push(sets);
    }
    let table = RankingTable::from_ids(&spec.names, ranks)
        .map_err(|e| DataError::Validation(format!("companion ranking: {e}")))?;
    Ok((dataset, table))
}

// ── augmentation ─────────────────────────────────────────────────────

/// How to produce a sample's second view.
#[derive(Debug, Clone, Copy)]
pub enum AugmentMode {
    /// Additive Gaussian noise with the given spread.
    Vector { sigma: f64 },
    /// Random horizontal flip, random crop with 4-pixel padding, and
    /// per-channel brightness jitter of ±`jitter`, clamped to [0,1].
    Image { side: usize, channels: usize, jitter: f64 },
}

impl AugmentMode {
    pub fn for_dataset(dataset: &Dataset, sigma: f64, jitter: f64) -> AugmentMode {
        match dataset.kind() {
            DataKind::Vector => AugmentMode::Vector { sigma },
            DataKind::Image { side, channels } => AugmentMode::Image { side, channels, jitter },
        }
    }
}

/// Mirror an image horizontally (its own inverse).
pub fn hflip(features: &[f32], side: usize, channels: usize) -> Vec<f32> {
    let mut out = vec![0.0; features.len()];
    for c in 0..channels {
        for y in 0..side {
            for x in 0..side {
                out[c * side * side + y * side + x] =
                    features[c * side * side + y * side + (side - 1 - x)];
            }
        }
    }
    out
}

/// Shift the image by (dx−pad, dy−pad) with zero fill; dx=dy=pad is identity.
pub fn crop_shift(features: &[f32], side: usize, channels: usize, pad: usize, dx: usize, dy: usize) -> Vec<f32> {
    let mut out = vec![0.0; features.len()];
    for c in 0..channels {
        for y in 0..side {
            for x in 0..side {
                let sy = y as isize + dy as isize - pad as isize;
                let sx = x as isize + dx as isize - pad as isize;
                if sy >= 0 && (sy as usize) < side && sx >= 0 && (sx as usize) < side {
                    out[c * side * side + y * side + x] =
                        features[c * side * side + sy as usize * side + sx as usize];
                }
            }
        }
    }
    out
}

/// One augmented view of a sample. Label-preserving by construction.
pub fn augment(features: &[f32], mode: &AugmentMode, rng: &mut ChaCha8Rng) -> Vec<f32> {
    match *mode {
        AugmentMode::Vector { sigma } => features
            .iter()
            .map(|&v| v + (sigma * gauss(rng)) as f32)
            .collect(),
        AugmentMode::Image { side, channels, jitter } => {
            let mut img = if rng.random::<bool>() {
                hflip(features, side, channels)
            } else {
                features.to_vec()
            };
            let pad = 4;
            let dx = rng.random_range(0..=2 * pad);
            let dy = rng.random_range(0..=2 * pad);
            img = crop_shift(&img, side, channels, pad, dx, dy);
            for c in 0..channels {
                let delta = rng.random_range(-jitter..=jitter) as f32;
                for v in &mut img[c * side * side..(c + 1) * side * side] {
                    *v = (*v + delta).clamp(0.0, 1.0);
                }
            }
            img
        }
    }
}

// ── batch sampling ───────────────────────────────────────────────────

/// Composition notes from the sampler, for coverage monitoring.
#[derive(Debug, Clone, Default)]
pub struct BatchDiagnostics {
    /// Classes that could not supply the two same-class samples asked of them.
    pub sparse_classes: Vec<usize>,
    /// The stratification wanted more slots than the batch size allows.
    pub truncated: bool,
}

/// A sampled batch: rows 2k and 2k+1 of `views` are sample k's original and
/// augmented view, with `labels[k]` shared by both.
#[derive(Debug)]
pub struct Batch {
    pub views: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
    pub diagnostics: BatchDiagnostics,
}

impl Batch {
    /// Labels aligned with the 2B view rows.
    pub fn expanded_labels(&self) -> Vec<usize> {
        self.labels.iter().flat_map(|&l| [l, l]).collect()
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Draw a stratified batch of `b` samples: a set of anchor classes each
/// contributes two samples, every class they rank contributes at least one,
/// and the rest is uniform. Every sample gets one augmented view.
pub fn sample_batch(
    dataset: &Dataset,
    table: &RankingTable,
    b: usize,
    mode: &AugmentMode,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, DataError> {
    if b < 2 {
        return Err(DataError::Validation(format!("batch size {b} < 2")));
    }
    if table.class_count() != dataset.class_count() {
        return Err(DataError::Validation(format!(
            "ranking covers {} classes, dataset has {}",
            table.class_count(),
            dataset.class_count()
        )));
    }
    let classes = dataset.class_count();
    let mut anchor_classes: Vec<usize> = (0..classes).collect();
    anchor_classes.shuffle(rng);
    anchor_classes.truncate(classes.min((b / 2).max(1)));

    let mut diagnostics = BatchDiagnostics::default();
    let mut chosen: Vec<usize> = Vec::with_capacity(b);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();

    let draw_from_class = |c: usize, chosen: &mut Vec<usize>, rng: &mut ChaCha8Rng| -> bool {
        let pool = dataset.indices_of_class(c);
        if pool.is_empty() {
            return false;
        }
        // prefer an index not already in the batch
        for _ in 0..8 {
            let idx = pool[rng.random_range(0..pool.len())];
            if !chosen.contains(&idx) {
                chosen.push(idx);
                return true;
            }
        }
        chosen.push(pool[rng.random_range(0..pool.len())]);
        true
    };

    'outer: for &ac in &anchor_classes {
        for _ in 0..2 {
            if chosen.len() >= b {
                diagnostics.truncated = true;
                break 'outer;
            }
            if draw_from_class(ac, &mut chosen, rng) {
                *counts.entry(ac).or_insert(0) += 1;
            }
        }
        if dataset.indices_of_class(ac).len() < 2 {
            diagnostics.sparse_classes.push(ac);
        }
        for set in table.rank_sets(ac) {
            for &rc in set {
                if counts.get(&rc).copied().unwrap_or(0) > 0 {
                    continue;
                }
                if chosen.len() >= b {
                    diagnostics.truncated = true;
                    break 'outer;
                }
                if draw_from_class(rc, &mut chosen, rng) {
                    *counts.entry(rc).or_insert(0) += 1;
                } else {
                    diagnostics.sparse_classes.push(rc);
                }
            }
        }
    }
    while chosen.len() < b {
        let idx = rng.random_range(0..dataset.len());
        chosen.push(idx);
        *counts.entry(dataset.label(idx)).or_insert(0) += 1;
    }

    let mut rows = Vec::with_capacity(2 * b * dataset.dim());
    let mut labels = Vec::with_capacity(b);
    for &idx in &chosen {
        let original = dataset.feature(idx);
        let augmented = augment(original, mode, rng);
        rows.extend(original.iter().map(|&v| v as f64));
        rows.extend(augmented.iter().map(|&v| v as f64));
        labels.push(dataset.label(idx));
    }
    let views = Tensor::from_vec(rows, &[2 * b, dataset.dim()], false)?;
    Ok(Batch {
        views,
        labels,
        indices: chosen,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::Rank;

    #[test]
    fn blobs_are_deterministic() {
        let spec = SyntheticSpec::chain(3, 4, 5.0, 1.0, 10);
        let (a, _) = generate_blobs(&spec, 42).unwrap();
        let (b, _) = generate_blobs(&spec, 42).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        let (c, _) = generate_blobs(&spec, 43).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn chain_companion_ranking() {
        let spec = SyntheticSpec::chain(5, 3, 2.0, 0.5, 4);
        let (_, table) = generate_blobs(&spec, 1).unwrap();
        // class 0 ranks neighbors in index order
        assert_eq!(table.rank_sets(0), &[vec![1], vec![2], vec![3], vec![4]]);
        // class 2 has equidistant neighbors on both sides: tied sets
        assert_eq!(table.rank_sets(2), &[vec![1, 3], vec![0, 4]]);
        assert_eq!(table.rank_of(0, 1).unwrap(), Rank::Level(2));
    }

    #[test]
    fn well_separated_blobs_are_knn_separable() {
        // two classes 10 sigma apart: raw-feature 1-NN is essentially perfect
        let spec = SyntheticSpec::chain(2, 4, 10.0, 1.0, 60);
        let (data, _) = generate_blobs(&spec, 7).unwrap();
        let mut correct = 0;
        for i in 0..data.len() {
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..data.len() {
                if i == j {
                    continue;
                }
                let d: f64 = data
                    .feature(i)
                    .iter()
                    .zip(data.feature(j))
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, data.label(j));
                }
            }
            if best.1 == data.label(i) {
                correct += 1;
            }
        }
        assert!(correct as f64 / data.len() as f64 >= 0.999);
    }

    #[test]
    fn cache_round_trip_is_byte_identical() {
        let spec = SyntheticSpec::chain(3, 4, 5.0, 1.0, 8);
        let (data, _) = generate_blobs(&spec, 11).unwrap();
        let bytes = data.to_cache_bytes();
        let back = Dataset::from_cache_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.to_cache_bytes(), bytes);
        assert_eq!(back.labels(), data.labels());
        assert_eq!(back.dim(), data.dim());
    }

    #[test]
    fn cache_rejects_corruption() {
        let spec = SyntheticSpec::chain(2, 2, 5.0, 1.0, 3);
        let (data, _) = generate_blobs(&spec, 11).unwrap();
        let bytes = data.to_cache_bytes();
        assert!(Dataset::from_cache_bytes(&bytes[..bytes.len() - 3], "mem").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::from_cache_bytes(&bad, "mem").is_err());
    }

    #[test]
    fn vector_augment_zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![0.5f32, -0.25, 1.0];
        let y = augment(&x, &AugmentMode::Vector { sigma: 0.0 }, &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn vector_augment_mean_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = vec![0.5f32, -0.25];
        let sigma = 0.2;
        let n = 10000;
        let mut sums = [0.0f64; 2];
        for _ in 0..n {
            let y = augment(&x, &AugmentMode::Vector { sigma }, &mut rng);
            sums[0] += y[0] as f64;
            sums[1] += y[1] as f64;
        }
        for (s, orig) in sums.iter().zip(&x) {
            let mean = s / n as f64;
            assert!((mean - *orig as f64).abs() < 3.0 * sigma / 100.0);
        }
    }

    #[test]
    fn hflip_is_involution_and_center_crop_is_identity() {
        let side = 4;
        let channels = 2;
        let img: Vec<f32> = (0..side * side * channels).map(|i| i as f32 / 10.0).collect();
        assert_eq!(hflip(&hflip(&img, side, channels), side, channels), img);
        assert_eq!(crop_shift(&img, side, channels, 4, 4, 4), img);
        assert_ne!(crop_shift(&img, side, channels, 4, 2, 4), img);
    }

    fn chain_setup(classes: usize, per_class: usize) -> (Dataset, RankingTable) {
        let spec = SyntheticSpec::chain(classes, 4, 5.0, 1.0, per_class);
        generate_blobs(&spec, 3).unwrap()
    }

    #[test]
    fn batch_has_paired_views_and_shared_labels() {
        let (data, table) = chain_setup(3, 20);
        let mode = AugmentMode::Vector { sigma: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = sample_batch(&data, &table, 8, &mode, &mut rng).unwrap();
        assert_eq!(batch.views.shape(), vec![16, 4]);
        assert_eq!(batch.labels.len(), 8);
        assert_eq!(batch.indices.len(), 8);
        let expanded = batch.expanded_labels();
        for k in 0..8 {
            assert_eq!(expanded[2 * k], expanded[2 * k + 1]);
            assert_eq!(expanded[2 * k], batch.labels[k]);
            assert_eq!(batch.labels[k], data.label(batch.indices[k]));
        }
    }

    #[test]
    fn batch_sampling_is_deterministic_in_seed() {
        let (data, table) = chain_setup(3, 20);
        let mode = AugmentMode::Vector { sigma: 0.1 };
        let mut r1 = ChaCha8Rng::seed_from_u64(21);
        let mut r2 = ChaCha8Rng::seed_from_u64(21);
        let a = sample_batch(&data, &table, 12, &mode, &mut r1).unwrap();
        let b = sample_batch(&data, &table, 12, &mode, &mut r2).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.views.value(), b.views.value());
    }

    #[test]
    fn stratified_batch_populates_positive_sets() {
        // a 3-class chain with B=12 leaves room to fill P_1 and P_2 everywhere
        let (data, table) = chain_setup(3, 20);
        let mode = AugmentMode::Vector { sigma: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let batch = sample_batch(&data, &table, 12, &mode, &mut rng).unwrap();
            let labels = batch.expanded_labels();
            for (a, &la) in labels.iter().enumerate() {
                // P_1: another same-class row
                assert!(labels.iter().enumerate().any(|(j, &lj)| j != a && lj == la));
                // P_2: a row of the nearest ranked class
                if let Some(first_set) = table.rank_sets(la).first() {
                    assert!(
                        labels.iter().any(|lj| first_set.contains(lj)),
                        "anchor class {la} missing rank-2 representative"
                    );
                }
            }
        }
    }

    #[test]
    fn sampler_coverage_on_chain_is_nearly_total() {
        // over 1000 batches, <1% of (anchor, existing-level) pairs may be empty
        let (data, table) = chain_setup(5, 40);
        let mode = AugmentMode::Vector { sigma: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut total_pairs = 0u64;
        let mut empty_pairs = 0u64;
        for _ in 0..1000 {
            let batch = sample_batch(&data, &table, 16, &mode, &mut rng).unwrap();
            let labels = batch.expanded_labels();
            for (a, &la) in labels.iter().enumerate() {
                for level in 1..=table.depth(la) {
                    total_pairs += 1;
                    let populated = labels.iter().enumerate().any(|(j, &lj)| {
                        j != a && table.rank_of(la, lj).unwrap() == Rank::Level(level)
                    });
                    if !populated {
                        empty_pairs += 1;
                    }
                }
            }
        }
        let fraction = empty_pairs as f64 / total_pairs as f64;
        assert!(fraction < 0.01, "empty fraction {fraction}");
    }

    #[test]
    fn singleton_class_is_reported_sparse() {
        let features = vec![0.0f32, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 9.0, 9.0];
        let labels = vec![0, 0, 0, 0, 1];
        let names = vec!["a".to_string(), "b".to_string()];
        let data = Dataset::new(features, labels, names, 2, DataKind::Vector, "t".into()).unwrap();
        let table = RankingTable::flat(data.names());
        let mode = AugmentMode::Vector { sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut saw_sparse = false;
        for _ in 0..20 {
            let batch = sample_batch(&data, &table, 4, &mode, &mut rng).unwrap();
            if batch.diagnostics.sparse_classes.contains(&1) {
                saw_sparse = true;
            }
        }
        assert!(saw_sparse);
    }

    #[test]
    fn without_classes_drops_and_relabels() {
        let (data, table) = chain_setup(4, 5);
        let (new_table, remap) = table.without_classes(&[1]).unwrap();
        let (subset, original) = data
            .without_classes(&remap, new_table.names().to_vec())
            .unwrap();
        assert_eq!(subset.len(), 15);
        assert_eq!(subset.class_count(), 3);
        for (row, &orig) in original.iter().enumerate() {
            assert_ne!(data.label(orig), 1);
            assert_eq!(remap[data.label(orig)].unwrap(), subset.label(row));
        }
    }

    #[test]
    fn cifar_loader_round_trip_on_generated_files() {
        let dir = std::env::temp_dir().join("rankcl-cifar-test");
        fs::create_dir_all(&dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let records = 200;
        for name in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"] {
            let mut buf = Vec::with_capacity(records * CIFAR_RECORD);
            for _ in 0..records {
                buf.push(rng.random_range(0..10u8));
                for _ in 0..CIFAR_RECORD - 1 {
                    buf.push(rng.random::<u8>());
                }
            }
            fs::write(dir.join(name), &buf).unwrap();
        }
        let (train, test) = load_cifar10_binary(&dir).unwrap();
        assert_eq!(train.len(), 5 * records);
        assert_eq!(test.len(), records);
        assert_eq!(train.class_count(), 10);
        assert_eq!(train.dim(), 3072);
        assert!(train.features.iter().all(|&v| (0.0..=1.0).contains(&v)));

        // truncate one file mid-record
        let path = dir.join("data_batch_3.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(
            load_cifar10_binary(&dir),
            Err(DataError::Ingest { .. })
        ));
        fs::write(&path, &bytes).unwrap();

        // out-of-range label byte
        let mut bad = fs::read(dir.join("test_batch.bin")).unwrap();
        bad[0] = 10;
        fs::write(dir.join("test_batch.bin"), &bad).unwrap();
        assert!(matches!(
            load_cifar10_binary(&dir),
            Err(DataError::Ingest { .. })
        ));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn synthetic_cifar_writes_loadable_files() {
        let (train, test) = synthetic_cifar(20, 5, 3).unwrap();
        assert_eq!(train.len(), 200);
        assert_eq!(test.len(), 50);
        assert_eq!(train.class_counts(), vec![20; 10]);
        // any prefix is balanced within one sample
        let head = train.head(40).unwrap();
        assert_eq!(head.class_counts(), vec![4; 10]);

        let dir = std::env::temp_dir().join("rankcl-syncifar-test");
        write_cifar10_binary(&dir, &train, &test).unwrap();
        let (back_train, back_test) = load_cifar10_binary(&dir).unwrap();
        assert_eq!(back_train.len(), train.len());
        assert_eq!(back_test.labels(), test.labels());
        // quantized generation makes the file round trip exact
        assert_eq!(back_train.features, train.features);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn head_and_subsample_subsets() {
        let spec = SyntheticSpec::chain(3, 4, 5.0, 0.5, 10);
        let (data, _) = generate_blobs(&spec, 1).unwrap();
        let head = data.head(7).unwrap();
        assert_eq!(head.len(), 7);
        assert_eq!(head.feature(3), data.feature(3));
        assert!(data.head(0).is_err());
        assert!(data.head(data.len() + 1).is_err());

        let (sub, picked) = data.subsample(8).unwrap();
        assert_eq!(sub.len(), 8);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        for (row, &orig) in picked.iter().enumerate() {
            assert_eq!(sub.feature(row), data.feature(orig));
            assert_eq!(sub.label(row), data.label(orig));
        }
        let (again, picked_again) = data.subsample(8).unwrap();
        assert_eq!(picked, picked_again);
        assert_eq!(sub.features, again.features);
        let (all, _) = data.subsample(1000).unwrap();
        assert_eq!(all.len(), data.len());
    }

    #[test]
    fn subsample_covers_interleaved_classes() {
        // labels laid out with period = class count: a fixed stride would
        // drop entire classes here
        let classes = 4;
        let n = 400;
        let mut features = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            features.push(i as f32);
            features.push(1.0);
            labels.push(i % classes);
        }
        let names: Vec<String> = (0..classes).map(|c| format!("class{c}")).collect();
        let data =
            Dataset::new(features, labels, names, 2, DataKind::Vector, "test".into()).unwrap();
        let (sub, _) = data.subsample(n / 2).unwrap();
        for c in 0..classes {
            let count = sub.labels().iter().filter(|&&l| l == c).count();
            assert!(
                count >= n / classes / 4,
                "class {c} nearly vanished from the subsample: {count} rows"
            );
        }
    }
}
