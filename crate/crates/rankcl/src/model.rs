//! Encoder model, SGD with momentum, and checkpoint serialization.
//!
//! The encoder is an MLP (optionally fronted by a small strided conv stem for
//! image inputs) with three heads off the feature layer: a projection head
//! whose output is l2-normalized for the contrastive losses, and a linear
//! classifier for the softmax baseline and probes.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conv::Conv2d;
use crate::tensor::{Tensor, TensorError};

const CHECKPOINT_MAGIC: &[u8; 4] = b"RCKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    Config(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint version {found} unsupported (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("optimizer: parameter {index} has no gradient; run backward first")]
    MissingGrad { index: usize },
}

/// Strided 3x3 conv layers applied before the MLP, for image inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStemConfig {
    /// Square input side length (e.g. 32 for CIFAR-shaped images).
    pub side: usize,
    pub in_channels: usize,
    /// Output channels per layer; each layer is kernel 3, stride 2, padding 1.
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub projection_dim: usize,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_stem: Option<ConvStemConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.projection_dim == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.classes < 1 {
            return Err(ModelError::Config("need at least one class".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(ModelError::Config("hidden sizes must be positive".into()));
        }
        if let Some(stem) = &self.conv_stem {
            if stem.channels.is_empty() {
                return Err(ModelError::Config("conv stem needs at least one layer".into()));
            }
            if stem.in_channels * stem.side * stem.side != self.input_dim {
                return Err(ModelError::Config(format!(
                    "conv stem expects input dim {}, config says {}",
                    stem.in_channels * stem.side * stem.side,
                    self.input_dim
                )));
            }
        }
        Ok(())
    }
}

struct Linear {
    weight: Tensor, // [in, out]
    bias: Tensor,   // [out]
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            weight: Tensor::from_vec(w, &[fan_in, fan_out], true).expect("shape covers data"),
            bias: Tensor::from_vec(b, &[fan_out], true).expect("shape covers data"),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

struct ConvLayer {
    conv: Conv2d,
    weight: Tensor,
    bias: Tensor,
    in_side: usize,
}

/// Encoder + projection + classifier. One instance belongs to one training
/// loop; share read-only after training.
pub struct EncoderModel {
    config: ModelConfig,
    stem: Vec<ConvLayer>,
    encoder: Vec<Linear>,
    projection: Linear,
    classifier: Linear,
}

impl EncoderModel {
    /// Initialize with uniform ±1/√fan_in weights drawn from the seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<EncoderModel, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut stem = Vec::new();
        let mut mlp_input = config.input_dim;
        if let Some(sc) = &config.conv_stem {
            let mut side = sc.side;
            let mut in_ch = sc.in_channels;
            for &out_ch in &sc.channels {
                let conv = Conv2d {
                    in_channels: in_ch,
                    filters: out_ch,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                };
                let out_side = conv.out_side(side)?;
                let fan_in = in_ch * 9;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w: Vec<f64> = (0..out_ch * fan_in)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let b: Vec<f64> = (0..out_ch).map(|_| rng.random_range(-bound..bound)).collect();
                stem.push(ConvLayer {
                    conv,
                    weight: Tensor::from_vec(w, &[out_ch, fan_in], true)?,
                    bias: Tensor::from_vec(b, &[out_ch], true)?,
                    in_side: side,
                });
                in_ch = out_ch;
                side = out_side;
            }
            mlp_input = in_ch * side * side;
        }

        let mut encoder = Vec::new();
        let mut dim = mlp_input;
        for &h in &config.hidden {
            encoder.push(Linear::init(&mut rng, dim, h));
            dim = h;
        }
        encoder.push(Linear::init(&mut rng, dim, config.feature_dim));

        let projection = Linear::init(&mut rng, config.feature_dim, config.projection_dim);
        let classifier = Linear::init(&mut rng, config.feature_dim, config.classes);
        Ok(EncoderModel {
            config,
            stem,
            encoder,
            projection,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All trainable tensors, in a stable order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.stem {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
        for layer in self.encoder.iter().chain([&self.projection, &self.classifier]) {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }

    /// Parameters reached by `forward_embed`: stem, encoder, projection head.
    pub fn embedding_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.stem {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
        for layer in self.encoder.iter().chain([&self.projection]) {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
        out
    }

    /// Parameters reached by `forward_logits`: stem, encoder, classifier head.
    pub fn logit_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.stem {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
        for layer in self.encoder.iter().chain([&self.classifier]) {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
        out
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(ModelError::Config(format!(
                "input shape {shape:?} does not match input dim {}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Feature-layer activations, `[B, feature_dim]`.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.stem {
            h = layer
                .conv
                .forward(&h, &layer.weight, Some(&layer.bias), layer.in_side)?
                .relu()?;
        }
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Unit-norm projection embeddings, `[B, projection_dim]`.
    pub fn forward_embed(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let features = self.forward_features(x)?;
        Ok(self.projection.forward(&features)?.l2_normalize_rows()?)
    }

    /// Classifier logits, `[B, classes]`.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let features = self.forward_features(x)?;
        Ok(self.classifier.forward(&features)?)
    }

    fn weight_arrays(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        self.params().iter().map(|p| (p.shape(), p.value())).collect()
    }

    fn load_weight_arrays(&self, arrays: &[(Vec<usize>, Vec<f64>)]) -> Result<(), ModelError> {
        let params = self.params();
        if params.len() != arrays.len() {
            return Err(ModelError::Corrupt(format!(
                "{} weight arrays for {} parameters",
                arrays.len(),
                params.len()
            )));
        }
        for (i, (p, (shape, data))) in params.iter().zip(arrays).enumerate() {
            if p.shape() != *shape {
                return Err(ModelError::Corrupt(format!(
                    "parameter {i}: shape {:?} in file, {:?} in model",
                    shape,
                    p.shape()
                )));
            }
            p.set_data(data.clone())?;
        }
        Ok(())
    }
}

/// Seed and config fingerprint carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: [u8; 32],
}

/// Binary layout: magic "RCKP", version u32, seed u64, config hash (32
/// bytes), model config JSON (u32 length + bytes), then each weight array as
/// ndim u32, dims u32 each, values f64, all little-endian.
pub fn save_checkpoint(
    model: &EncoderModel,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    buf.extend_from_slice(&meta.config_hash);
    let config_json = serde_json::to_vec(model.config())
        .map_err(|e| ModelError::Config(format!("config serialization failed: {e}")))?;
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    let arrays = model.weight_arrays();
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (shape, data) in arrays {
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Corrupt(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderModel, CheckpointMeta), ModelError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Corrupt("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version { found: version });
    }
    let seed = r.u64()?;
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(r.take(32)?);
    let json_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| ModelError::Corrupt(format!("config json: {e}")))?;
    let model = EncoderModel::init(config, seed)?;

    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        arrays.push((shape, data));
    }
    if r.pos != buf.len() {
        return Err(ModelError::Corrupt(format!(
            "{} trailing bytes after weights",
            buf.len() - r.pos
        )));
    }
    model.load_weight_arrays(&arrays)?;
    Ok((model, CheckpointMeta { seed, config_hash }))
}

/// SGD with classical momentum: v ← μv + g, p ← p − ηv.
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
    steps: u64,
}

impl SgdMomentum {
    pub fn new(params: &[Tensor], lr: f64, momentum: f64) -> SgdMomentum {
        SgdMomentum {
            lr,
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update from the gradients currently on `params`. The caller
    /// clears gradients afterwards.
    pub fn step(&mut self, params: &[Tensor]) -> Result<(), ModelError> {
        if params.len() != self.velocity.len() {
            return Err(ModelError::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (index, (p, v)) in params.iter().zip(self.velocity.iter_mut()).enumerate() {
            let grad = p.grad().ok_or(ModelError::MissingGrad { index })?;
            let mut data = p.value();
            for ((vi, gi), di) in v.iter_mut().zip(&grad).zip(data.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *di -= self.lr * *vi;
            }
            p.set_data(data)?;
        }
        self.steps += 1;
        Ok(())
    }
}
