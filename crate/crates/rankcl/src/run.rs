//! End-to-end pipelines behind the CLI commands: config resolution with a
//! content hash, the training loop, evaluation, the withheld-class OOD
//! protocol, and projection export. Tests drive these functions directly so
//! the command surface and the tested surface are the same code.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    augment, generate_blobs, load_cifar10_binary, sample_batch, AugmentMode, DataError, DataKind,
    Dataset, SyntheticSpec,
};
use crate::eval::{
    accuracy_breakdown, knn_predict, linear_probe_predict, max_softmax_score, project_2d,
    roc_auroc, tensor_rows, EvalError, ProjectionMethod, PrototypeBank, RocCurve,
};
use crate::loss::{
    ranked_contrastive_loss, ranked_loss_with_reference, softmax_ce_loss, LossError,
};
use crate::model::{
    load_checkpoint, save_checkpoint, CheckpointMeta, ConvStemConfig, EncoderModel, ModelConfig,
    ModelError, SgdMomentum,
};
use crate::ranking::{Rank, RankingError, RankingTable, TemperatureSchedule};
use crate::report::{loss_csv, projection_csv, roc_csv, scores_csv, EvalReport, OodReport, ProbeReport};
use crate::svg::{roc_svg, scatter_svg};
use crate::tensor::{Tensor, TensorError};

const SAMPLER_SALT: u64 = 0xA076_1D64_78BD_642F;
const TEST_SPLIT_SALT: u64 = 0x517C_C1B7_2722_0A95;
const PROBE_SALT: u64 = 0x2545_F491_4F6C_DD1D;

// caps keep probes and projections desk-sized on big splits (hash-picked, so
// deterministic); synthetic runs stay below them and use every sample
const KNN_TRAIN_CAP: usize = 4000;
const KNN_TEST_CAP: usize = 2000;
const PCA_CAP: usize = 2000;
const TSNE_CAP: usize = 600;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training aborted at step {step}: {detail} (batch indices {indices:?})")]
    Step {
        step: usize,
        indices: Vec<usize>,
        detail: String,
    },
}

impl RunError {
    /// CLI exit code class: 1 for validation problems the user can fix in
    /// config or arguments, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Ranking(_) => 1,
            RunError::Data(DataError::Validation(_)) => 1,
            _ => 2,
        }
    }
}

fn config_err(msg: impl Into<String>) -> RunError {
    RunError::Config(msg.into())
}

// ── configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Ranked,
    Supcon,
    Softmax,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Ranked => "ranked",
            LossMode::Supcon => "supcon",
            LossMode::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetVariant {
    Synthetic,
    Cifar10,
}

fn d_classes() -> usize { 5 }
fn d_dims() -> usize { 16 }
fn d_spacing() -> f64 { 4.0 }
fn d_sigma() -> f64 { 1.0 }
fn d_per_class() -> usize { 500 }
fn d_test_per_class() -> usize { 100 }
fn d_tau1() -> f64 { 0.1 }
fn d_growth() -> f64 { 2.0 }
fn d_hidden() -> Vec<usize> { vec![64, 64] }
fn d_feature_dim() -> usize { 32 }
fn d_projection_dim() -> usize { 16 }
fn d_lr() -> f64 { 0.05 }
fn d_momentum() -> f64 { 0.9 }
fn d_steps() -> usize { 2000 }
fn d_batch_size() -> usize { 32 }
fn d_augment_sigma() -> f64 { 0.1 }
fn d_jitter() -> f64 { 0.1 }

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetVariant,
    /// cifar10: directory holding the binary batch files
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_dims")]
    pub dims: usize,
    #[serde(default = "d_spacing")]
    pub spacing: f64,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    #[serde(default = "d_test_per_class")]
    pub test_per_class: usize,
    /// cifar10: keep only the first n train / test samples
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    #[serde(default = "d_tau1")]
    pub tau1: f64,
    #[serde(default = "d_growth")]
    pub growth: f64,
    /// rank depth; defaults to the ranking table's depth
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "d_projection_dim")]
    pub projection_dim: usize,
    /// conv stem channel counts for image data; [8, 16] when omitted
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_channels: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> ModelSection {
        ModelSection {
            hidden: d_hidden(),
            feature_dim: d_feature_dim(),
            projection_dim: d_projection_dim(),
            conv_channels: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> OptimConfig {
        OptimConfig { lr: d_lr(), momentum: d_momentum() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_augment_sigma")]
    pub augment_sigma: f64,
    #[serde(default = "d_jitter")]
    pub jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: d_steps(),
            batch_size: d_batch_size(),
            augment_sigma: d_augment_sigma(),
            jitter: d_jitter(),
        }
    }
}

/// Reference-vector training: the listed classes are stripped of labels and
/// pulled toward a constant unit vector instead of class positives.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default)]
    pub aux_classes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    /// ranking file path; synthetic data carries a built-in ranking
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking: Option<PathBuf>,
    pub loss: LossConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceConfig>,
}

/// Flag-level overrides; flags beat the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// A validated config plus its identity hash and output directory.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub seed: u64,
    pub hash_hex: String,
    pub hash_bytes: [u8; 32],
    pub out_dir: PathBuf,
}

pub fn load_config(path: &Path) -> Result<RunConfig, RunError> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, RunError> {
    toml::from_str(text).map_err(|e| config_err(e.to_string()))
}

impl RunConfig {
    fn validate(&self) -> Result<(), RunError> {
        let d = &self.dataset;
        match d.kind {
            DatasetVariant::Synthetic => {
                if d.classes < 2 {
                    return Err(config_err("dataset.classes: need at least 2"));
                }
                if d.dims == 0 || d.per_class == 0 || d.test_per_class == 0 {
                    return Err(config_err(
                        "dataset.dims/per_class/test_per_class: must be positive",
                    ));
                }
                if !(d.spacing > 0.0) || !(d.sigma > 0.0) {
                    return Err(config_err("dataset.spacing/sigma: must be positive"));
                }
            }
            DatasetVariant::Cifar10 => {
                if d.path.is_none() {
                    return Err(config_err("dataset.path: required for kind = \"cifar10\""));
                }
            }
        }
        if !(self.loss.tau1 > 0.0) {
            return Err(config_err("loss.tau1: must be positive"));
        }
        if self.loss.r == Some(0) {
            return Err(config_err("loss.r: must be at least 1"));
        }
        if self.model.feature_dim == 0 || self.model.projection_dim == 0 {
            return Err(config_err("model.feature_dim/projection_dim: must be positive"));
        }
        if self.train.steps == 0 {
            return Err(config_err("train.steps: must be positive"));
        }
        if self.train.batch_size < 2 {
            return Err(config_err("train.batch_size: need at least 2"));
        }
        if !(self.optim.lr >= 0.0) || !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(config_err("optim.lr/momentum: lr >= 0 and momentum in [0,1)"));
        }
        Ok(())
    }

    /// Apply flag overrides, validate, and stamp the identity hash. The hash
    /// covers everything but `out_dir`, so the same experiment written to two
    /// places keeps one identity.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<ResolvedRun, RunError> {
        if let Some(seed) = overrides.seed {
            self.seed = Some(seed);
        }
        if let Some(out) = &overrides.out {
            self.out_dir = Some(out.clone());
        }
        let seed = self
            .seed
            .ok_or_else(|| config_err("seed: required (set it in the config or pass --seed)"))?;
        self.validate()?;

        let mut hashed = self.clone();
        hashed.out_dir = None;
        let canonical =
            toml::to_string(&hashed).map_err(|e| config_err(format!("unserializable config: {e}")))?;
        let digest = Sha256::digest(canonical.as_bytes());
        let hash_bytes: [u8; 32] = digest.into();
        let hash_hex: String = hash_bytes.iter().map(|b| format!("{b:02x}")).collect();

        let out_dir = self
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}", &hash_hex[..12])));
        Ok(ResolvedRun {
            config: self,
            seed,
            hash_hex,
            hash_bytes,
            out_dir,
        })
    }
}

// ── dataset + ranking assembly ───────────────────────────────────────

struct Splits {
    train: Dataset,
    test: Dataset,
    companion: Option<RankingTable>,
}

fn load_splits(run: &ResolvedRun) -> Result<Splits, RunError> {
    let d = &run.config.dataset;
    match d.kind {
        DatasetVariant::Synthetic => {
            let spec = SyntheticSpec::chain(d.classes, d.dims, d.spacing, d.sigma, d.per_class);
            let (train, companion) = generate_blobs(&spec, run.seed)?;
            let test_spec = SyntheticSpec {
                per_class: d.test_per_class,
                ..spec
            };
            let (test, _) = generate_blobs(&test_spec, run.seed ^ TEST_SPLIT_SALT)?;
            Ok(Splits {
                train,
                test,
                companion: Some(companion),
            })
        }
        DatasetVariant::Cifar10 => {
            let path = d.path.as_ref().expect("validated");
            let (mut train, mut test) = load_cifar10_binary(path)?;
            if let Some(limit) = d.train_limit {
                if limit < train.len() {
                    train = train.head(limit)?;
                }
            }
            if let Some(limit) = d.test_limit {
                if limit < test.len() {
                    test = test.head(limit)?;
                }
            }
            Ok(Splits {
                train,
                test,
                companion: None,
            })
        }
    }
}

/// Everything the train loop and the evaluators consume, after class
/// withholding, ranking surgery, and mode resolution.
struct Prepared {
    train: Dataset,
    test: Dataset,
    table: RankingTable,
    taus: TemperatureSchedule,
    model_config: ModelConfig,
    aux: Option<Dataset>,
    /// (kept row -> original train row, forbidden original train rows)
    audit: Option<(Vec<usize>, BTreeSet<usize>)>,
    ood_test: Option<Dataset>,
    withheld_names: Vec<String>,
    warnings: Vec<String>,
}

fn resolve_names(names: &[String], wanted: &[String]) -> Result<Vec<usize>, RunError> {
    let mut ids = Vec::new();
    for name in wanted {
        let id = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| config_err(format!("unknown class name: {name}")))?;
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    Ok(ids)
}

fn prepare(run: &ResolvedRun, withheld: Option<&[String]>) -> Result<Prepared, RunError> {
    let cfg = &run.config;
    let splits = load_splits(run)?;
    let names = splits.train.names().to_vec();
    let mut warnings = Vec::new();

    // the mode decides how the ranking is used
    let parsed = match &cfg.ranking {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_err(format!("ranking {}: {e}", path.display())))?;
            Some(RankingTable::parse(&text, &names)?)
        }
        None => None,
    };
    let mut table = match cfg.loss.mode {
        LossMode::Ranked => match parsed.or(splits.companion) {
            Some(t) => t,
            None => {
                return Err(config_err(
                    "loss.mode = \"ranked\" needs a ranking file (synthetic data has a built-in one)",
                ))
            }
        },
        LossMode::Supcon => {
            if cfg.ranking.is_some() {
                warnings.push("ranking ignored, r=1 (supcon mode)".to_string());
            }
            RankingTable::flat(&names)
        }
        LossMode::Softmax => {
            if cfg.ranking.is_some() {
                warnings.push("ranking ignored (softmax mode)".to_string());
            }
            RankingTable::flat(&names)
        }
    };

    // classes leaving the known set: withheld (OOD protocol) or reference aux
    let removal_names: Vec<String> = match withheld {
        Some(list) => {
            if list.is_empty() {
                return Err(config_err("withheld class set is empty"));
            }
            list.to_vec()
        }
        None => cfg
            .reference
            .as_ref()
            .map(|r| r.aux_classes.clone())
            .unwrap_or_default(),
    };
    let removal_ids = resolve_names(&names, &removal_names)?;
    if removal_ids.len() >= names.len() {
        return Err(config_err("cannot withhold every class"));
    }
    let reference_requested = cfg.reference.is_some();
    if withheld.is_some() && reference_requested && !cfg.reference.as_ref().unwrap().aux_classes.is_empty() {
        warnings.push(
            "reference.aux_classes ignored: the withheld classes serve as auxiliary samples"
                .to_string(),
        );
    }

    let (train, test, table, aux, audit, ood_test) = if removal_ids.is_empty() {
        if reference_requested {
            warnings.push("no auxiliary samples; reference mode disabled".to_string());
        }
        (splits.train, splits.test, table, None, None, None)
    } else {
        let (kept_table, remap) = table.without_classes(&removal_ids)?;
        let kept_names = kept_table.names().to_vec();
        let (known_train, kept_original) = splits.train.without_classes(&remap, kept_names.clone())?;
        let (known_test, _) = splits.test.without_classes(&remap, kept_names)?;
        let forbidden: BTreeSet<usize> = removal_ids
            .iter()
            .flat_map(|&c| splits.train.indices_of_class(c).iter().copied())
            .collect();
        let aux = if reference_requested {
            let (aux_ds, _) = splits.train.only_classes(&removal_ids)?;
            if aux_ds.is_empty() {
                warnings.push("no auxiliary samples; reference mode disabled".to_string());
                None
            } else {
                Some(aux_ds)
            }
        } else {
            None
        };
        let ood_test = if withheld.is_some() {
            Some(splits.test.only_classes(&removal_ids)?.0)
        } else {
            None
        };
        table = kept_table;
        (known_train, known_test, table, aux, Some((kept_original, forbidden)), ood_test)
    };

    // rank depth and temperature schedule
    let (table, r) = match cfg.loss.mode {
        LossMode::Ranked => {
            let depth = table.max_depth();
            let r = cfg.loss.r.unwrap_or(depth);
            if r > depth {
                return Err(config_err(format!(
                    "loss.r = {r} exceeds the ranking depth {depth}"
                )));
            }
            (table.truncated(r), r)
        }
        LossMode::Supcon | LossMode::Softmax => {
            if let Some(r) = cfg.loss.r {
                if r != 1 {
                    warnings.push(format!("loss.r = {r} ignored, r=1 ({} mode)", cfg.loss.mode.as_str()));
                }
            }
            (table, 1)
        }
    };
    let taus = TemperatureSchedule::geometric(r, cfg.loss.tau1, cfg.loss.growth)?;

    let conv_stem = match (train.kind(), &cfg.model.conv_channels) {
        (DataKind::Vector, None) => None,
        (DataKind::Vector, Some(_)) => {
            return Err(config_err(
                "model.conv_channels: conv stems need image data",
            ))
        }
        (DataKind::Image { side, channels }, stem) => Some(ConvStemConfig {
            side,
            in_channels: channels,
            channels: stem.clone().unwrap_or_else(|| vec![8, 16]),
        }),
    };
    let model_config = ModelConfig {
        input_dim: train.dim(),
        hidden: cfg.model.hidden.clone(),
        feature_dim: cfg.model.feature_dim,
        projection_dim: cfg.model.projection_dim,
        classes: train.class_count(),
        conv_stem,
    };

    Ok(Prepared {
        train,
        test,
        table,
        taus,
        model_config,
        aux,
        audit,
        ood_test,
        withheld_names: removal_names,
        warnings,
    })
}

// ── embedding extraction ─────────────────────────────────────────────

fn unit_reference(d: usize) -> Vec<f64> {
    vec![1.0 / (d as f64).sqrt(); d]
}

/// Rows the evaluators score: the normalized projection output for the
/// contrastive modes, the encoder features for the softmax baseline (its
/// projection head is never trained).
fn embed_rows(model: &EncoderModel, ds: &Dataset, mode: LossMode) -> Result<Vec<Vec<f64>>, RunError> {
    let mut out = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(256) {
        let x = ds.rows_tensor(chunk)?;
        let emb = match mode {
            LossMode::Softmax => model.forward_features(&x)?,
            _ => model.forward_embed(&x)?,
        };
        out.extend(tensor_rows(&emb));
    }
    Ok(out)
}

fn mean_cosine_to(rows: &[Vec<f64>], target: &[f64]) -> f64 {
    let tn = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut total = 0.0;
    for row in rows {
        let dot: f64 = row.iter().zip(target).map(|(a, b)| a * b).sum();
        let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += dot / (rn * tn).max(1e-24);
    }
    total / rows.len().max(1) as f64
}

// ── the training loop ────────────────────────────────────────────────

/// The subset of model parameters the chosen loss actually reaches.
/// Softmax trains the classifier path; the contrastive losses train the
/// projection path and leave the classifier untouched.
fn trainable_params(model: &EncoderModel, mode: LossMode) -> Vec<Tensor> {
    match mode {
        LossMode::Softmax => model.logit_params(),
        LossMode::Ranked | LossMode::Supcon => model.embedding_params(),
    }
}

struct TrainStats {
    rows: Vec<(usize, f64, Vec<f64>)>,
    initial_smoothed: f64,
    final_smoothed: f64,
    skipped_levels: usize,
    train_batches: usize,
    audit_violations: usize,
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    model: &EncoderModel,
    opt: &mut SgdMomentum,
    prepared: &Prepared,
    mode: LossMode,
    steps: usize,
    batch_size: usize,
    augment_mode: &AugmentMode,
    reference: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainStats, RunError> {
    let params = trainable_params(model, mode);
    let mut rows = Vec::with_capacity(steps);
    let mut skipped_levels = 0usize;
    let mut audit_violations = 0usize;

    for step in 0..steps {
        let batch = sample_batch(&prepared.train, &prepared.table, batch_size, augment_mode, rng)?;
        if let Some((kept_to_original, forbidden)) = &prepared.audit {
            for &i in &batch.indices {
                if forbidden.contains(&kept_to_original[i]) {
                    audit_violations += 1;
                }
            }
        }
        let expanded = batch.expanded_labels();

        // auxiliary unknown-class rows ride along when reference mode is on
        let (input, labels_opt) = match (&prepared.aux, reference) {
            (Some(aux), Some(_)) => {
                let aux_count = (batch_size / 4).max(1);
                let mut aux_rows: Vec<Vec<f64>> = Vec::with_capacity(2 * aux_count);
                for _ in 0..aux_count {
                    let i = rng.random_range(0..aux.len());
                    let original = aux.feature(i);
                    let view = augment(original, augment_mode, rng);
                    aux_rows.push(original.iter().map(|&v| v as f64).collect());
                    aux_rows.push(view.iter().map(|&v| v as f64).collect());
                }
                let aux_tensor = Tensor::from_rows(&aux_rows, false)?;
                let combined = Tensor::concat_rows(&[batch.views.clone(), aux_tensor])?;
                let mut labels: Vec<Option<usize>> =
                    expanded.iter().map(|&l| Some(l)).collect();
                labels.extend(std::iter::repeat(None).take(2 * aux_count));
                (combined, Some(labels))
            }
            _ => (batch.views.clone(), None),
        };

        let outcome = (|| -> Result<(f64, Vec<f64>, usize), String> {
            model.zero_grads();
            let err = |e: &dyn std::fmt::Display| e.to_string();
            match mode {
                LossMode::Softmax => {
                    let logits = model.forward_logits(&input).map_err(|e| err(&e))?;
                    let loss = softmax_ce_loss(&logits, &expanded).map_err(|e| err(&e))?;
                    let value = loss.item();
                    if !value.is_finite() {
                        return Err(format!("non-finite loss {value}"));
                    }
                    loss.backward().map_err(|e| err(&e))?;
                    Ok((value, vec![value], 0))
                }
                LossMode::Ranked | LossMode::Supcon => {
                    let emb = model.forward_embed(&input).map_err(|e| err(&e))?;
                    let breakdown = match (&labels_opt, reference) {
                        (Some(labels), Some(f)) => {
                            ranked_loss_with_reference(&emb, labels, &prepared.table, &prepared.taus, f)
                        }
                        _ => ranked_contrastive_loss(&emb, &expanded, &prepared.table, &prepared.taus),
                    }
                    .map_err(|e| err(&e))?;
                    let value = breakdown.total.item();
                    if !value.is_finite() {
                        return Err(format!("non-finite loss {value}"));
                    }
                    breakdown.total.backward().map_err(|e| err(&e))?;
                    Ok((value, breakdown.per_level.clone(), breakdown.skipped_levels))
                }
            }
        })();

        let (value, per_level, skipped) = match outcome {
            Ok(v) => v,
            Err(detail) => {
                return Err(RunError::Step {
                    step,
                    indices: batch.indices.clone(),
                    detail,
                })
            }
        };
        opt.step(&params).map_err(|e| RunError::Step {
            step,
            indices: batch.indices.clone(),
            detail: e.to_string(),
        })?;
        skipped_levels += skipped;
        rows.push((step, value, per_level));
    }

    let window = rows.len().min(50).max(1);
    let mean_of = |slice: &[(usize, f64, Vec<f64>)]| {
        slice.iter().map(|(_, v, _)| v).sum::<f64>() / slice.len() as f64
    };
    Ok(TrainStats {
        initial_smoothed: mean_of(&rows[..window]),
        final_smoothed: mean_of(&rows[rows.len() - window..]),
        skipped_levels,
        train_batches: steps,
        audit_violations,
        rows,
    })
}

// ── probes shared by train-time validation and cmd_eval ─────────────

fn knn_probe(
    model: &EncoderModel,
    mode: LossMode,
    train: &Dataset,
    test: &Dataset,
) -> Result<ProbeReport, RunError> {
    let (train_sub, _) = train.subsample(KNN_TRAIN_CAP)?;
    let (test_sub, _) = test.subsample(KNN_TEST_CAP)?;
    let train_rows = embed_rows(model, &train_sub, mode)?;
    let test_rows = embed_rows(model, &test_sub, mode)?;
    let k = 5.min(train_rows.len());
    let mut preds = Vec::with_capacity(test_rows.len());
    for row in &test_rows {
        preds.push(knn_predict(&train_rows, train_sub.labels(), row, k)?);
    }
    let (accuracy, per_class) = accuracy_breakdown(&preds, test_sub.labels(), test.class_count());
    Ok(ProbeReport { accuracy, per_class })
}

fn linear_probe_report(
    model: &EncoderModel,
    mode: LossMode,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<ProbeReport, RunError> {
    let (train_sub, _) = train.subsample(KNN_TRAIN_CAP)?;
    let (test_sub, _) = test.subsample(KNN_TEST_CAP)?;
    let train_rows = embed_rows(model, &train_sub, mode)?;
    let test_rows = embed_rows(model, &test_sub, mode)?;
    let preds = linear_probe_predict(
        &train_rows,
        train_sub.labels(),
        &test_rows,
        train.class_count(),
        150,
        0.1,
        seed ^ PROBE_SALT,
    )?;
    let (accuracy, per_class) = accuracy_breakdown(&preds, test_sub.labels(), test.class_count());
    Ok(ProbeReport { accuracy, per_class })
}

/// Fraction of anchors whose mean similarity strictly decreases across their
/// present rank groups: same class first, then each ranked set, then the
/// negatives. Anchors without a same-class partner or a negative are skipped.
pub fn ordering_fraction(
    rows: &[Vec<f64>],
    labels: &[usize],
    table: &RankingTable,
) -> Result<f64, RunError> {
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(config_err("ordering check: empty or mismatched embeddings"));
    }
    let units: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-24);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut counted = 0usize;
    let mut satisfied = 0usize;
    for (i, &c) in labels.iter().enumerate() {
        let depth = table.depth(c);
        // group sums: [level 1 .. level depth, negatives]
        let mut sums = vec![0.0f64; depth + 1];
        let mut counts = vec![0usize; depth + 1];
        for (j, &other) in labels.iter().enumerate() {
            if j == i {
                continue;
            }
            let slot = match table.rank_of(c, other)? {
                Rank::Level(l) => l - 1,
                Rank::Negative => depth,
            };
            sums[slot] += units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>();
            counts[slot] += 1;
        }
        // a table that ranks every other class leaves no negatives; any two
        // present groups still give an ordering to check
        if counts.iter().filter(|&&c| c > 0).count() < 2 {
            continue;
        }
        counted += 1;
        let means: Vec<f64> = (0..=depth)
            .filter(|&s| counts[s] > 0)
            .map(|s| sums[s] / counts[s] as f64)
            .collect();
        if means.windows(2).all(|w| w[0] > w[1]) {
            satisfied += 1;
        }
    }
    if counted == 0 {
        return Err(config_err("ordering check: no usable anchors"));
    }
    Ok(satisfied as f64 / counted as f64)
}

// ── cmd_train ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub aux_mean_similarity: f64,
    pub known_mean_similarity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub initial_smoothed_loss: f64,
    pub final_smoothed_loss: f64,
    pub val_knn_accuracy: f64,
    pub skipped_levels: usize,
    pub reference: Option<ReferenceSummary>,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub out_dir: PathBuf,
}

pub fn run_train(run: &ResolvedRun) -> Result<TrainOutcome, RunError> {
    fs::create_dir_all(&run.out_dir)?;
    let prepared = prepare(run, None)?;
    let cfg = &run.config;

    let reference_vec = prepared
        .aux
        .as_ref()
        .map(|_| unit_reference(cfg.model.projection_dim));
    let model = EncoderModel::init(prepared.model_config.clone(), run.seed)?;
    let mut opt = SgdMomentum::new(
        &trainable_params(&model, cfg.loss.mode),
        cfg.optim.lr,
        cfg.optim.momentum,
    );
    let augment_mode =
        AugmentMode::for_dataset(&prepared.train, cfg.train.augment_sigma, cfg.train.jitter);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ SAMPLER_SALT);

    let stats = match train_loop(
        &model,
        &mut opt,
        &prepared,
        cfg.loss.mode,
        cfg.train.steps,
        cfg.train.batch_size,
        &augment_mode,
        reference_vec.as_deref(),
        &mut rng,
    ) {
        Ok(stats) => stats,
        Err(RunError::Step { step, indices, detail }) => {
            let dump = format!(
                "step {step}\nbatch indices: {}\nerror: {detail}\n",
                indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
            );
            fs::write(run.out_dir.join("nan_dump.txt"), dump)?;
            return Err(RunError::Step { step, indices, detail });
        }
        Err(e) => return Err(e),
    };

    let levels = match cfg.loss.mode {
        LossMode::Softmax => 1,
        _ => prepared.taus.len(),
    };
    let csv = loss_csv(&run.hash_hex, run.seed, levels, &stats.rows);
    let loss_path = run.out_dir.join("loss.csv");
    fs::write(&loss_path, csv)?;

    let meta = CheckpointMeta {
        seed: run.seed,
        config_hash: run.hash_bytes,
    };
    let checkpoint_path = run.out_dir.join("checkpoint.bin");
    save_checkpoint(&model, &meta, &checkpoint_path)?;

    let resolved_toml = toml::to_string(&cfg.clone())
        .map_err(|e| config_err(format!("unserializable config: {e}")))?;
    fs::write(run.out_dir.join("config_resolved.toml"), resolved_toml)?;

    let val = knn_probe(&model, cfg.loss.mode, &prepared.train, &prepared.test)?;

    let reference = match (&prepared.aux, &reference_vec) {
        (Some(aux), Some(f)) => {
            let aux_rows = embed_rows(&model, aux, cfg.loss.mode)?;
            let known_rows = embed_rows(&model, &prepared.test, cfg.loss.mode)?;
            Some(ReferenceSummary {
                aux_mean_similarity: mean_cosine_to(&aux_rows, f),
                known_mean_similarity: mean_cosine_to(&known_rows, f),
            })
        }
        _ => None,
    };

    let summary = TrainSummary {
        config_hash: run.hash_hex.clone(),
        seed: run.seed,
        steps: cfg.train.steps,
        initial_smoothed_loss: stats.initial_smoothed,
        final_smoothed_loss: stats.final_smoothed,
        val_knn_accuracy: val.accuracy,
        skipped_levels: stats.skipped_levels,
        reference,
        warnings: prepared.warnings.clone(),
    };
    let mut summary_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| config_err(format!("summary: {e}")))?;
    summary_json.push('\n');
    fs::write(run.out_dir.join("train_summary.json"), summary_json)?;

    Ok(TrainOutcome {
        summary,
        checkpoint: checkpoint_path,
        loss_csv: loss_path,
        out_dir: run.out_dir.clone(),
    })
}

pub fn load_train_summary(path: &Path) -> Result<TrainSummary, RunError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

// ── cmd_eval ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Knn,
    Linear,
}

impl Probe {
    pub fn as_str(self) -> &'static str {
        match self {
            Probe::Knn => "knn",
            Probe::Linear => "linear",
        }
    }
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub report_path: PathBuf,
    pub warnings: Vec<String>,
}

fn load_run_checkpoint(run: &ResolvedRun, expected: &ModelConfig) -> Result<EncoderModel, RunError> {
    let path = run.out_dir.join("checkpoint.bin");
    if !path.exists() {
        return Err(RunError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: no checkpoint (run train first)", path.display()),
        )));
    }
    let (model, _meta) = load_checkpoint(&path)?;
    let got = model.config();
    if got.input_dim != expected.input_dim || got.classes != expected.classes {
        return Err(config_err(format!(
            "architecture mismatch: checkpoint is {}d input / {} classes, dataset needs {}d / {}",
            got.input_dim, got.classes, expected.input_dim, expected.classes
        )));
    }
    Ok(model)
}

pub fn run_eval(run: &ResolvedRun, probe: Probe) -> Result<EvalOutcome, RunError> {
    fs::create_dir_all(&run.out_dir)?;
    let prepared = prepare(run, None)?;
    let model = load_run_checkpoint(run, &prepared.model_config)?;
    let mode = run.config.loss.mode;

    let (knn, linear) = match probe {
        Probe::Knn => (
            Some(knn_probe(&model, mode, &prepared.train, &prepared.test)?),
            None,
        ),
        Probe::Linear => (
            None,
            Some(linear_probe_report(&model, mode, &prepared.train, &prepared.test, run.seed)?),
        ),
    };

    let ordering = match mode {
        LossMode::Softmax => None,
        _ => {
            let (test_sub, _) = prepared.test.subsample(KNN_TEST_CAP)?;
            let rows = embed_rows(&model, &test_sub, mode)?;
            Some(ordering_fraction(&rows, test_sub.labels(), &prepared.table)?)
        }
    };

    let report = EvalReport {
        config_hash: run.hash_hex.clone(),
        seed: run.seed,
        method: mode.as_str().to_string(),
        probe: Some(probe.as_str().to_string()),
        knn,
        linear,
        ordering_fraction: ordering,
        ood: None,
    };
    let report_path = run.out_dir.join("eval_report.json");
    report.save(&report_path)?;
    Ok(EvalOutcome {
        report,
        report_path,
        warnings: prepared.warnings,
    })
}

// ── cmd_ood ──────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct OodOutcome {
    pub report: EvalReport,
    pub curve: RocCurve,
    pub train_batches: usize,
    pub audit_violations: usize,
    pub out_dir: PathBuf,
    pub warnings: Vec<String>,
}

pub fn run_ood(run: &ResolvedRun, withheld: &[String]) -> Result<OodOutcome, RunError> {
    fs::create_dir_all(&run.out_dir)?;
    let prepared = prepare(run, Some(withheld))?;
    let cfg = &run.config;
    let mode = cfg.loss.mode;

    let reference_vec = prepared
        .aux
        .as_ref()
        .map(|_| unit_reference(cfg.model.projection_dim));
    let model = EncoderModel::init(prepared.model_config.clone(), run.seed)?;
    let mut opt = SgdMomentum::new(&trainable_params(&model, mode), cfg.optim.lr, cfg.optim.momentum);
    let augment_mode =
        AugmentMode::for_dataset(&prepared.train, cfg.train.augment_sigma, cfg.train.jitter);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ SAMPLER_SALT);

    let stats = train_loop(
        &model,
        &mut opt,
        &prepared,
        mode,
        cfg.train.steps,
        cfg.train.batch_size,
        &augment_mode,
        reference_vec.as_deref(),
        &mut rng,
    )?;

    let levels = match mode {
        LossMode::Softmax => 1,
        _ => prepared.taus.len(),
    };
    fs::write(
        run.out_dir.join("ood_loss.csv"),
        loss_csv(&run.hash_hex, run.seed, levels, &stats.rows),
    )?;
    let meta = CheckpointMeta {
        seed: run.seed,
        config_hash: run.hash_bytes,
    };
    save_checkpoint(&model, &meta, &run.out_dir.join("ood_checkpoint.bin"))?;

    let ood_test = prepared.ood_test.as_ref().expect("ood run withholds classes");
    let (known_sub, _) = prepared.test.subsample(KNN_TEST_CAP)?;
    let (ood_sub, _) = ood_test.subsample(KNN_TEST_CAP)?;

    let (in_scores, out_scores, score_name) = match (&reference_vec, mode) {
        (Some(f), _) => {
            // aux rows train toward f, so distance from f marks in-distribution
            let score = |rows: &[Vec<f64>]| -> Vec<f64> {
                rows.iter()
                    .map(|r| {
                        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-24);
                        let fn_ = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                        -(r.iter().zip(f).map(|(a, b)| a * b).sum::<f64>()) / (rn * fn_)
                    })
                    .collect()
            };
            let known_rows = embed_rows(&model, &known_sub, mode)?;
            let ood_rows = embed_rows(&model, &ood_sub, mode)?;
            (score(&known_rows), score(&ood_rows), "reference_similarity")
        }
        (None, LossMode::Softmax) => {
            let score = |ds: &Dataset| -> Result<Vec<f64>, RunError> {
                let mut out = Vec::with_capacity(ds.len());
                let indices: Vec<usize> = (0..ds.len()).collect();
                for chunk in indices.chunks(256) {
                    let logits = model.forward_logits(&ds.rows_tensor(chunk)?)?;
                    out.extend(tensor_rows(&logits).iter().map(|r| max_softmax_score(r)));
                }
                Ok(out)
            };
            (score(&known_sub)?, score(&ood_sub)?, "max_softmax")
        }
        (None, _) => {
            let train_rows = embed_rows(&model, &prepared.train, mode)?;
            let bank = PrototypeBank::from_embeddings(
                &train_rows,
                prepared.train.labels(),
                prepared.train.class_count(),
            )?;
            let known_rows = embed_rows(&model, &known_sub, mode)?;
            let ood_rows = embed_rows(&model, &ood_sub, mode)?;
            let score = |rows: &[Vec<f64>]| -> Result<Vec<f64>, RunError> {
                rows.iter().map(|r| Ok(bank.score(r)?)).collect()
            };
            (score(&known_rows)?, score(&ood_rows)?, "prototype_cosine")
        }
    };

    let curve = roc_auroc(&in_scores, &out_scores)?;
    fs::write(run.out_dir.join("roc.csv"), roc_csv(&run.hash_hex, run.seed, &curve))?;
    fs::write(run.out_dir.join("roc.svg"), roc_svg(&curve))?;
    let score_rows: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(out_scores.iter().map(|&s| (s, false)))
        .collect();
    fs::write(
        run.out_dir.join("scores.csv"),
        scores_csv(&run.hash_hex, run.seed, &score_rows),
    )?;

    let knn = knn_probe(&model, mode, &prepared.train, &prepared.test)?;
    let report = EvalReport {
        config_hash: run.hash_hex.clone(),
        seed: run.seed,
        method: mode.as_str().to_string(),
        probe: Some(Probe::Knn.as_str().to_string()),
        knn: Some(knn),
        linear: None,
        ordering_fraction: None,
        ood: Some(OodReport {
            auroc: curve.auroc,
            in_count: in_scores.len(),
            out_count: out_scores.len(),
            withheld: prepared.withheld_names.clone(),
            score: score_name.to_string(),
        }),
    };
    report.save(&run.out_dir.join("ood_report.json"))?;

    Ok(OodOutcome {
        report,
        curve,
        train_batches: stats.train_batches,
        audit_violations: stats.audit_violations,
        out_dir: run.out_dir.clone(),
        warnings: prepared.warnings,
    })
}

// ── cmd_project ──────────────────────────────────────────────────────

#[derive(Debug)]
pub struct ProjectOutcome {
    pub csv_path: PathBuf,
    pub svg_path: PathBuf,
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn parse_projection_method(name: &str) -> Result<&'static str, RunError> {
    match name {
        "pca" => Ok("pca"),
        "tsne" => Ok("tsne"),
        other => Err(config_err(format!("unknown projection method: {other}"))),
    }
}

pub fn run_project(run: &ResolvedRun, method_name: &str) -> Result<ProjectOutcome, RunError> {
    fs::create_dir_all(&run.out_dir)?;
    let method_name = parse_projection_method(method_name)?;
    let prepared = prepare(run, None)?;
    let model = load_run_checkpoint(run, &prepared.model_config)?;
    let mode = run.config.loss.mode;

    let cap = if method_name == "tsne" { TSNE_CAP } else { PCA_CAP };
    let (subset, _) = prepared.test.subsample(cap)?;
    let rows = embed_rows(&model, &subset, mode)?;
    let method = match method_name {
        "pca" => ProjectionMethod::Pca,
        _ => {
            let n = rows.len() as f64;
            ProjectionMethod::Tsne {
                perplexity: 30.0_f64.min((n - 1.0) / 3.0).max(2.0),
                iterations: 500,
            }
        }
    };
    let points = project_2d(&rows, method, run.seed)?;

    let csv_path = run.out_dir.join(format!("projection_{method_name}.csv"));
    fs::write(&csv_path, projection_csv(&run.hash_hex, run.seed, &points, subset.labels()))?;
    let svg_path = run.out_dir.join(format!("projection_{method_name}.svg"));
    let title = format!("{method_name} projection ({})", mode.as_str());
    fs::write(
        &svg_path,
        scatter_svg(&points, subset.labels(), subset.names(), &title),
    )?;

    Ok(ProjectOutcome {
        csv_path,
        svg_path,
        points,
        labels: subset.labels().to_vec(),
        warnings: prepared.warnings,
    })
}
