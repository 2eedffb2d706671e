//! Python bindings. Ranking tables, temperature schedules, the contrastive
//! losses with gradients, the evaluation helpers, and the four file-driven
//! pipelines, all over plain lists and dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rankcl::run::{self, Overrides, Probe, ResolvedRun, RunError};
use rankcl::{eval, loss, ranking, Tensor};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: RunError) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Per-class similarity rankings over a fixed set of named classes.
#[pyclass(frozen)]
struct RankingTable {
    inner: ranking::RankingTable,
}

#[pymethods]
impl RankingTable {
    /// A flat table: every non-anchor class is a plain negative (r=1).
    #[new]
    fn new(names: Vec<String>) -> PyResult<Self> {
        let empty = vec![Vec::new(); names.len()];
        let inner = ranking::RankingTable::from_ids(&names, empty).map_err(value_err)?;
        Ok(RankingTable { inner })
    }

    /// Parse the `anchor: [a, {b, c}, d]` grammar against the given names.
    #[staticmethod]
    fn parse(text: &str, names: Vec<String>) -> PyResult<Self> {
        let inner = ranking::RankingTable::parse(text, &names).map_err(value_err)?;
        Ok(RankingTable { inner })
    }

    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().to_vec()
    }

    fn class_id(&self, name: &str) -> Option<usize> {
        self.inner.class_id(name)
    }

    /// Listed rank sets for one anchor class; index k holds rank k+2.
    fn rank_sets(&self, class: usize) -> PyResult<Vec<Vec<usize>>> {
        self.check(class)?;
        Ok(self.inner.rank_sets(class).to_vec())
    }

    /// Number of levels the anchor class sees (own class plus listed sets).
    fn depth(&self, class: usize) -> PyResult<usize> {
        self.check(class)?;
        Ok(self.inner.depth(class))
    }

    fn max_depth(&self) -> usize {
        self.inner.max_depth()
    }

    /// The level `other` holds for anchors of class `anchor`, or None if it
    /// is a plain negative. Level 1 is the anchor's own class.
    fn rank_of(&self, anchor: usize, other: usize) -> PyResult<Option<usize>> {
        match self.inner.rank_of(anchor, other).map_err(value_err)? {
            ranking::Rank::Level(l) => Ok(Some(l)),
            ranking::Rank::Negative => Ok(None),
        }
    }

    /// The table back in its source grammar.
    fn serialize(&self) -> String {
        self.inner.serialize()
    }

    fn __repr__(&self) -> String {
        format!(
            "RankingTable({} classes, max depth {})",
            self.inner.class_count(),
            self.inner.max_depth()
        )
    }
}

impl RankingTable {
    fn check(&self, class: usize) -> PyResult<()> {
        if class >= self.inner.class_count() {
            return Err(PyIndexError::new_err(format!(
                "class {class} out of range (have {})",
                self.inner.class_count()
            )));
        }
        Ok(())
    }
}

/// Per-level temperatures, strictly increasing.
#[pyclass(frozen)]
struct TemperatureSchedule {
    inner: ranking::TemperatureSchedule,
}

#[pymethods]
impl TemperatureSchedule {
    #[new]
    fn new(taus: Vec<f64>) -> PyResult<Self> {
        let inner = ranking::TemperatureSchedule::new(taus).map_err(value_err)?;
        Ok(TemperatureSchedule { inner })
    }

    /// r temperatures with tau_i = tau1 * growth^(i-1), growth > 1.
    #[staticmethod]
    fn geometric(r: usize, tau1: f64, growth: f64) -> PyResult<Self> {
        let inner = ranking::TemperatureSchedule::geometric(r, tau1, growth).map_err(value_err)?;
        Ok(TemperatureSchedule { inner })
    }

    fn taus(&self) -> Vec<f64> {
        self.inner.taus().to_vec()
    }

    /// The temperature at a 1-based level.
    fn tau(&self, level: usize) -> PyResult<f64> {
        if level == 0 || level > self.inner.len() {
            return Err(PyIndexError::new_err(format!(
                "level {level} outside 1..={}",
                self.inner.len()
            )));
        }
        Ok(self.inner.tau(level))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("TemperatureSchedule({:?})", self.inner.taus())
    }
}

/// One batch loss, decomposed. `grad` is present when it was requested.
#[pyclass(frozen)]
struct LossResult {
    #[pyo3(get)]
    total: f64,
    #[pyo3(get)]
    per_level: Vec<f64>,
    #[pyo3(get)]
    per_anchor: Vec<f64>,
    #[pyo3(get)]
    skipped_levels: usize,
    #[pyo3(get)]
    excluded_anchors: Vec<usize>,
    #[pyo3(get)]
    grad: Option<Vec<Vec<f64>>>,
}

#[pymethods]
impl LossResult {
    fn __repr__(&self) -> String {
        format!(
            "LossResult(total={:.6}, per_level={:?}, skipped_levels={})",
            self.total, self.per_level, self.skipped_levels
        )
    }
}

fn rows_tensor(rows: &[Vec<f64>], requires_grad: bool) -> PyResult<Tensor> {
    Tensor::from_rows(rows, requires_grad).map_err(value_err)
}

fn grad_rows(t: &Tensor, dim: usize) -> PyResult<Vec<Vec<f64>>> {
    let flat = t
        .grad()
        .ok_or_else(|| PyRuntimeError::new_err("backward left no gradient"))?;
    Ok(flat.chunks(dim).map(|c| c.to_vec()).collect())
}

fn finish_loss(
    breakdown: loss::LossBreakdown,
    embeddings: &Tensor,
    dim: usize,
    want_grad: bool,
) -> PyResult<LossResult> {
    let grad = if want_grad {
        breakdown.total.backward().map_err(value_err)?;
        Some(grad_rows(embeddings, dim)?)
    } else {
        None
    };
    Ok(LossResult {
        total: breakdown.total.item(),
        per_level: breakdown.per_level,
        per_anchor: breakdown.per_anchor,
        skipped_levels: breakdown.skipped_levels,
        excluded_anchors: breakdown.excluded_anchors,
        grad,
    })
}

/// The ranked loss over one batch. Rows are raw embeddings (normalized
/// internally); the schedule must cover the table's deepest rank.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, table, schedule, grad = false))]
fn ranked_loss(
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    table: &RankingTable,
    schedule: &TemperatureSchedule,
    grad: bool,
) -> PyResult<LossResult> {
    let dim = embeddings.first().map(|r| r.len()).unwrap_or(0);
    let t = rows_tensor(&embeddings, grad)?;
    let b = loss::ranked_contrastive_loss(&t, &labels, &table.inner, &schedule.inner)
        .map_err(value_err)?;
    finish_loss(b, &t, dim, grad)
}

/// The r=1 specialization: same class positive, everything else negative.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, tau = 0.1, grad = false))]
fn supcon_loss(
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    tau: f64,
    grad: bool,
) -> PyResult<LossResult> {
    let dim = embeddings.first().map(|r| r.len()).unwrap_or(0);
    let t = rows_tensor(&embeddings, grad)?;
    let b = loss::supcon_loss(&t, &labels, tau).map_err(value_err)?;
    finish_loss(b, &t, dim, grad)
}

/// Mean cross entropy of row-softmaxed logits against integer labels.
/// Returns `(value, grad_or_none)`.
#[pyfunction]
#[pyo3(signature = (logits, labels, grad = false))]
fn softmax_loss(
    logits: Vec<Vec<f64>>,
    labels: Vec<usize>,
    grad: bool,
) -> PyResult<(f64, Option<Vec<Vec<f64>>>)> {
    let dim = logits.first().map(|r| r.len()).unwrap_or(0);
    let t = rows_tensor(&logits, grad)?;
    let ce = loss::softmax_ce_loss(&t, &labels).map_err(value_err)?;
    let g = if grad {
        ce.backward().map_err(value_err)?;
        Some(grad_rows(&t, dim)?)
    } else {
        None
    };
    Ok((ce.item(), g))
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    loss::cosine_similarity(&a, &b).map_err(value_err)
}

/// Fraction of test rows whose k-nearest-cosine vote matches their label.
#[pyfunction]
#[pyo3(signature = (train, train_labels, test, test_labels, k = 5))]
fn knn_accuracy(
    train: Vec<Vec<f64>>,
    train_labels: Vec<usize>,
    test: Vec<Vec<f64>>,
    test_labels: Vec<usize>,
    k: usize,
) -> PyResult<f64> {
    eval::knn_accuracy(&train, &train_labels, &test, &test_labels, k).map_err(value_err)
}

/// ROC of in-distribution scores against out scores. Returns
/// `(auroc, curve_points)` with the curve as (fpr, tpr) pairs.
#[pyfunction]
fn auroc(in_scores: Vec<f64>, out_scores: Vec<f64>) -> PyResult<(f64, Vec<(f64, f64)>)> {
    let curve = eval::roc_auroc(&in_scores, &out_scores).map_err(value_err)?;
    Ok((curve.auroc, curve.points))
}

/// 2D projection of embedding rows: "pca" (deterministic) or "tsne" (seeded).
#[pyfunction]
#[pyo3(signature = (embeddings, method = "pca", seed = 0, perplexity = 20.0, iterations = 500))]
fn project_2d(
    embeddings: Vec<Vec<f64>>,
    method: &str,
    seed: u64,
    perplexity: f64,
    iterations: usize,
) -> PyResult<Vec<(f64, f64)>> {
    let m = match method {
        "pca" => eval::ProjectionMethod::Pca,
        "tsne" => eval::ProjectionMethod::Tsne {
            perplexity,
            iterations,
        },
        other => {
            return Err(PyValueError::new_err(format!(
                "method: expected pca or tsne, got {other:?}"
            )))
        }
    };
    let points = eval::project_2d(&embeddings, m, seed).map_err(value_err)?;
    Ok(points.into_iter().map(|[x, y]| (x, y)).collect())
}

fn resolve(config: &str, seed: Option<u64>, out: Option<PathBuf>) -> PyResult<ResolvedRun> {
    let cfg = run::load_config(config.as_ref()).map_err(run_err)?;
    cfg.resolve(&Overrides { seed, out }).map_err(run_err)
}

fn set_common(d: &Bound<'_, PyDict>, resolved: &ResolvedRun, warnings: &[String]) -> PyResult<()> {
    d.set_item("config_hash", &resolved.hash_hex)?;
    d.set_item("seed", resolved.seed)?;
    d.set_item("out_dir", resolved.out_dir.display().to_string())?;
    d.set_item("warnings", warnings)?;
    Ok(())
}

/// Train per a TOML config; returns the summary as a dict.
#[pyfunction]
#[pyo3(signature = (config, seed = None, out = None))]
fn train<'py>(
    py: Python<'py>,
    config: &str,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let resolved = resolve(config, seed, out)?;
    let outcome = run::run_train(&resolved).map_err(run_err)?;
    let d = PyDict::new(py);
    set_common(&d, &resolved, &outcome.summary.warnings)?;
    d.set_item("steps", outcome.summary.steps)?;
    d.set_item("initial_smoothed_loss", outcome.summary.initial_smoothed_loss)?;
    d.set_item("final_smoothed_loss", outcome.summary.final_smoothed_loss)?;
    d.set_item("val_knn_accuracy", outcome.summary.val_knn_accuracy)?;
    d.set_item("skipped_levels", outcome.summary.skipped_levels)?;
    d.set_item("checkpoint", outcome.checkpoint.display().to_string())?;
    d.set_item("loss_csv", outcome.loss_csv.display().to_string())?;
    Ok(d)
}

/// Probe a trained checkpoint ("knn" or "linear"); returns the report dict.
#[pyfunction]
#[pyo3(signature = (config, probe = "knn", seed = None, out = None))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &str,
    probe: &str,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let probe = match probe {
        "knn" => Probe::Knn,
        "linear" => Probe::Linear,
        other => {
            return Err(PyValueError::new_err(format!(
                "probe: expected knn or linear, got {other:?}"
            )))
        }
    };
    let resolved = resolve(config, seed, out)?;
    let outcome = run::run_eval(&resolved, probe).map_err(run_err)?;
    let d = PyDict::new(py);
    set_common(&d, &resolved, &outcome.warnings)?;
    d.set_item("probe", probe.as_str())?;
    let report = match probe {
        Probe::Knn => outcome.report.knn.as_ref(),
        Probe::Linear => outcome.report.linear.as_ref(),
    };
    if let Some(r) = report {
        d.set_item("accuracy", r.accuracy)?;
        d.set_item("per_class_accuracy", &r.per_class)?;
    }
    d.set_item("ordering_fraction", outcome.report.ordering_fraction)?;
    d.set_item("report_path", outcome.report_path.display().to_string())?;
    Ok(d)
}

/// Withhold classes, retrain on the rest, score the withheld split.
#[pyfunction]
#[pyo3(signature = (config, withhold, seed = None, out = None))]
fn ood<'py>(
    py: Python<'py>,
    config: &str,
    withhold: Vec<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let resolved = resolve(config, seed, out)?;
    let outcome = run::run_ood(&resolved, &withhold).map_err(run_err)?;
    let d = PyDict::new(py);
    set_common(&d, &resolved, &outcome.warnings)?;
    d.set_item("auroc", outcome.curve.auroc)?;
    d.set_item("train_batches", outcome.train_batches)?;
    d.set_item("audit_violations", outcome.audit_violations)?;
    if let Some(o) = outcome.report.ood.as_ref() {
        d.set_item("withheld", &o.withheld)?;
        d.set_item("score", &o.score)?;
    }
    Ok(d)
}

/// Project a trained run's test embeddings to 2D ("pca" or "tsne").
#[pyfunction]
#[pyo3(signature = (config, method = "pca", seed = None, out = None))]
fn project<'py>(
    py: Python<'py>,
    config: &str,
    method: &str,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let resolved = resolve(config, seed, out)?;
    let outcome = run::run_project(&resolved, method).map_err(run_err)?;
    let d = PyDict::new(py);
    set_common(&d, &resolved, &outcome.warnings)?;
    let points: Vec<(f64, f64)> = outcome.points.iter().map(|&[x, y]| (x, y)).collect();
    d.set_item("points", points)?;
    d.set_item("labels", &outcome.labels)?;
    d.set_item("csv_path", outcome.csv_path.display().to_string())?;
    d.set_item("svg_path", outcome.svg_path.display().to_string())?;
    Ok(d)
}

#[pymodule]
fn rankcl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RankingTable>()?;
    m.add_class::<TemperatureSchedule>()?;
    m.add_class::<LossResult>()?;
    m.add_function(wrap_pyfunction!(ranked_loss, m)?)?;
    m.add_function(wrap_pyfunction!(supcon_loss, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(knn_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(project_2d, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ood, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    Ok(())
}
