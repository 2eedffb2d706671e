//! Embedding measurement: classification probes, prototype OOD scores,
//! ROC/AUROC, and 2D projections (PCA and t-SNE).

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::loss::softmax_ce_loss;
use crate::model::SgdMomentum;
use crate::tensor::{Tensor, TensorError, NORM_EPS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("eval: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn contract(msg: impl Into<String>) -> EvalError {
    EvalError::Contract(msg.into())
}

/// Copy a `[n, d]` tensor into row vectors.
pub fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let shape = t.shape();
    assert_eq!(shape.len(), 2, "expected a 2D tensor");
    t.value().chunks(shape[1]).map(|c| c.to_vec()).collect()
}

fn unit(v: &[f64]) -> Result<Vec<f64>, EvalError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < NORM_EPS {
        return Err(contract("zero vector cannot be normalized"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(NORM_EPS * NORM_EPS)
}

// ── kNN probe ────────────────────────────────────────────────────────

/// Majority vote over the k nearest train embeddings by cosine distance.
/// Vote ties break by smaller summed distance, then lower class id.
pub fn knn_predict(
    train: &[Vec<f64>],
    train_labels: &[usize],
    query: &[f64],
    k: usize,
) -> Result<usize, EvalError> {
    if train.is_empty() || train.len() != train_labels.len() {
        return Err(contract("empty or mismatched train split"));
    }
    if k == 0 || k > train.len() {
        return Err(contract(format!("k={k} outside 1..={}", train.len())));
    }
    let mut dists: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, row)| (cosine_distance(query, row), i))
        .collect();
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let classes = train_labels.iter().copied().max().unwrap() + 1;
    let mut votes = vec![0usize; classes];
    let mut summed = vec![0.0f64; classes];
    for &(d, i) in &dists[..k] {
        votes[train_labels[i]] += 1;
        summed[train_labels[i]] += d;
    }
    let best = (0..classes)
        .max_by(|&a, &b| {
            votes[a]
                .cmp(&votes[b])
                .then(summed[b].partial_cmp(&summed[a]).unwrap())
                .then(b.cmp(&a))
        })
        .unwrap();
    Ok(best)
}

/// Fraction of test embeddings whose kNN vote matches their label.
pub fn knn_accuracy(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    k: usize,
) -> Result<f64, EvalError> {
    if test.is_empty() || test.len() != test_labels.len() {
        return Err(contract("empty or mismatched test split"));
    }
    let mut correct = 0usize;
    for (row, &label) in test.iter().zip(test_labels) {
        if knn_predict(train, train_labels, row, k)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Overall and per-class accuracy from predictions.
pub fn accuracy_breakdown(preds: &[usize], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut correct = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        totals[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    let overall = correct.iter().sum::<usize>() as f64 / labels.len().max(1) as f64;
    let per_class = correct
        .iter()
        .zip(&totals)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    (overall, per_class)
}

// ── linear probe ─────────────────────────────────────────────────────

/// Train a fresh softmax layer on frozen embeddings by full-batch gradient
/// descent and return its test predictions.
pub fn linear_probe_predict(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    classes: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<usize>, EvalError> {
    if train.is_empty() || test.is_empty() {
        return Err(contract("empty split"));
    }
    let d = train[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (d as f64).sqrt();
    let w_data: Vec<f64> = (0..d * classes).map(|_| rng.random_range(-bound..bound)).collect();
    let b_data: Vec<f64> = (0..classes).map(|_| rng.random_range(-bound..bound)).collect();
    let w = Tensor::from_vec(w_data, &[d, classes], true)?;
    let b = Tensor::from_vec(b_data, &[classes], true)?;

    let x = Tensor::from_rows(train, false)?;
    let mut opt = SgdMomentum::new(&[w.clone(), b.clone()], lr, 0.9);
    for _ in 0..epochs {
        w.zero_grad();
        b.zero_grad();
        let logits = x.matmul(&w)?.add(&b)?;
        let loss = softmax_ce_loss(&logits, train_labels).map_err(|e| contract(e.to_string()))?;
        loss.backward()?;
        opt.step(&[w.clone(), b.clone()])
            .map_err(|e| contract(e.to_string()))?;
    }

    let xt = Tensor::from_rows(test, false)?;
    let logits = xt.matmul(&w)?.add(&b)?;
    let rows = tensor_rows(&logits);
    Ok(rows.iter().map(|r| argmax(r)).collect())
}

/// Accuracy of `linear_probe_predict` against the test labels.
pub fn linear_probe(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    classes: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    let preds = linear_probe_predict(train, train_labels, test, classes, epochs, lr, seed)?;
    Ok(accuracy_breakdown(&preds, test_labels, classes).0)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

// ── prototypes and OOD scores ────────────────────────────────────────

/// One unit-norm prototype per known class: the renormalized mean of that
/// class's unit embeddings.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    prototypes: Vec<Vec<f64>>,
}

impl PrototypeBank {
    pub fn from_embeddings(
        embeddings: &[Vec<f64>],
        labels: &[usize],
        classes: usize,
    ) -> Result<PrototypeBank, EvalError> {
        if embeddings.is_empty() || embeddings.len() != labels.len() {
            return Err(contract("empty or mismatched embeddings"));
        }
        if classes == 0 {
            return Err(contract("no classes"));
        }
        let d = embeddings[0].len();
        let mut sums = vec![vec![0.0f64; d]; classes];
        let mut counts = vec![0usize; classes];
        for (row, &l) in embeddings.iter().zip(labels) {
            if l >= classes {
                return Err(contract(format!("label {l} outside 0..{classes}")));
            }
            let u = unit(row)?;
            for (s, v) in sums[l].iter_mut().zip(&u) {
                *s += v;
            }
            counts[l] += 1;
        }
        let mut prototypes = Vec::with_capacity(classes);
        for (c, (sum, &count)) in sums.iter().zip(&counts).enumerate() {
            if count == 0 {
                return Err(contract(format!("class {c} has no samples to average")));
            }
            let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
            prototypes.push(unit(&mean).map_err(|_| {
                contract(format!("class {c} embeddings cancel out; prototype undefined"))
            })?);
        }
        Ok(PrototypeBank { prototypes })
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.len()
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        &self.prototypes[c]
    }

    /// In-distribution score: max cosine similarity over prototypes.
    pub fn score(&self, embedding: &[f64]) -> Result<f64, EvalError> {
        let u = unit(embedding)?;
        Ok(self
            .prototypes
            .iter()
            .map(|p| p.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Class of the nearest prototype.
    pub fn nearest(&self, embedding: &[f64]) -> Result<usize, EvalError> {
        let u = unit(embedding)?;
        let sims: Vec<f64> = self
            .prototypes
            .iter()
            .map(|p| p.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Ok(argmax(&sims))
    }
}

/// In-distribution score of the softmax baseline: the max softmax
/// probability of one logits row, computed max-shifted.
pub fn max_softmax_score(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().copied().fold(f64::NEG_INFINITY, f64::max) / denom
}

// ── ROC / AUROC ──────────────────────────────────────────────────────

/// A threshold-sweep ROC curve. Points run from (0,0) to (1,1) and are
/// nondecreasing in both coordinates; `auroc` is their trapezoidal area,
/// which equals the pairwise in>out statistic with half credit for ties.
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub auroc: f64,
}

pub fn roc_auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<RocCurve, EvalError> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(contract("both score lists must be nonempty"));
    }
    if in_scores.iter().chain(out_scores).any(|v| !v.is_finite()) {
        return Err(contract("scores must be finite"));
    }
    let mut thresholds: Vec<f64> = in_scores.iter().chain(out_scores).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let n_in = in_scores.len() as f64;
    let n_out = out_scores.len() as f64;
    let mut points = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tpr = in_scores.iter().filter(|&&s| s >= t).count() as f64 / n_in;
        let fpr = out_scores.iter().filter(|&&s| s >= t).count() as f64 / n_out;
        points.push((fpr, tpr));
    }
    let mut auroc = 0.0;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        auroc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(RocCurve { points, auroc })
}

// ── 2D projection ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProjectionMethod {
    Pca,
    Tsne { perplexity: f64, iterations: usize },
}

/// Project embeddings to two dimensions. PCA is deterministic (covariance
/// eigendecomposition with a fixed sign convention); t-SNE is seeded.
pub fn project_2d(
    embeddings: &[Vec<f64>],
    method: ProjectionMethod,
    seed: u64,
) -> Result<Vec<[f64; 2]>, EvalError> {
    let n = embeddings.len();
    if n < 3 {
        return Err(contract(format!("need at least 3 points, got {n}")));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|r| r.len() != d) {
        return Err(contract("ragged embedding rows"));
    }
    match method {
        ProjectionMethod::Pca => pca_2d(embeddings, n, d),
        ProjectionMethod::Tsne { perplexity, iterations } => {
            tsne_2d(embeddings, n, perplexity, iterations, seed)
        }
    }
}

fn pca_2d(rows: &[Vec<f64>], n: usize, d: usize) -> Result<Vec<[f64; 2]>, EvalError> {
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in rows {
        for i in 0..d {
            let xi = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += xi * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= (n - 1) as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if total_variance < 1e-12 {
        return Err(contract("constant embeddings: covariance is degenerate"));
    }
    let (eigenvalues, eigenvectors) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap().then(a.cmp(&b)));
    let mut axes = [vec![0.0; d], vec![0.0; d]];
    for (k, axis) in axes.iter_mut().enumerate() {
        let col = order[k.min(d - 1)];
        for i in 0..d {
            axis[i] = eigenvectors[i * d + col];
        }
        // fixed sign: the largest-magnitude component points positive
        let lead = (0..d)
            .max_by(|&a, &b| axis[a].abs().partial_cmp(&axis[b].abs()).unwrap().then(b.cmp(&a)))
            .unwrap();
        if axis[lead] < 0.0 {
            for v in axis.iter_mut() {
                *v = -*v;
            }
        }
    }
    Ok(rows
        .iter()
        .map(|row| {
            let mut p = [0.0; 2];
            for (k, axis) in axes.iter().enumerate() {
                p[k] = row
                    .iter()
                    .zip(&mean)
                    .zip(axis)
                    .map(|((x, m), a)| (x - m) * a)
                    .sum();
            }
            p
        })
        .collect())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the eigenvector matrix (columns are eigenvectors).
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off < 1e-22 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..d).map(|i| a[i * d + i]).collect();
    (eigenvalues, v)
}

fn tsne_2d(
    rows: &[Vec<f64>],
    n: usize,
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> Result<Vec<[f64; 2]>, EvalError> {
    if !(perplexity > 0.0) || perplexity >= n as f64 {
        return Err(contract(format!(
            "perplexity {perplexity} must be in (0, {n})"
        )));
    }
    // pairwise squared distances
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[i * n + j] = dist;
            d2[j * n + i] = dist;
        }
    }
    // per-row precision via binary search on entropy
    let target_entropy = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        let row = &d2[i * n..(i + 1) * n];
        let mut probs = vec![0.0; n];
        for _ in 0..64 {
            let mut sum = 0.0;
            for j in 0..n {
                probs[j] = if j == i { 0.0 } else { (-beta * row[j]).exp() };
                sum += probs[j];
            }
            if sum <= 0.0 {
                beta /= 2.0;
                continue;
            }
            let mut entropy = 0.0;
            for pj in probs.iter_mut() {
                *pj /= sum;
                if *pj > 1e-300 {
                    entropy -= *pj * pj.ln();
                }
            }
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-7 {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_finite() { (beta + beta_max) / 2.0 } else { beta * 2.0 };
            } else {
                beta_max = beta;
                beta = if beta_min.is_finite() { (beta + beta_min) / 2.0 } else { beta / 2.0 };
            }
        }
        for j in 0..n {
            p[i * n + j] = probs[j];
        }
    }
    // symmetrize
    let mut pj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            pj[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            [
                rng.random_range(-1e-4..1e-4),
                rng.random_range(-1e-4..1e-4),
            ]
        })
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let exaggeration_until = iterations.min(100);
    let lr = 100.0;

    for iter in 0..iterations {
        let exaggeration = if iter < exaggeration_until { 4.0 } else { 1.0 };
        // student-t affinities
        let mut q_unnorm = vec![0.0; n * n];
        let mut q_sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q_unnorm[i * n + j] = w;
                q_unnorm[j * n + i] = w;
                q_sum += 2.0 * w;
            }
        }
        let momentum = if iter < 250 { 0.5 } else { 0.8 };
        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q_unnorm[i * n + j];
                let q = (w / q_sum).max(1e-12);
                let coeff = 4.0 * (exaggeration * pj[i * n + j] - q) * w;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                velocity[i][k] = momentum * velocity[i][k] - lr * grad[k];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        // recenter
        let mut c = [0.0f64; 2];
        for yi in &y {
            c[0] += yi[0];
            c[1] += yi[1];
        }
        c[0] /= n as f64;
        c[1] /= n as f64;
        for yi in &mut y {
            yi[0] -= c[0];
            yi[1] -= c[1];
        }
    }
    Ok(y)
}

/// Mean inter-class centroid distance divided by mean intra-class spread in
/// a 2D projection; large values mean visibly separated classes.
pub fn separation_ratio(points: &[[f64; 2]], labels: &[usize], classes: usize) -> f64 {
    let mut centroids = vec![[0.0f64; 2]; classes];
    let mut counts = vec![0usize; classes];
    for (p, &l) in points.iter().zip(labels) {
        centroids[l][0] += p[0];
        centroids[l][1] += p[1];
        counts[l] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            c[0] /= n as f64;
            c[1] /= n as f64;
        }
    }
    let mut spread = 0.0;
    for (p, &l) in points.iter().zip(labels) {
        spread += ((p[0] - centroids[l][0]).powi(2) + (p[1] - centroids[l][1]).powi(2)).sqrt();
    }
    spread /= points.len() as f64;
    let mut inter = 0.0;
    let mut pairs = 0;
    for a in 0..classes {
        for b in (a + 1)..classes {
            if counts[a] > 0 && counts[b] > 0 {
                inter += ((centroids[a][0] - centroids[b][0]).powi(2)
                    + (centroids[a][1] - centroids[b][1]).powi(2))
                .sqrt();
                pairs += 1;
            }
        }
    }
    if pairs == 0 || spread == 0.0 {
        return f64::INFINITY;
    }
    (inter / pairs as f64) / spread
}
