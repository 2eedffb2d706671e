//! Rank-aware contrastive losses over batch embeddings.
//!
//! For anchor q with rank sets P_1..P_r (P_1 = other samples of q's own class,
//! including its second view) and negatives N, each level i contributes
//!
//! ```text
//! l_i = −log [ Σ_{p∈P_i} exp(h(q,p)/τ_i)
//!            / ( Σ_{p∈P_j, j≥i} exp(h(q,p)/τ_i) + Σ_{n∈N} exp(h(q,n)/τ_i) ) ]
//! ```
//!
//! with h = cosine similarity. Levels below i drop out of both numerator and
//! denominator (the recursive removal); negatives stay in every level's
//! denominator. The total is Σ_i mean-over-anchors(l_i). With r=1 this is the
//! supervised contrastive loss.
//!
//! The batch path ([`ranked_contrastive_loss`]) runs on the gradient tape via
//! constant 0/1 masks; [`ranked_level_loss`] is the plain-number form for one
//! anchor and level.

use thiserror::Error;

use crate::ranking::{Rank, RankingError, RankingTable, TemperatureSchedule};
use crate::tensor::{Tensor, TensorError, NORM_EPS};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error("loss: {0}")]
    Contract(String),
}

fn contract(msg: impl Into<String>) -> LossError {
    LossError::Contract(msg.into())
}

/// Cosine similarity of two vectors of equal dimension.
pub fn cosine_similarity(q: &[f64], x: &[f64]) -> Result<f64, LossError> {
    if q.len() != x.len() || q.is_empty() {
        return Err(contract(format!(
            "cosine_similarity: dims {} vs {}",
            q.len(),
            x.len()
        )));
    }
    let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nq < NORM_EPS || nx < NORM_EPS {
        return Err(LossError::Tensor(TensorError::DegenerateVector {
            index: if nq < NORM_EPS { 0 } else { 1 },
            norm: nq.min(nx),
        }));
    }
    let dot: f64 = q.iter().zip(x).map(|(a, b)| a * b).sum();
    Ok(dot / (nq * nx))
}

/// Pairwise cosine similarities among batch rows. The diagonal is masked:
/// a sample is never its own positive or negative.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    size: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Compute from raw (not necessarily unit) embedding rows. Each pair is
    /// evaluated once and mirrored, so the matrix is exactly symmetric.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<SimilarityMatrix, LossError> {
        let n = rows.len();
        if n < 2 {
            return Err(contract("similarity matrix needs at least 2 rows"));
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let s = cosine_similarity(&rows[i], &rows[j])?;
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Ok(SimilarityMatrix { size: n, values })
    }

    /// Wrap precomputed similarities. Must be symmetric within 1e-6 with all
    /// entries in [-1, 1] up to the same slack.
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<SimilarityMatrix, LossError> {
        if size < 2 || values.len() != size * size {
            return Err(contract(format!(
                "similarity matrix: {} values for size {size}",
                values.len()
            )));
        }
        for i in 0..size {
            for j in 0..size {
                let v = values[i * size + j];
                if !(-1.0 - 1e-6..=1.0 + 1e-6).contains(&v) {
                    return Err(contract(format!("similarity ({i},{j}) = {v} outside [-1,1]")));
                }
                if (v - values[j * size + i]).abs() > 1e-6 {
                    return Err(contract(format!("similarity matrix asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(SimilarityMatrix { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Similarity of a pair, or None on the masked diagonal.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i == j {
            None
        } else {
            Some(self.values[i * self.size + j])
        }
    }
}

/// What a batch row is, for rank bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Known(usize),
    /// Auxiliary sample of an unknown class; ranks only the reference vector.
    Aux,
    /// The constant reference row itself; never an anchor.
    Reference,
}

/// Rank of column `j` relative to anchor row `a`, or None when `j` is outside
/// anchor `a`'s universe entirely.
fn row_rank(table: &RankingTable, rows: &[RowKind], a: usize, j: usize) -> Option<Rank> {
    match (rows[a], rows[j]) {
        (RowKind::Known(ca), RowKind::Known(cj)) => {
            Some(table.rank_of(ca, cj).expect("validated ids"))
        }
        (RowKind::Known(_), RowKind::Aux) => Some(Rank::Negative),
        (RowKind::Known(_), RowKind::Reference) => None,
        (RowKind::Aux, RowKind::Reference) => Some(Rank::Level(1)),
        (RowKind::Aux, _) => Some(Rank::Negative),
        (RowKind::Reference, _) => None,
    }
}

fn row_depth(table: &RankingTable, kind: RowKind) -> usize {
    match kind {
        RowKind::Known(c) => table.depth(c),
        RowKind::Aux => 1,
        RowKind::Reference => 0,
    }
}

struct LevelMasks {
    pos: Vec<f64>,
    den: Vec<f64>,
    /// 1.0 on inactive rows so both masked sums become log(1) = 0 there.
    fill: Vec<f64>,
    active: Vec<bool>,
    n_active: usize,
    skipped: usize,
}

fn level_masks(table: &RankingTable, rows: &[RowKind], level: usize) -> LevelMasks {
    let n = rows.len();
    let mut pos = vec![0.0; n * n];
    let mut den = vec![0.0; n * n];
    let mut fill = vec![0.0; n];
    let mut active = vec![false; n];
    let mut n_active = 0;
    let mut skipped = 0;
    for a in 0..n {
        let exists = level <= row_depth(table, rows[a]);
        let mut has_pos = false;
        if exists {
            for j in 0..n {
                if j == a {
                    continue;
                }
                match row_rank(table, rows, a, j) {
                    Some(Rank::Level(k)) if k == level => {
                        pos[a * n + j] = 1.0;
                        den[a * n + j] = 1.0;
                        has_pos = true;
                    }
                    Some(Rank::Level(k)) if k > level => den[a * n + j] = 1.0,
                    Some(Rank::Negative) => den[a * n + j] = 1.0,
                    _ => {}
                }
            }
        }
        if has_pos {
            active[a] = true;
            n_active += 1;
        } else {
            if exists {
                skipped += 1;
            }
            fill[a] = 1.0;
            for j in 0..n {
                pos[a * n + j] = 0.0;
                den[a * n + j] = 0.0;
            }
        }
    }
    LevelMasks {
        pos,
        den,
        fill,
        active,
        n_active,
        skipped,
    }
}

/// One anchor's level loss from precomputed similarities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevelLoss {
    Value(f64),
    /// P_i was empty in this batch for this anchor; the level contributes 0.
    Skipped,
}

/// Evaluate one level of the loss for one anchor, in plain numbers.
pub fn ranked_level_loss(
    anchor: usize,
    level: usize,
    sims: &SimilarityMatrix,
    labels: &[usize],
    table: &RankingTable,
    taus: &TemperatureSchedule,
) -> Result<LevelLoss, LossError> {
    let n = sims.size();
    if labels.len() != n {
        return Err(contract(format!("{} labels for {n} rows", labels.len())));
    }
    if anchor >= n {
        return Err(contract(format!("anchor {anchor} out of 0..{n}")));
    }
    if level == 0 || level > taus.len() {
        return Err(contract(format!(
            "level {level} outside schedule of length {}",
            taus.len()
        )));
    }
    for &l in labels {
        if l >= table.class_count() {
            return Err(RankingError::InvalidClassId {
                id: l,
                count: table.class_count(),
            }
            .into());
        }
    }
    let tau = taus.tau(level);
    let mut num_terms: Vec<f64> = Vec::new();
    let mut den_terms: Vec<f64> = Vec::new();
    for j in 0..n {
        if j == anchor {
            continue;
        }
        let s = sims.get(anchor, j).expect("off-diagonal") / tau;
        match table.rank_of(labels[anchor], labels[j])? {
            Rank::Level(k) if k == level => {
                num_terms.push(s);
                den_terms.push(s);
            }
            Rank::Level(k) if k > level => den_terms.push(s),
            Rank::Negative => den_terms.push(s),
            _ => {}
        }
    }
    if num_terms.is_empty() {
        return Ok(LevelLoss::Skipped);
    }
    let max = den_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let num: f64 = num_terms.iter().map(|s| (s - max).exp()).sum();
    let den: f64 = den_terms.iter().map(|s| (s - max).exp()).sum();
    Ok(LevelLoss::Value(den.ln() - num.ln()))
}

/// The loss of one batch, decomposed for logging and diagnostics.
#[derive(Debug)]
pub struct LossBreakdown {
    /// Scalar total on the gradient tape: Σ_i per_level[i].
    pub total: Tensor,
    /// Mean level losses over the anchors active at each level.
    pub per_level: Vec<f64>,
    /// Per anchor: Σ over its active levels. Excluded anchors read 0.
    pub per_anchor: Vec<f64>,
    /// (anchor, level) pairs where the level exists for the anchor's class
    /// but the batch held no member of P_i.
    pub skipped_levels: usize,
    /// Anchors with no active level at all.
    pub excluded_anchors: Vec<usize>,
}

/// The ranked loss over a batch. `embeddings` is `[B, d]` (raw; rows are
/// normalized internally, so the result is scale invariant), `labels[b]` is
/// row b's class. The schedule must cover the table's deepest rank.
pub fn ranked_contrastive_loss(
    embeddings: &Tensor,
    labels: &[usize],
    table: &RankingTable,
    taus: &TemperatureSchedule,
) -> Result<LossBreakdown, LossError> {
    let rows: Vec<RowKind> = labels.iter().map(|&l| RowKind::Known(l)).collect();
    masked_loss(embeddings, &rows, table, taus, None)
}

/// The r=1 specialization: every other same-class sample is a positive,
/// everything else a negative.
pub fn supcon_loss(embeddings: &Tensor, labels: &[usize], tau: f64) -> Result<LossBreakdown, LossError> {
    let classes = labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    let names: Vec<String> = (0..classes).map(|c| format!("class{c}")).collect();
    let table = RankingTable::flat(&names);
    let taus = TemperatureSchedule::new(vec![tau])?;
    ranked_contrastive_loss(embeddings, labels, &table, &taus)
}

/// Ranked loss with auxiliary unknown-class samples tied to a constant
/// reference vector. `labels[b]` is None for auxiliary rows; those anchors
/// treat the normalized reference as their only positive and every sample as
/// a negative. Known anchors never see the reference.
pub fn ranked_loss_with_reference(
    embeddings: &Tensor,
    labels: &[Option<usize>],
    table: &RankingTable,
    taus: &TemperatureSchedule,
    reference: &[f64],
) -> Result<LossBreakdown, LossError> {
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[1] != reference.len() {
        return Err(contract(format!(
            "reference dim {} vs embedding shape {shape:?}",
            reference.len()
        )));
    }
    let norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < NORM_EPS {
        return Err(LossError::Tensor(TensorError::DegenerateVector { index: 0, norm }));
    }
    let rows: Vec<RowKind> = labels
        .iter()
        .map(|l| match l {
            Some(c) => RowKind::Known(*c),
            None => RowKind::Aux,
        })
        .collect();
    let ref_row = Tensor::from_vec(reference.to_vec(), &[1, reference.len()], false)?;
    masked_loss(embeddings, &rows, table, taus, Some(ref_row))
}

fn masked_loss(
    embeddings: &Tensor,
    anchor_rows: &[RowKind],
    table: &RankingTable,
    taus: &TemperatureSchedule,
    reference: Option<Tensor>,
) -> Result<LossBreakdown, LossError> {
    let shape = embeddings.shape();
    if shape.len() != 2 {
        return Err(contract(format!("embeddings must be [B, d], got {shape:?}")));
    }
    let b = shape[0];
    if b < 2 {
        return Err(contract(format!("batch of {b} rows; need at least 2")));
    }
    if anchor_rows.len() != b {
        return Err(contract(format!("{} labels for {b} rows", anchor_rows.len())));
    }
    for kind in anchor_rows {
        if let RowKind::Known(c) = kind {
            if *c >= table.class_count() {
                return Err(RankingError::InvalidClassId {
                    id: *c,
                    count: table.class_count(),
                }
                .into());
            }
        }
    }
    let r = table.max_depth();
    if taus.len() < r {
        return Err(contract(format!(
            "schedule has {} temperatures but the ranking needs {r}",
            taus.len()
        )));
    }

    let mut rows = anchor_rows.to_vec();
    let normalized = match &reference {
        Some(ref_row) => {
            rows.push(RowKind::Reference);
            let stacked = Tensor::concat_rows(&[embeddings.clone(), ref_row.clone()])?;
            stacked.l2_normalize_rows()?
        }
        None => embeddings.l2_normalize_rows()?,
    };
    let n = rows.len();
    let sims = normalized.matmul(&normalized.transpose()?)?;

    let ones_col = Tensor::filled(&[n, 1], 1.0);
    let mut total: Option<Tensor> = None;
    let mut per_level = Vec::with_capacity(r);
    let mut per_anchor = vec![0.0; b];
    let mut ever_active = vec![false; b];
    let mut skipped_levels = 0;

    for level in 1..=r {
        let masks = level_masks(table, &rows, level);
        skipped_levels += masks.skipped;
        if masks.n_active == 0 {
            per_level.push(0.0);
            continue;
        }
        let tau = taus.tau(level);
        let scaled = sims.scale(1.0 / tau)?;

        // Per-row max over the denominator entries, detached: shifts cancel
        // between log(den) and log(num) but keep every exponent <= 0.
        let den_mask = Tensor::from_vec(masks.den.clone(), &[n, n], false)?;
        let pos_mask = Tensor::from_vec(masks.pos.clone(), &[n, n], false)?;
        let mut shifts = vec![0.0; n * n];
        {
            let sv = scaled.borrow_data();
            for a in 0..n {
                if !masks.active.get(a).copied().unwrap_or(false) {
                    continue;
                }
                let mut m = f64::NEG_INFINITY;
                for j in 0..n {
                    if masks.den[a * n + j] != 0.0 {
                        m = m.max(sv[a * n + j]);
                    }
                }
                for j in 0..n {
                    shifts[a * n + j] = m;
                }
            }
        }
        let shift = Tensor::from_vec(shifts, &[n, n], false)?;
        let exps = scaled.sub(&shift)?.mul(&den_mask)?.exp()?;

        let fill = Tensor::from_vec(masks.fill.clone(), &[n, 1], false)?;
        let num = exps.mul(&pos_mask)?.matmul(&ones_col)?.add(&fill)?;
        let den = exps.mul(&den_mask)?.matmul(&ones_col)?.add(&fill)?;
        let l_vec = den.log()?.sub(&num.log()?)?;

        {
            let lv = l_vec.borrow_data();
            for a in 0..b {
                if masks.active[a] {
                    per_anchor[a] += lv[a];
                    ever_active[a] = true;
                }
            }
        }
        let level_mean = l_vec.sum()?.scale(1.0 / masks.n_active as f64)?;
        per_level.push(level_mean.item());
        total = Some(match total {
            Some(t) => t.add(&level_mean)?,
            None => level_mean,
        });
    }

    let total = match total {
        Some(t) => t,
        None => {
            return Err(contract(
                "no anchor had any populated positive set; cannot form a loss",
            ))
        }
    };
    let excluded_anchors = (0..b).filter(|&a| !ever_active[a]).collect();
    Ok(LossBreakdown {
        total,
        per_level,
        per_anchor,
        skipped_levels,
        excluded_anchors,
    })
}

/// Mean cross-entropy of logits against integer labels (the discriminative
/// baseline's objective).
pub fn softmax_ce_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor, LossError> {
    Ok(logits.cross_entropy(labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = 0.6931471805599453;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|c| format!("c{c}")).collect()
    }

    fn chain_table(n: usize, lists: &[(usize, Vec<Vec<usize>>)]) -> RankingTable {
        let mut ranks = vec![Vec::new(); n];
        for (c, sets) in lists {
            ranks[*c] = sets.clone();
        }
        RankingTable::from_ids(&names(n), ranks).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-15);
        let v = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 0.70710678).abs() < 1e-8);
        assert!((cosine_similarity(&[2.0, 0.0], &[5.0, 5.0]).unwrap() - v).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn similarity_matrix_is_symmetric_and_masked() {
        let rows = vec![vec![1.0, 2.0, -0.5], vec![0.3, -0.7, 1.1], vec![2.0, 0.1, 0.4]];
        let s = SimilarityMatrix::from_rows(&rows).unwrap();
        for i in 0..3 {
            assert_eq!(s.get(i, i), None);
            for j in 0..3 {
                if i != j {
                    assert_eq!(s.get(i, j), s.get(j, i));
                    assert!(s.get(i, j).unwrap().abs() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn level_loss_symmetric_pair_is_ln2() {
        // positive and negative equally similar to the anchor: -log(1/2)
        let sims = SimilarityMatrix::from_values(
            3,
            vec![1.0, 0.3, 0.3, 0.3, 1.0, 0.0, 0.3, 0.0, 1.0],
        )
        .unwrap();
        let table = chain_table(2, &[]);
        let taus = TemperatureSchedule::new(vec![1.0]).unwrap();
        let l = ranked_level_loss(0, 1, &sims, &[0, 0, 1], &table, &taus).unwrap();
        match l {
            LevelLoss::Value(v) => assert!((v - LN_2).abs() < 1e-12, "{v}"),
            LevelLoss::Skipped => panic!("should not skip"),
        }
    }

    #[test]
    fn level_loss_opposed_pair() {
        // h(q,p)=1, h(q,n)=-1, tau=1: l = log(1 + e^{-2})
        let sims = SimilarityMatrix::from_values(
            3,
            vec![1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 1.0],
        )
        .unwrap();
        let table = chain_table(2, &[]);
        let taus = TemperatureSchedule::new(vec![1.0]).unwrap();
        match ranked_level_loss(0, 1, &sims, &[0, 0, 1], &table, &taus).unwrap() {
            LevelLoss::Value(v) => {
                assert!((v - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12, "{v}");
                assert!((v - 0.12692801104297263).abs() < 1e-12);
            }
            LevelLoss::Skipped => panic!("should not skip"),
        }
    }

    #[test]
    fn level_loss_skips_empty_positive_set() {
        let sims = SimilarityMatrix::from_values(2, vec![1.0, 0.2, 0.2, 1.0]).unwrap();
        let table = chain_table(2, &[]);
        let taus = TemperatureSchedule::new(vec![1.0]).unwrap();
        // anchor 0 is the only member of its class in the batch
        assert_eq!(
            ranked_level_loss(0, 1, &sims, &[0, 1], &table, &taus).unwrap(),
            LevelLoss::Skipped
        );
    }

    #[test]
    fn recursive_removal_excludes_lower_ranks() {
        // class 0 ranks class 1 at level 2; classes 2 is negative.
        // At level 2 the anchor's own class rows must not appear at all, so
        // perturbing a same-class row leaves l_2 unchanged.
        let table = chain_table(3, &[(0, vec![vec![1]])]);
        let taus = TemperatureSchedule::new(vec![0.5, 1.0]).unwrap();
        let labels = [0, 0, 1, 2];
        let base = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![-0.2, 0.3, 0.9],
        ];
        let mut poked = base.clone();
        poked[1] = vec![-0.4, 0.8, 0.3];
        let l2_base = ranked_level_loss(
            0,
            2,
            &SimilarityMatrix::from_rows(&base).unwrap(),
            &labels,
            &table,
            &taus,
        )
        .unwrap();
        let l2_poked = ranked_level_loss(
            0,
            2,
            &SimilarityMatrix::from_rows(&poked).unwrap(),
            &labels,
            &table,
            &taus,
        )
        .unwrap();
        assert_eq!(l2_base, l2_poked);
        // while level 1 does change
        let l1_base = ranked_level_loss(
            0,
            1,
            &SimilarityMatrix::from_rows(&base).unwrap(),
            &labels,
            &table,
            &taus,
        )
        .unwrap();
        let l1_poked = ranked_level_loss(
            0,
            1,
            &SimilarityMatrix::from_rows(&poked).unwrap(),
            &labels,
            &table,
            &taus,
        )
        .unwrap();
        assert_ne!(l1_base, l1_poked);
    }

    #[test]
    fn ordering_beats_permuted_ordering() {
        // h(q,P_1)=1, h(q,P_2)=0.5, h(q,N)=-1 vs the P_1/P_2 values swapped.
        let table = chain_table(3, &[(0, vec![vec![1]])]);
        let taus = TemperatureSchedule::new(vec![0.1, 0.2]).unwrap();
        let labels = [0, 0, 1, 2];
        let mk = |p1: f64, p2: f64| {
            let mut v = vec![
                1.0, p1, p2, -1.0, //
                p1, 1.0, 0.2, 0.1, //
                p2, 0.2, 1.0, 0.1, //
                -1.0, 0.1, 0.1, 1.0,
            ];
            v.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
            SimilarityMatrix::from_values(4, v).unwrap()
        };
        let total = |sims: &SimilarityMatrix| {
            let mut t = 0.0;
            for level in 1..=2 {
                match ranked_level_loss(0, level, sims, &labels, &table, &taus).unwrap() {
                    LevelLoss::Value(v) => t += v,
                    LevelLoss::Skipped => panic!("level {level} skipped"),
                }
            }
            t
        };
        assert!(total(&mk(1.0, 0.5)) < total(&mk(0.5, 1.0)));
    }

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows, true).unwrap()
    }

    #[test]
    fn identical_embeddings_closed_form() {
        // all sims are 1: l_i = log(|den_i| / |P_i|) for every active anchor.
        let e = unit_rows(&vec![vec![0.3, 0.4]; 6]);
        let labels = [0, 0, 1, 1, 2, 2];
        let table = chain_table(3, &[(0, vec![vec![1]]), (1, vec![vec![2]])]);
        let taus = TemperatureSchedule::new(vec![0.1, 0.2]).unwrap();
        let out = ranked_contrastive_loss(&e, &labels, &table, &taus).unwrap();
        // level 1: every anchor has 1 same-class positive out of 5 others
        assert!((out.per_level[0] - (5.0f64 / 1.0).ln()).abs() < 1e-9);
        // level 2: anchors of class 0 see P_2 = two class-1 rows and N = two
        // class-2 rows; anchors of class 1 see P_2 = class-2 rows and N =
        // class-0 rows. Either way 4 denominator terms over 2 positives.
        assert!((out.per_level[1] - (4.0f64 / 2.0).ln()).abs() < 1e-9);
        assert!((out.total.item() - (out.per_level[0] + out.per_level[1])).abs() < 1e-9);
        assert!(out.excluded_anchors.is_empty());
        assert_eq!(out.skipped_levels, 0);
    }

    #[test]
    fn breakdown_invariants_hold() {
        let e = unit_rows(&[
            vec![0.9, 0.1, 0.0],
            vec![0.8, 0.3, -0.1],
            vec![0.1, 0.9, 0.2],
            vec![-0.1, 1.0, 0.1],
            vec![-0.8, -0.2, 0.4],
            vec![-0.9, 0.1, 0.3],
        ]);
        let labels = [0, 0, 1, 1, 2, 2];
        let table = chain_table(3, &[(0, vec![vec![1]]), (1, vec![vec![0], vec![2]])]);
        let taus = TemperatureSchedule::new(vec![0.2, 0.35, 0.6]).unwrap();
        let out = ranked_contrastive_loss(&e, &labels, &table, &taus).unwrap();
        let sum: f64 = out.per_level.iter().sum();
        assert!((out.total.item() - sum).abs() <= 1e-6 * sum.abs().max(1.0));
        assert!(out.per_level.iter().all(|&l| l >= 0.0));
        assert!(out.per_anchor.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn scale_invariance() {
        let rows = vec![
            vec![0.9, 0.1, 0.0],
            vec![0.8, 0.3, -0.1],
            vec![0.1, 0.9, 0.2],
            vec![-0.1, 1.0, 0.1],
        ];
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * 37.5).collect())
            .collect();
        let labels = [0, 0, 1, 1];
        let table = chain_table(2, &[(0, vec![vec![1]])]);
        let taus = TemperatureSchedule::new(vec![0.2, 0.4]).unwrap();
        let a = ranked_contrastive_loss(&unit_rows(&rows), &labels, &table, &taus).unwrap();
        let b = ranked_contrastive_loss(&unit_rows(&scaled), &labels, &table, &taus).unwrap();
        assert!((a.total.item() - b.total.item()).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariance() {
        let rows = vec![
            vec![0.9, 0.1, 0.0],
            vec![0.8, 0.3, -0.1],
            vec![0.1, 0.9, 0.2],
            vec![-0.8, -0.2, 0.4],
        ];
        let labels = [0, 0, 1, 2];
        let table = chain_table(3, &[(0, vec![vec![1]])]);
        let taus = TemperatureSchedule::new(vec![0.2, 0.4]).unwrap();
        let a = ranked_contrastive_loss(&unit_rows(&rows), &labels, &table, &taus).unwrap();

        let perm = [2usize, 0, 3, 1];
        let prows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let b = ranked_contrastive_loss(&unit_rows(&prows), &plabels, &table, &taus).unwrap();
        assert!((a.total.item() - b.total.item()).abs() < 1e-9);
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            assert!((b.per_anchor[new_idx] - a.per_anchor[old_idx]).abs() < 1e-9);
        }
    }

    #[test]
    fn level_monotonicity_in_positive_similarity() {
        // raising one positive's similarity to the anchor lowers that level
        let table = chain_table(2, &[]);
        let taus = TemperatureSchedule::new(vec![0.3]).unwrap();
        let labels = [0, 0, 1];
        let mk = |p: f64| {
            SimilarityMatrix::from_values(3, vec![1.0, p, 0.1, p, 1.0, 0.0, 0.1, 0.0, 1.0]).unwrap()
        };
        let val = |p: f64| match ranked_level_loss(0, 1, &mk(p), &labels, &table, &taus).unwrap() {
            LevelLoss::Value(v) => v,
            LevelLoss::Skipped => panic!(),
        };
        assert!(val(0.6) < val(0.5));
        assert!(val(0.5) < val(0.4));
    }

    #[test]
    fn lonely_anchor_is_excluded_with_zero_contribution() {
        let rows = vec![
            vec![0.9, 0.1],
            vec![0.8, 0.3],
            vec![-0.2, 0.9], // only member of class 1
        ];
        let labels = [0, 0, 1];
        let table = chain_table(2, &[]);
        let taus = TemperatureSchedule::new(vec![0.5]).unwrap();
        let e = unit_rows(&rows);
        let out = ranked_contrastive_loss(&e, &labels, &table, &taus).unwrap();
        assert_eq!(out.excluded_anchors, vec![2]);
        assert_eq!(out.per_anchor[2], 0.0);
        assert_eq!(out.skipped_levels, 1);
        // the excluded anchor's row still receives gradient as a negative
        out.total.backward().unwrap();
        let g = e.grad().unwrap();
        assert!(g[4].abs() + g[5].abs() > 0.0);
    }

    #[test]
    fn tape_loss_matches_scalar_path() {
        let rows = vec![
            vec![0.9, 0.1, 0.0],
            vec![0.8, 0.3, -0.1],
            vec![0.1, 0.9, 0.2],
            vec![-0.1, 1.0, 0.1],
            vec![-0.8, -0.2, 0.4],
            vec![-0.9, 0.1, 0.3],
        ];
        let labels = [0, 0, 1, 1, 2, 2];
        let table = chain_table(3, &[(0, vec![vec![1]]), (1, vec![vec![2]])]);
        let taus = TemperatureSchedule::new(vec![0.2, 0.4]).unwrap();
        let out = ranked_contrastive_loss(&unit_rows(&rows), &labels, &table, &taus).unwrap();

        let sims = SimilarityMatrix::from_rows(&rows).unwrap();
        for level in 1..=2usize {
            let mut sum = 0.0;
            let mut count = 0;
            for anchor in 0..rows.len() {
                if let LevelLoss::Value(v) =
                    ranked_level_loss(anchor, level, &sims, &labels, &table, &taus).unwrap()
                {
                    sum += v;
                    count += 1;
                }
            }
            assert!(count > 0);
            assert!(
                (out.per_level[level - 1] - sum / count as f64).abs() < 1e-10,
                "level {level}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let base = vec![
            0.9, 0.1, 0.0, //
            0.8, 0.3, -0.1, //
            0.1, 0.9, 0.2, //
            -0.1, 1.0, 0.1, //
            -0.8, -0.2, 0.4, //
            -0.9, 0.1, 0.3,
        ];
        let labels = [0usize, 0, 1, 1, 2, 2];
        let table = chain_table(3, &[(0, vec![vec![1]]), (1, vec![vec![2]])]);
        let taus = TemperatureSchedule::new(vec![0.2, 0.4]).unwrap();

        let eval = |data: &[f64], rg: bool| {
            let e = Tensor::from_vec(data.to_vec(), &[6, 3], rg).unwrap();
            let out = ranked_contrastive_loss(&e, &labels, &table, &taus).unwrap();
            (e, out)
        };
        let (e, out) = eval(&base, true);
        out.total.backward().unwrap();
        let grad = e.grad().unwrap();

        let h = 1e-5;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fp = eval(&plus, false).1.total.item();
            let fm = eval(&minus, false).1.total.item();
            let numeric = (fp - fm) / (2.0 * h);
            let denom = numeric.abs().max(grad[i].abs()).max(1.0);
            assert!(
                (numeric - grad[i]).abs() / denom < 1e-4,
                "coord {i}: analytic {} numeric {numeric}",
                grad[i]
            );
        }
    }

    #[test]
    fn supcon_matches_flat_ranked_loss() {
        let rows = vec![
            vec![0.9, 0.1],
            vec![0.8, 0.3],
            vec![-0.2, 0.9],
            vec![-0.4, 0.8],
        ];
        let labels = [0, 0, 1, 1];
        let a = supcon_loss(&unit_rows(&rows), &labels, 0.3).unwrap();
        let table = chain_table(2, &[]);
        let taus = TemperatureSchedule::new(vec![0.3]).unwrap();
        let b = ranked_contrastive_loss(&unit_rows(&rows), &labels, &table, &taus).unwrap();
        assert_eq!(a.total.item(), b.total.item());
    }

    #[test]
    fn reference_mode_targets_aux_rows() {
        let rows = vec![
            vec![0.9, 0.1, 0.2],
            vec![0.8, 0.3, 0.1],
            vec![-0.2, 0.9, -0.1],
            vec![-0.4, 0.8, 0.0],
            vec![0.2, -0.5, 0.9], // aux
        ];
        let labels = [Some(0), Some(0), Some(1), Some(1), None];
        let table = chain_table(2, &[]);
        let taus = TemperatureSchedule::new(vec![0.3]).unwrap();
        let e = unit_rows(&rows);
        let f = vec![1.0, 1.0, 1.0];
        let out = ranked_loss_with_reference(&e, &labels, &table, &taus, &f).unwrap();
        assert!(out.excluded_anchors.is_empty());
        assert_eq!(out.per_anchor.len(), 5);
        assert!(out.per_anchor[4] > 0.0);
        // pushing the aux row toward f must lower the aux anchor's loss
        let better = vec![
            rows[0].clone(),
            rows[1].clone(),
            rows[2].clone(),
            rows[3].clone(),
            vec![0.9, 0.9, 0.9],
        ];
        let out2 =
            ranked_loss_with_reference(&unit_rows(&better), &labels, &table, &taus, &f).unwrap();
        assert!(out2.per_anchor[4] < out.per_anchor[4]);
    }

    #[test]
    fn reference_row_is_invisible_to_known_anchors() {
        // with no aux rows the reference must change nothing
        let rows = vec![
            vec![0.9, 0.1],
            vec![0.8, 0.3],
            vec![-0.2, 0.9],
            vec![-0.4, 0.8],
        ];
        let labels_plain = [0, 0, 1, 1];
        let labels_opt: Vec<Option<usize>> = labels_plain.iter().map(|&l| Some(l)).collect();
        let table = chain_table(2, &[]);
        let taus = TemperatureSchedule::new(vec![0.3]).unwrap();
        let a = ranked_contrastive_loss(&unit_rows(&rows), &labels_plain, &table, &taus).unwrap();
        let b = ranked_loss_with_reference(&unit_rows(&rows), &labels_opt, &table, &taus, &[1.0, 1.0])
            .unwrap();
        assert!((a.total.item() - b.total.item()).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let logits = Tensor::zeros(&[2, 10]);
        let l = softmax_ce_loss(&logits, &[3, 7]).unwrap();
        assert!((l.item() - 10f64.ln()).abs() < 1e-12);

        let confident = Tensor::from_vec(vec![10.0, -10.0], &[1, 2], false).unwrap();
        let l = softmax_ce_loss(&confident, &[0]).unwrap();
        assert!((l.item() - 2.0611536181902037e-9).abs() < 1e-15);

        // permuting columns together with labels leaves the loss unchanged
        let logits = Tensor::from_vec(vec![0.3, -0.7, 1.1, 0.2, 0.8, -0.5], &[2, 3], false).unwrap();
        let base = softmax_ce_loss(&logits, &[2, 0]).unwrap().item();
        let permuted =
            Tensor::from_vec(vec![1.1, 0.3, -0.7, -0.5, 0.2, 0.8], &[2, 3], false).unwrap();
        let p = softmax_ce_loss(&permuted, &[0, 1]).unwrap().item();
        assert!((base - p).abs() < 1e-12);
    }

    #[test]
    fn schedule_shorter_than_table_is_rejected() {
        let e = unit_rows(&[vec![1.0, 0.0], vec![0.9, 0.1]]);
        let table = chain_table(2, &[(0, vec![vec![1]])]);
        let taus = TemperatureSchedule::new(vec![0.1]).unwrap();
        assert!(matches!(
            ranked_contrastive_loss(&e, &[0, 0], &table, &taus),
            Err(LossError::Contract(_))
        ));
    }
}
