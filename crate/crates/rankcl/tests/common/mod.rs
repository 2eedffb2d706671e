//! Shared oracles for the acceptance suite. Everything here recomputes the
//! quantity under test from first principles: explicit set enumeration, plain
//! loops, no code shared with the library paths being checked.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rankcl::ranking::Rank;
use rankcl::{RankingTable, TemperatureSchedule, Tensor};

/// One verdict line per criterion, then the hard assert.
pub fn criterion(n: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("acceptance {n:02} {name}: {verdict} ({detail})");
    assert!(ok, "acceptance {n:02} {name}: FAIL ({detail})");
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit(row: &[f64]) -> Vec<f64> {
    let n = dot(row, row).sqrt();
    row.iter().map(|v| v / n).collect()
}

/// Cosine of anchor to every other row, divided by tau, as exp-sum over an
/// index set. No max shift: test inputs keep |s|/tau small enough for f64.
fn exp_sum(units: &[Vec<f64>], anchor: usize, set: &[usize], tau: f64) -> f64 {
    set.iter()
        .map(|&j| (dot(&units[anchor], &units[j]) / tau).exp())
        .sum()
}

/// Set-enumeration oracle for one anchor at one level. Builds P_level, the
/// deeper ranks, and N as explicit index sets, then takes the literal
/// log-ratio. None when the batch holds no member of P_level.
pub fn oracle_level(
    rows: &[Vec<f64>],
    labels: &[usize],
    table: &RankingTable,
    taus: &TemperatureSchedule,
    anchor: usize,
    level: usize,
) -> Option<f64> {
    let units: Vec<Vec<f64>> = rows.iter().map(|r| unit(r)).collect();
    let mut positives = Vec::new();
    let mut denominator = Vec::new();
    for j in 0..rows.len() {
        if j == anchor {
            continue;
        }
        let rank = table.rank_of(labels[anchor], labels[j]).unwrap();
        let in_level = rank == Rank::Level(level);
        let survives = match rank {
            Rank::Level(l) => l >= level,
            Rank::Negative => true,
        };
        if in_level {
            positives.push(j);
        }
        if survives {
            denominator.push(j);
        }
    }
    if positives.is_empty() {
        return None;
    }
    let tau = taus.tau(level);
    let num = exp_sum(&units, anchor, &positives, tau);
    let den = exp_sum(&units, anchor, &denominator, tau);
    Some((den / num).ln())
}

/// Full-loss oracle: per level, the mean over anchors active at that level;
/// the total is the sum of level means. Returns (total, per-level means).
pub fn oracle_total(
    rows: &[Vec<f64>],
    labels: &[usize],
    table: &RankingTable,
    taus: &TemperatureSchedule,
) -> (f64, Vec<f64>) {
    let mut per_level = Vec::with_capacity(taus.len());
    for level in 1..=taus.len() {
        let values: Vec<f64> = (0..rows.len())
            .filter_map(|a| oracle_level(rows, labels, table, taus, a, level))
            .collect();
        if values.is_empty() {
            per_level.push(0.0);
        } else {
            per_level.push(values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    (per_level.iter().sum(), per_level)
}

/// Brute-force supervised contrastive loss: for each anchor with at least one
/// same-class partner, -log of (same-class exp mass / all-others exp mass),
/// averaged over those anchors.
pub fn brute_supcon(rows: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let units: Vec<Vec<f64>> = rows.iter().map(|r| unit(r)).collect();
    let mut per_anchor = Vec::new();
    for q in 0..rows.len() {
        let positives: Vec<usize> = (0..rows.len())
            .filter(|&j| j != q && labels[j] == labels[q])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let everyone: Vec<usize> = (0..rows.len()).filter(|&j| j != q).collect();
        let num = exp_sum(&units, q, &positives, tau);
        let den = exp_sum(&units, q, &everyone, tau);
        per_anchor.push((den / num).ln());
    }
    if per_anchor.is_empty() {
        0.0
    } else {
        per_anchor.iter().sum::<f64>() / per_anchor.len() as f64
    }
}

/// Pairwise Mann-Whitney statistic: P(in > out) + 0.5 P(in == out).
pub fn mann_whitney(in_scores: &[f64], out_scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &i in in_scores {
        for &o in out_scores {
            if i > o {
                wins += 1.0;
            } else if i == o {
                wins += 0.5;
            }
        }
    }
    wins / (in_scores.len() * out_scores.len()) as f64
}

pub fn random_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

/// Random labels with at least one same-class pair, so the batch can always
/// form a loss (an all-singleton batch is a contract error by design).
pub fn random_labels(rng: &mut ChaCha8Rng, b: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
    if b >= 2 {
        labels[1] = labels[0];
    }
    labels
}

/// Random directional table with depth <= max_depth. Each class ranks a random
/// prefix of the others split into contiguous sets, so multi-class (tied) sets
/// occur routinely; the remainder are negatives.
pub fn random_table(rng: &mut ChaCha8Rng, classes: usize, max_depth: usize) -> RankingTable {
    let names: Vec<String> = (0..classes).map(|c| format!("class{c}")).collect();
    let mut ranks = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut others: Vec<usize> = (0..classes).filter(|&o| o != c).collect();
        others.shuffle(rng);
        let listed_sets = rng.random_range(0..max_depth);
        let mut sets: Vec<Vec<usize>> = Vec::new();
        if listed_sets > 0 && !others.is_empty() {
            let take = rng.random_range(listed_sets.min(others.len())..=others.len());
            let mut pool = others[..take].to_vec();
            for remaining_sets in (1..=listed_sets.min(take)).rev() {
                let spare = pool.len() - remaining_sets;
                let size = 1 + if spare > 0 { rng.random_range(0..=spare) } else { 0 };
                sets.push(pool.drain(..size).collect());
            }
        }
        ranks.push(sets);
    }
    RankingTable::from_ids(&names, ranks).unwrap()
}

pub fn tensor(rows: &[Vec<f64>], requires_grad: bool) -> Tensor {
    let b = rows.len();
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, &[b, d], requires_grad).unwrap()
}

/// A scratch directory under the system temp root, cleared of stale state.
pub fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("rankcl-acceptance-{name}"));
    std::fs::remove_dir_all(&dir).ok();
    dir
}
