//! Serializable run outputs: evaluation reports, loss curves, projections.
//!
//! Every artifact embeds the config hash and seed so outputs can be traced
//! back to the exact run that produced them, and identical runs produce
//! byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::RocCurve;

/// Hex-encoded SHA-256 of the resolved run config.
pub type ConfigHash = String;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodReport {
    pub auroc: f64,
    pub in_count: usize,
    pub out_count: usize,
    pub withheld: Vec<String>,
    /// which score produced the curve: "prototype_cosine" or "max_softmax"
    pub score: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: ConfigHash,
    pub seed: u64,
    pub method: String,
    pub probe: Option<String>,
    pub knn: Option<ProbeReport>,
    pub linear: Option<ProbeReport>,
    pub ordering_fraction: Option<f64>,
    pub ood: Option<OodReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_json())
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.12}")
    }
}

/// Loss-curve CSV: a comment header with provenance, then one row per step
/// with the total and each per-level term.
pub fn loss_csv(
    config_hash: &str,
    seed: u64,
    levels: usize,
    rows: &[(usize, f64, Vec<f64>)],
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# config_hash={config_hash} seed={seed}");
    let mut header = String::from("step,total");
    for i in 1..=levels {
        let _ = write!(header, ",l_{i}");
    }
    let _ = writeln!(out, "{header}");
    for (step, total, per_level) in rows {
        let _ = write!(out, "{step},{}", fmt_f64(*total));
        for i in 0..levels {
            let v = per_level.get(i).copied().unwrap_or(f64::NAN);
            let _ = write!(out, ",{}", fmt_f64(v));
        }
        out.push('\n');
    }
    out
}

/// 2D projection CSV: id, x, y, label per embedding row.
pub fn projection_csv(config_hash: &str, seed: u64, points: &[[f64; 2]], labels: &[usize]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# config_hash={config_hash} seed={seed}");
    let _ = writeln!(out, "id,x,y,label");
    for (i, (p, l)) in points.iter().zip(labels).enumerate() {
        let _ = writeln!(out, "{i},{},{},{l}", fmt_f64(p[0]), fmt_f64(p[1]));
    }
    out
}

/// ROC curve CSV: one fpr,tpr row per threshold point.
pub fn roc_csv(config_hash: &str, seed: u64, curve: &RocCurve) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# config_hash={config_hash} seed={seed} auroc={}", fmt_f64(curve.auroc));
    let _ = writeln!(out, "fpr,tpr");
    for (fpr, tpr) in &curve.points {
        let _ = writeln!(out, "{},{}", fmt_f64(*fpr), fmt_f64(*tpr));
    }
    out
}

/// Per-sample OOD score CSV. `is_in` is 1 for known-class samples.
pub fn scores_csv(config_hash: &str, seed: u64, rows: &[(f64, bool)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# config_hash={config_hash} seed={seed}");
    let _ = writeln!(out, "score,is_in");
    for (score, is_in) in rows {
        let _ = writeln!(out, "{},{}", fmt_f64(*score), u8::from(*is_in));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_json_round_trip() {
        let report = EvalReport {
            config_hash: "ab".repeat(32),
            seed: 7,
            method: "ranked".into(),
            probe: Some("knn".into()),
            knn: Some(ProbeReport {
                accuracy: 0.9,
                per_class: vec![1.0, 0.8],
            }),
            linear: None,
            ordering_fraction: Some(0.95),
            ood: Some(OodReport {
                auroc: 0.75,
                in_count: 10,
                out_count: 4,
                withheld: vec!["truck".into()],
                score: "prototype_cosine".into(),
            }),
        };
        let text = report.to_json();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.knn.unwrap().per_class, vec![1.0, 0.8]);
        assert_eq!(back.ood.unwrap().withheld, vec!["truck".to_string()]);
    }

    #[test]
    fn loss_csv_layout() {
        let rows = vec![(0, 1.5, vec![1.0, 0.5]), (1, 1.2, vec![0.8, 0.4])];
        let text = loss_csv("deadbeef", 3, 2, &rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_hash=deadbeef seed=3");
        assert_eq!(lines[1], "step,total,l_1,l_2");
        assert!(lines[2].starts_with("0,1.5000000000"));
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn csv_is_deterministic() {
        let rows = vec![(0, 0.123456789012345, vec![0.1])];
        let a = loss_csv("x", 1, 1, &rows);
        let b = loss_csv("x", 1, 1, &rows);
        assert_eq!(a, b);
        let points = vec![[1.0 / 3.0, 2.0 / 3.0]];
        assert_eq!(
            projection_csv("x", 1, &points, &[0]),
            projection_csv("x", 1, &points, &[0])
        );
    }

    #[test]
    fn roc_csv_has_auroc_in_header() {
        let curve = RocCurve {
            points: vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)],
            auroc: 1.0,
        };
        let text = roc_csv("h", 2, &curve);
        assert!(text.starts_with("# config_hash=h seed=2 auroc=1.000000000000"));
        assert!(text.contains("fpr,tpr"));
        assert_eq!(text.lines().count(), 5);
    }
}
