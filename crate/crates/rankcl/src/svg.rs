//! Minimal SVG writers for the two plots the CLI emits: an ROC curve and a
//! labeled 2D scatter. No drawing dependencies; the output is plain text.

use std::fmt::Write as _;

use crate::eval::RocCurve;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
];

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{title}</text>",
        WIDTH / 2.0
    );
    s
}

fn axes(s: &mut String, x_label: &str, y_label: &str) {
    let x0 = MARGIN;
    let y0 = HEIGHT - MARGIN;
    let x1 = WIDTH - MARGIN;
    let y1 = MARGIN;
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{x_label}</text>",
        (x0 + x1) / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        s,
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 18 {})\">{y_label}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
}

/// ROC curve in the unit square with the AUROC shown in the title.
pub fn roc_svg(curve: &RocCurve) -> String {
    let mut s = header(&format!("ROC (AUROC = {:.4})", curve.auroc));
    axes(&mut s, "false positive rate", "true positive rate");
    let span = WIDTH - 2.0 * MARGIN;
    let to_px = |x: f64, y: f64| {
        (
            MARGIN + x * span,
            HEIGHT - MARGIN - y * (HEIGHT - 2.0 * MARGIN),
        )
    };
    // chance diagonal
    let (dx0, dy0) = to_px(0.0, 0.0);
    let (dx1, dy1) = to_px(1.0, 1.0);
    let _ = writeln!(
        s,
        "<line x1=\"{dx0}\" y1=\"{dy0}\" x2=\"{dx1}\" y2=\"{dy1}\" stroke=\"#bbbbbb\" stroke-dasharray=\"4 4\"/>"
    );
    let mut path = String::new();
    for (i, &(fpr, tpr)) in curve.points.iter().enumerate() {
        let (px, py) = to_px(fpr, tpr);
        let _ = write!(path, "{}{px:.2},{py:.2}", if i == 0 { "M" } else { " L" });
    }
    let _ = writeln!(
        s,
        "<path d=\"{path}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>"
    );
    for &(x, label) in &[(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let (px, _) = to_px(x, 0.0);
        let _ = writeln!(
            s,
            "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>",
            HEIGHT - MARGIN + 18.0
        );
        let (_, py) = to_px(0.0, x);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{py}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>",
            MARGIN - 8.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// 2D scatter of projected embeddings, one color per class, with a legend.
pub fn scatter_svg(points: &[[f64; 2]], labels: &[usize], names: &[String], title: &str) -> String {
    let mut s = header(title);
    axes(&mut s, "component 1", "component 2");
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        min_x = min_x.min(p[0]);
        max_x = max_x.max(p[0]);
        min_y = min_y.min(p[1]);
        max_y = max_y.max(p[1]);
    }
    let pad_x = ((max_x - min_x) * 0.05).max(1e-9);
    let pad_y = ((max_y - min_y) * 0.05).max(1e-9);
    min_x -= pad_x;
    max_x += pad_x;
    min_y -= pad_y;
    max_y += pad_y;
    let to_px = |p: &[f64; 2]| {
        (
            MARGIN + (p[0] - min_x) / (max_x - min_x) * (WIDTH - 2.0 * MARGIN),
            HEIGHT - MARGIN - (p[1] - min_y) / (max_y - min_y) * (HEIGHT - 2.0 * MARGIN),
        )
    };
    for (p, &l) in points.iter().zip(labels) {
        let (px, py) = to_px(p);
        let color = PALETTE[l % PALETTE.len()];
        let _ = writeln!(
            s,
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.75\"/>"
        );
    }
    for (i, name) in names.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN + 8.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<circle cx=\"{}\" cy=\"{y}\" r=\"4\" fill=\"{color}\"/>",
            WIDTH - MARGIN + 12.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{name}</text>",
            WIDTH - MARGIN + 20.0,
            y + 3.5
        );
    }
    s.push_str("</svg>\n");
    s
}
