//! ROC and PR curve export: point tables, CSV files, and SVG renderings.

use std::path::Path;

use super::{class_counts, MetricsError};
use crate::cohort::write_atomic;

/// One exported curve vertex (`x` = FPR or recall, `y` = TPR or precision).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
}

/// Exports the ROC staircase from (0,0) to (1,1) and the PR points at every
/// score cutoff, with tied scores grouped. The trapezoidal area over the ROC
/// points equals [`super::auroc`] to floating-point accuracy.
pub fn curve_export(
    scores: &[f64],
    labels: &[u8],
) -> Result<(Vec<CurvePoint>, Vec<CurvePoint>), MetricsError> {
    super::check_lengths(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass {
            positives: n_pos,
            negatives: n_neg,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut roc = vec![CurvePoint { x: 0.0, y: 0.0 }];
    let mut pr = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        roc.push(CurvePoint {
            x: fp as f64 / n_neg as f64,
            y: tp as f64 / n_pos as f64,
        });
        pr.push(CurvePoint {
            x: tp as f64 / n_pos as f64,
            y: tp as f64 / (tp + fp) as f64,
        });
        i = j;
    }
    Ok((roc, pr))
}

/// Trapezoidal area under a curve given as ordered points.
pub fn trapezoid_area(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].x - w[0].x) * (w[1].y + w[0].y) / 2.0)
        .sum()
}

/// Writes curve points as a two-column CSV with the given header names.
pub fn write_curve_csv(
    path: &Path,
    points: &[CurvePoint],
    x_name: &str,
    y_name: &str,
) -> std::io::Result<()> {
    let mut out = format!("{x_name},{y_name}\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.x, p.y));
    }
    write_atomic(path, out.as_bytes())
}

/// Renders curve points as a standalone SVG line plot. The caption carries
/// the CI band annotation so downstream tools never parse the drawing.
pub fn write_curve_svg(
    path: &Path,
    points: &[CurvePoint],
    title: &str,
    caption: &str,
) -> std::io::Result<()> {
    const SIZE: f64 = 480.0;
    const MARGIN: f64 = 48.0;
    let span = SIZE - 2.0 * MARGIN;
    let to_px = |p: &CurvePoint| {
        (
            MARGIN + p.x.clamp(0.0, 1.0) * span,
            SIZE - MARGIN - p.y.clamp(0.0, 1.0) * span,
        )
    };

    let mut poly = String::new();
    for p in points {
        let (x, y) = to_px(p);
        poly.push_str(&format!("{x:.2},{y:.2} "));
    }

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{span}\" height=\"{span}\" fill=\"none\" stroke=\"#888\"/>\n"
    ));
    // Chance diagonal for orientation.
    svg.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{}\" y2=\"{MARGIN}\" stroke=\"#ccc\" stroke-dasharray=\"4 4\"/>\n",
        SIZE - MARGIN,
        SIZE - MARGIN
    ));
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>\n",
        poly.trim_end()
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        SIZE / 2.0,
        xml_escape(title)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        SIZE / 2.0,
        SIZE - 10.0,
        xml_escape(caption)
    ));
    svg.push_str("</svg>\n");
    write_atomic(path, svg.as_bytes())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auroc;
    use rand::Rng;

    #[test]
    fn perfect_classifier_passes_through_corner() {
        let (roc, _) = curve_export(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert!(roc.contains(&CurvePoint { x: 0.0, y: 1.0 }));
        assert_eq!(roc.first().unwrap(), &CurvePoint { x: 0.0, y: 0.0 });
        assert_eq!(roc.last().unwrap(), &CurvePoint { x: 1.0, y: 1.0 });
    }

    #[test]
    fn roc_trapezoid_area_equals_auroc() {
        let mut rng = crate::seed::rng(31, &["roc-area"]);
        for _ in 0..200 {
            let n = rng.gen_range(4..=120);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..12) as f64) / 11.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
            labels[0] = 1;
            labels[1] = 0;
            let (roc, _) = curve_export(&scores, &labels).unwrap();
            let area = trapezoid_area(&roc);
            let reference = auroc(&scores, &labels).unwrap();
            assert!(
                (area - reference).abs() < 1e-9,
                "area {area} vs auroc {reference}"
            );
            // Staircase must be monotone in both axes.
            for w in roc.windows(2) {
                assert!(w[1].x >= w[0].x && w[1].y >= w[0].y);
            }
        }
    }

    #[test]
    fn pr_first_point_is_top1_precision() {
        let (_, pr) = curve_export(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        // Highest score 0.8 is a positive: precision at top-1 is 1.0.
        assert_eq!(pr[0].y, 1.0);
        assert_eq!(pr[0].x, 0.5);
    }
}
