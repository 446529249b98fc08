//! Evaluation statistics: AUROC, AUPRC, patient-level bootstrap confidence
//! intervals, curve export, and the model timing harness.

mod curves;
mod summary;

pub use curves::{curve_export, trapezoid_area, write_curve_csv, write_curve_svg, CurvePoint};
pub use summary::{render_summary_csv, render_summary_text, SummaryRow};

use serde::{Deserialize, Serialize};

use crate::seed;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("both classes must be present (got {positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("at least one positive is required")]
    NoPositives,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
}

/// Which ranking metric a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    Auroc,
    Auprc,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Auroc => "AUROC",
            MetricKind::Auprc => "AUPRC",
        }
    }

    pub fn compute(&self, scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
        match self {
            MetricKind::Auroc => auroc(scores, labels),
            MetricKind::Auprc => auprc(scores, labels),
        }
    }
}

/// Point estimate plus percentile-bootstrap confidence interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub point_estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
    pub n_patients: usize,
    /// Resamples rejected for containing a single class and redrawn.
    pub degenerate_redraws: usize,
    /// Percentile CIs on the observed sample contain the point estimate
    /// whenever every resample kept both classes; a `false` here is reported
    /// rather than treated as an error.
    pub ci_contains_point: bool,
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    (positives, labels.len() - positives)
}

/// Area under the ROC curve as the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, with half credit for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass {
            positives: n_pos,
            negatives: n_neg,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Midrank sum over positives, grouping tied scores.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the midrank (i+1 + j) / 2.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }

    let n_pos_f = n_pos as f64;
    let u = rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// Area under the precision–recall curve as average precision: the step
/// integral of precision over recall, with tied scores grouped at one cutoff.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    check_lengths(scores, labels)?;
    let (n_pos, _) = class_counts(labels);
    if n_pos == 0 {
        return Err(MetricsError::NoPositives);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut ap = 0.0f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                group_pos += 1;
            }
            j += 1;
        }
        tp += group_pos;
        fp += (j - i) - group_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Percentile bootstrap over patients: `n_bootstrap` resamples with
/// replacement, the metric recomputed per resample, and the CI taken from the
/// replicate distribution. Resamples that draw a single class are rejected
/// and redrawn, with the rejection count reported. Deterministic in `seed`;
/// replicate sub-seeds are indexed so results are independent of scheduling.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    metric: MetricKind,
    n_bootstrap: usize,
    level: f64,
    seed_value: u64,
) -> Result<MetricReport, MetricsError> {
    use rand::Rng;
    use rayon::prelude::*;

    check_lengths(scores, labels)?;
    let point_estimate = metric.compute(scores, labels)?;
    let n = scores.len();

    let replicates: Vec<(f64, usize)> = (0..n_bootstrap)
        .into_par_iter()
        .map(|rep| {
            let mut redraws = 0usize;
            loop {
                let mut rng = seed::rng(
                    seed_value,
                    &["bootstrap", &rep.to_string(), &redraws.to_string()],
                );
                let mut s = Vec::with_capacity(n);
                let mut l = Vec::with_capacity(n);
                for _ in 0..n {
                    let k = rng.gen_range(0..n);
                    s.push(scores[k]);
                    l.push(labels[k]);
                }
                match metric.compute(&s, &l) {
                    Ok(value) => return (value, redraws),
                    Err(_) => redraws += 1,
                }
            }
        })
        .collect();

    let degenerate_redraws = replicates.iter().map(|(_, r)| r).sum();
    let mut values: Vec<f64> = replicates.into_iter().map(|(v, _)| v).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite replicate"));

    let alpha = (1.0 - level) / 2.0;
    let ci_low = quantile_sorted(&values, alpha);
    let ci_high = quantile_sorted(&values, 1.0 - alpha);

    Ok(MetricReport {
        metric,
        point_estimate,
        ci_low,
        ci_high,
        level,
        n_bootstrap,
        seed: seed_value,
        n_patients: n,
        degenerate_redraws,
        ci_contains_point: ci_low <= point_estimate && point_estimate <= ci_high,
    })
}

/// Linear-interpolation quantile on a sorted slice (the common type-7 rule).
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Brute-force Mann–Whitney: enumerate every (positive, negative) pair.
    fn auroc_pairwise_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// Brute-force average precision: re-scan the full sample at every
    /// distinct descending cutoff.
    fn auprc_cutoff_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut cutoffs: Vec<f64> = scores.to_vec();
        cutoffs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        cutoffs.dedup();
        let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for t in cutoffs {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **s >= t && **l == 1)
                .count() as f64;
            let kept = scores.iter().filter(|s| **s >= t).count() as f64;
            let precision = tp / kept;
            let recall = tp / n_pos;
            ap += precision * (recall - prev_recall);
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn auroc_perfect_and_tied() {
        let perfect = auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(perfect, 1.0);
        let tied = auroc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap();
        assert_eq!(tied, 0.5);
    }

    #[test]
    fn auroc_four_point_fixture() {
        // Pairs (pos, neg): (0.35,0.1)+, (0.35,0.4)-, (0.8,0.1)+, (0.8,0.4)+ => 3/4.
        let value = auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((value - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auroc_rejects_single_class() {
        assert!(matches!(
            auroc(&[0.2, 0.3], &[1, 1]),
            Err(MetricsError::SingleClass { .. })
        ));
    }

    #[test]
    fn auprc_fixtures() {
        assert_eq!(auprc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        let v = auprc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((v - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn matches_oracles_on_random_instances_with_ties() {
        let mut rng = crate::seed::rng(2024, &["metrics-oracle"]);
        for case in 0..1000 {
            let n = rng.gen_range(4..=200);
            // Coarse score grid forces plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..25) as f64) / 24.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
            labels[0] = 1;
            labels[1] = 0;

            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_pairwise_oracle(&scores, &labels);
            assert_eq!(fast, slow, "auroc mismatch on case {case}");

            let fast_ap = auprc(&scores, &labels).unwrap();
            let slow_ap = auprc_cutoff_oracle(&scores, &labels);
            assert_eq!(fast_ap, slow_ap, "auprc mismatch on case {case}");
        }
    }

    #[test]
    fn auroc_is_a_rank_statistic() {
        let mut rng = crate::seed::rng(11, &["rank-invariance"]);
        for _ in 0..50 {
            let n = rng.gen_range(4..60);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
            labels[0] = 1;
            labels[1] = 0;
            let base = auroc(&scores, &labels).unwrap();
            // Strictly increasing transform preserves ranks.
            let squashed: Vec<f64> = scores.iter().map(|s| (s * 0.7).tanh() + 2.0).collect();
            assert_eq!(base, auroc(&squashed, &labels).unwrap());
            // Negation flips the ranking (no ties in these draws).
            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            assert!((auroc(&negated, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
        }
    }

    #[test]
    fn auprc_approaches_prevalence_for_random_scores() {
        let mut rng = crate::seed::rng(5, &["auprc-prevalence"]);
        let n = 10_000;
        let prevalence = 0.3;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(prevalence))).collect();
        let v = auprc(&scores, &labels).unwrap();
        assert!(
            (v - prevalence).abs() < 0.02,
            "AP {v} should be within 0.02 of prevalence {prevalence}"
        );
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let mut rng = crate::seed::rng(3, &["bootstrap-det"]);
        let scores: Vec<f64> = (0..80).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<u8> = (0..80).map(|i| u8::from(i % 3 == 0)).collect();
        let a = bootstrap_ci(&scores, &labels, MetricKind::Auroc, 1000, 0.95, 17).unwrap();
        let b = bootstrap_ci(&scores, &labels, MetricKind::Auroc, 1000, 0.95, 17).unwrap();
        assert_eq!(a.ci_low.to_bits(), b.ci_low.to_bits());
        assert_eq!(a.ci_high.to_bits(), b.ci_high.to_bits());
        assert_eq!(a.n_bootstrap, 1000);
        assert_eq!(a.level, 0.95);
        assert!(a.ci_low <= a.point_estimate && a.point_estimate <= a.ci_high);
    }

    #[test]
    fn bootstrap_replicate_mean_tracks_point_estimate() {
        // Well-separated synthetic cohort; replicate mean should sit close
        // to the point estimate relative to the CI spread.
        let mut rng = crate::seed::rng(9, &["bootstrap-mean"]);
        let n = 200;
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 4 == 0)).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| rng.gen::<f64>() * 0.8 + f64::from(l) * 0.5)
            .collect();
        let report = bootstrap_ci(&scores, &labels, MetricKind::Auroc, 1000, 0.95, 5).unwrap();
        let half_width = (report.ci_high - report.ci_low) / 2.0;
        assert!(half_width > 0.0);
        assert!(report.ci_contains_point);
        assert!((report.ci_high + report.ci_low) / 2.0 - report.point_estimate < half_width);
    }
}
