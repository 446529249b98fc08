//! Benchmark summary table: one row per architecture family with AUROC and
//! AUPRC (95% CIs) and the parameter count, mirroring the per-task report
//! layout.

use super::MetricReport;

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub family: String,
    pub task: String,
    pub auroc: MetricReport,
    pub auprc: MetricReport,
    pub parameter_count: u64,
}

fn fmt_metric(r: &MetricReport) -> String {
    format!(
        "{:.1} ({:.1}-{:.1})",
        r.point_estimate * 100.0,
        r.ci_low * 100.0,
        r.ci_high * 100.0
    )
}

fn fmt_params(count: u64) -> String {
    format!("{:.2}M", count as f64 / 1.0e6)
}

/// Machine-readable summary (comma-separated, one row per family).
pub fn render_summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "family,task,auroc,auroc_ci_low,auroc_ci_high,auprc,auprc_ci_low,auprc_ci_high,parameters\n",
    );
    for row in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            row.family,
            row.task,
            row.auroc.point_estimate,
            row.auroc.ci_low,
            row.auroc.ci_high,
            row.auprc.point_estimate,
            row.auprc.ci_low,
            row.auprc.ci_high,
            row.parameter_count,
        ));
    }
    out
}

/// Fixed-width table for terminals and logs.
pub fn render_summary_text(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:<6} {:<22} {:<22} {:>10}\n",
        "Family", "Task", "AUROC (95% CI)", "AUPRC (95% CI)", "# Params"
    ));
    out.push_str(&"-".repeat(78));
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{:<14} {:<6} {:<22} {:<22} {:>10}\n",
            row.family,
            row.task,
            fmt_metric(&row.auroc),
            fmt_metric(&row.auprc),
            fmt_params(row.parameter_count),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricKind;

    fn report(kind: MetricKind, value: f64) -> MetricReport {
        MetricReport {
            metric: kind,
            point_estimate: value,
            ci_low: value - 0.05,
            ci_high: value + 0.05,
            level: 0.95,
            n_bootstrap: 1000,
            seed: 1,
            n_patients: 100,
            degenerate_redraws: 0,
            ci_contains_point: true,
        }
    }

    #[test]
    fn renders_one_row_per_family() {
        let rows: Vec<SummaryRow> = ["ResNet18", "ViT"]
            .iter()
            .map(|f| SummaryRow {
                family: f.to_string(),
                task: "MSI".to_string(),
                auroc: report(MetricKind::Auroc, 0.8),
                auprc: report(MetricKind::Auprc, 0.5),
                parameter_count: 11_177_538,
            })
            .collect();
        let csv = render_summary_csv(&rows);
        assert_eq!(csv.lines().count(), 3); // header + 2 rows
        let text = render_summary_text(&rows);
        assert!(text.contains("ResNet18"));
        assert!(text.contains("11.18M"));
    }
}
