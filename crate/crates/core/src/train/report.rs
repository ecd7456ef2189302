//! Plain-text and Markdown renderings of metrics.

use std::fmt::Write;

use crate::{N_TASKS, TASK_NAMES};

use super::ablation::RowResult;
use super::metrics::Metrics;

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

fn fmt_pm(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        _ => "n/a".to_string(),
    }
}

/// Aligned two-column table of one run's test metrics.
pub fn metrics_table(m: &Metrics) -> String {
    let width = TASK_NAMES.iter().map(|n| n.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  AUROC", "task");
    for (name, a) in TASK_NAMES.iter().zip(&m.auroc) {
        let _ = writeln!(out, "{name:<width$}  {}", fmt_opt(*a));
    }
    let _ = writeln!(out, "{:<width$}  {:.3}", "mean", m.mean_auroc);
    let _ = writeln!(out, "{:<width$}  {:.3}", "std", m.std_across_tasks);
    out
}

/// Markdown table with one row per configuration: mean over seeds ± std
/// over seeds per task, then the mean AUROC ± its std over seeds.
pub fn markdown_table(first_col: &str, rows: &[RowResult]) -> String {
    let mut out = String::new();
    let _ = write!(out, "| {first_col} | Mean |");
    for t in TASK_NAMES {
        let _ = write!(out, " {t} |");
    }
    out.push('\n');
    out.push_str("|---|---|");
    out.push_str(&"---|".repeat(N_TASKS));
    out.push('\n');
    for r in rows {
        let a = &r.aggregate;
        let _ = write!(
            out,
            "| {} | {} |",
            r.name,
            fmt_pm(Some(a.mean_auroc), Some(a.std_across_seeds))
        );
        for k in 0..N_TASKS {
            let _ = write!(out, " {} |", fmt_pm(a.auroc_mean[k], a.auroc_std[k]));
        }
        out.push('\n');
    }
    out
}

/// Full report with the component-ablation table and the fusion table.
pub fn render_report(seeds: &[u64], ablation: &[RowResult], fusion: &[RowResult]) -> String {
    let seeds_txt: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
    let mut out = String::new();
    out.push_str("# AUROC report\n\n");
    let _ = writeln!(
        out,
        "Each cell is the mean ± standard deviation over {} training seeds ({}).",
        seeds.len(),
        seeds_txt.join(", ")
    );
    out.push_str("Test-set AUROC of the best-validation checkpoint.\n\n");
    out.push_str("## Embedding and tokenization ablations\n\n");
    out.push_str(&markdown_table("Configuration", ablation));
    out.push_str("\n## Fusion of time series and notes\n\n");
    out.push_str(&markdown_table("Fusion", fusion));
    out.push_str("\n## Dispersion across tasks\n\n");
    out.push_str("| Configuration | Std across tasks (mean over seeds) |\n|---|---|\n");
    for r in ablation.iter().chain(fusion) {
        let _ = writeln!(out, "| {} | {:.3} |", r.name, r.aggregate.std_across_tasks);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::metrics::SeedAggregate;

    fn row(name: &str, vals: &[f64]) -> RowResult {
        let runs: Vec<Metrics> = vals
            .iter()
            .map(|&v| Metrics::from_per_task(vec![Some(v); N_TASKS]))
            .collect();
        RowResult {
            name: name.into(),
            aggregate: SeedAggregate::new((0..vals.len() as u64).collect(), &runs),
            runs,
        }
    }

    #[test]
    fn table_has_one_row_per_configuration_and_ten_metric_columns() {
        let t = markdown_table(
            "Configuration",
            &[row("full", &[0.7, 0.8, 0.9]), row("behrt_like", &[0.6; 3])],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].matches('|').count(), 2 + 1 + N_TASKS);
        assert!(lines[2].starts_with("| full | 0.800 ± 0.082 |"));
        assert!(lines[3].starts_with("| behrt_like | 0.600 ± 0.000 |"));
    }

    #[test]
    fn undefined_task_rendered_as_na() {
        let mut m = Metrics::from_per_task(vec![Some(0.5); N_TASKS]);
        m.auroc[3] = None;
        assert!(metrics_table(&m).contains("Mortality"));
        assert!(metrics_table(&m).contains("n/a"));
    }
}
