//! AUROC and metric aggregation.

use serde::{Deserialize, Serialize};

use crate::N_TASKS;

/// Area under the ROC curve as the Mann-Whitney statistic
/// `(wins + ties/2) / (n_pos · n_neg)` over positive-negative pairs.
///
/// Returns `None` when only one class is present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let (mut wins, mut ties) = (0u64, 0u64);
    let (mut n_pos, mut n_neg) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < order.len() && scores[order[j]].total_cmp(&s).is_eq() {
            if labels[order[j]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        // every negative strictly below this group loses to its positives
        wins += gp * n_neg;
        ties += gp * gn;
        n_pos += gp;
        n_neg += gn;
        i = j;
    }
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    Some(mann_whitney_ratio(wins, ties, n_pos, n_neg))
}

/// Shared final step so every pair-counting route divides identically.
pub fn mann_whitney_ratio(wins: u64, ties: u64, n_pos: u64, n_neg: u64) -> f64 {
    (wins as f64 + 0.5 * ties as f64) / (n_pos * n_neg) as f64
}

/// Test-set metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` marks a task whose evaluation split had a single class.
    pub auroc: Vec<Option<f64>>,
    pub mean_auroc: f64,
    /// Dispersion of the per-task values around `mean_auroc`.
    pub std_across_tasks: f64,
}

impl Metrics {
    pub fn from_scores(scores: &[[f64; N_TASKS]], labels: &[[u8; N_TASKS]]) -> Metrics {
        let auroc: Vec<Option<f64>> = (0..N_TASKS)
            .map(|k| {
                let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
                let l: Vec<u8> = labels.iter().map(|r| r[k]).collect();
                let a = auroc(&s, &l);
                if a.is_none() {
                    log::warn!("task {k}: single-class labels, AUROC undefined");
                }
                a
            })
            .collect();
        Metrics::from_per_task(auroc)
    }

    pub fn from_per_task(auroc: Vec<Option<f64>>) -> Metrics {
        let defined: Vec<f64> = auroc.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&defined);
        Metrics {
            auroc,
            mean_auroc: mean,
            std_across_tasks: std,
        }
    }
}

/// Population mean and standard deviation; NaN for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Metrics of one configuration aggregated over training seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub seeds: Vec<u64>,
    /// Per-task mean over seeds (ignoring undefined runs).
    pub auroc_mean: Vec<Option<f64>>,
    pub auroc_std: Vec<Option<f64>>,
    /// Mean over seeds of each run's mean AUROC.
    pub mean_auroc: f64,
    /// Standard deviation over seeds of each run's mean AUROC.
    pub std_across_seeds: f64,
    /// Mean over seeds of each run's across-task dispersion.
    pub std_across_tasks: f64,
}

impl SeedAggregate {
    pub fn new(seeds: Vec<u64>, runs: &[Metrics]) -> SeedAggregate {
        assert_eq!(seeds.len(), runs.len());
        let mut auroc_mean = Vec::with_capacity(N_TASKS);
        let mut auroc_std = Vec::with_capacity(N_TASKS);
        for k in 0..N_TASKS {
            let vals: Vec<f64> = runs.iter().filter_map(|m| m.auroc[k]).collect();
            if vals.is_empty() {
                auroc_mean.push(None);
                auroc_std.push(None);
            } else {
                let (m, s) = mean_std(&vals);
                auroc_mean.push(Some(m));
                auroc_std.push(Some(s));
            }
        }
        let means: Vec<f64> = runs.iter().map(|m| m.mean_auroc).collect();
        let (mean_auroc, std_across_seeds) = mean_std(&means);
        let task_std: Vec<f64> = runs.iter().map(|m| m.std_across_tasks).collect();
        SeedAggregate {
            seeds,
            auroc_mean,
            auroc_std,
            mean_auroc,
            std_across_seeds,
            std_across_tasks: mean_std(&task_std).0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]), Some(1.0));
    }

    #[test]
    fn three_wins_one_loss() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]), Some(0.75));
    }

    #[test]
    fn all_ties_is_half() {
        assert_eq!(auroc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]), Some(0.5));
    }

    #[test]
    fn single_class_undefined() {
        assert_eq!(auroc(&[0.1, 0.2], &[1, 1]), None);
        assert_eq!(auroc(&[], &[]), None);
    }

    #[test]
    fn undefined_tasks_excluded_from_mean() {
        let m = Metrics::from_per_task(vec![Some(0.8), None, Some(0.6)]);
        assert!((m.mean_auroc - 0.7).abs() < 1e-15);
        assert!((m.std_across_tasks - 0.1).abs() < 1e-12);
    }

    #[test]
    fn seed_aggregate() {
        let a = Metrics::from_per_task(vec![Some(0.6); N_TASKS]);
        let b = Metrics::from_per_task(vec![Some(0.8); N_TASKS]);
        let agg = SeedAggregate::new(vec![1, 2], &[a, b]);
        assert!((agg.mean_auroc - 0.7).abs() < 1e-12);
        assert!((agg.std_across_seeds - 0.1).abs() < 1e-12);
        assert!(agg.std_across_tasks.abs() < 1e-15);
    }
}
