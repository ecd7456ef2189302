//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index and tensor name of the worst coordinate.
    pub worst: Option<(usize, String)>,
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` with central differences of `loss` at `n_coords`
/// coordinates drawn without replacement (all of them if fewer exist).
pub fn grad_check<F>(
    loss: F,
    params: &ModelParams,
    analytic: &[f64],
    n_coords: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    let n = params.n_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = sample(&mut rng, n, n_coords.min(n)).into_vec();
    coords.sort_unstable();
    grad_check_at(loss, params, analytic, &coords, step)
}

/// Compares `analytic` with central differences of `loss` at the given flat
/// coordinates.
pub fn grad_check_at<F>(
    loss: F,
    params: &ModelParams,
    analytic: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    let n = params.n_scalars();
    if analytic.len() != n {
        return Err(Error::Shape(format!("{} gradients for {n} parameters", analytic.len())));
    }
    if let Some(&i) = coords.iter().find(|&&i| i >= n) {
        return Err(Error::Shape(format!("coordinate {i} of {n}")));
    }
    let base = params.flatten();
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for &i in coords {
        let mut flat = base.clone();
        flat[i] = base[i] + step;
        work.set_flat(&flat)?;
        let up = loss(&work)?;
        flat[i] = base[i] - step;
        work.set_flat(&flat)?;
        let down = loss(&work)?;
        let numeric = (up - down) / (2.0 * step);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of {} (coordinate {i})",
                params.name_of_flat(i)
            )));
        }
        let e = rel_err(analytic[i], numeric);
        if report.worst.is_none() || e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((i, params.name_of_flat(i).to_string()));
        }
        report.checked += 1;
    }
    Ok(report)
}
