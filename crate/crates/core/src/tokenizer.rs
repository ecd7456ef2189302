//! Event streams to token sequences.
//!
//! Values and timestamps are z-scored with training-split statistics.
//! Positional indices are the dense rank of each token's timestamp within the
//! encounter, so events recorded at the same instant share one index and the
//! index grows by exactly one at every new distinct timestamp.

use serde::{Deserialize, Serialize};

use crate::data::EncounterRecord;
use crate::error::{Error, Result};

/// Guard for zero-variance channels.
pub const NORM_EPS: f64 = 1e-8;
pub const DEFAULT_MAX_LEN: usize = 4096;

/// Names of the fourteen intraoperative vital-sign channels.
pub const DEFAULT_VARIABLES: [&str; 14] = [
    "systolic_bp",
    "diastolic_bp",
    "mean_arterial_pressure",
    "heart_rate",
    "respiratory_rate",
    "oxygen_flow_rate",
    "fio2",
    "spo2",
    "etco2",
    "mac",
    "peep",
    "peak_inspiratory_pressure",
    "tidal_volume",
    "body_temperature",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    /// Name of variable `i` at index `i`.
    pub names: Vec<String>,
}

impl Vocab {
    pub fn new(names: Vec<String>) -> Self {
        Vocab { names }
    }

    /// The default vital-sign names, extended with `var_<i>` past fourteen.
    pub fn default_for(n: usize) -> Self {
        Vocab {
            names: (0..n)
                .map(|i| {
                    DEFAULT_VARIABLES
                        .get(i)
                        .map_or_else(|| format!("var_{i}"), |s| s.to_string())
                })
                .collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    pub const UNIT: Moments = Moments { mean: 0.0, std: 1.0 };

    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std.max(NORM_EPS)
    }

    /// Population mean and standard deviation.
    pub fn of(xs: &[f64]) -> Option<Moments> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Moments { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub variables: Vec<Moments>,
    pub time: Moments,
    /// Variables with no training events; they were given unit moments.
    #[serde(default)]
    pub missing_variables: Vec<usize>,
    /// Moments of each static feature, used to standardize them before the
    /// static projection.
    #[serde(default)]
    pub static_features: Vec<Moments>,
}

impl NormStats {
    pub fn n_variables(&self) -> usize {
        self.variables.len()
    }
}

/// Per-variable and timestamp moments over the training records.
pub fn fit_norm_stats(train: &[EncounterRecord], n_variables: usize) -> NormStats {
    let mut per_var: Vec<Vec<f64>> = vec![Vec::new(); n_variables];
    let mut times = Vec::new();
    for r in train {
        for e in &r.events {
            if let Some(v) = per_var.get_mut(e.variable_id) {
                v.push(e.value);
            }
            times.push(e.timestamp);
        }
    }
    let mut missing = Vec::new();
    let variables = per_var
        .iter()
        .enumerate()
        .map(|(i, xs)| {
            Moments::of(xs).unwrap_or_else(|| {
                log::warn!("variable {i} has no training events; using mean 0, std 1");
                missing.push(i);
                Moments::UNIT
            })
        })
        .collect();
    let n_static = train.first().map_or(0, |r| r.static_features.len());
    let static_features = (0..n_static)
        .map(|j| {
            let xs: Vec<f64> = train.iter().filter_map(|r| r.static_features.get(j).copied()).collect();
            Moments::of(&xs).unwrap_or(Moments::UNIT)
        })
        .collect();
    NormStats {
        variables,
        time: Moments::of(&times).unwrap_or(Moments::UNIT),
        missing_variables: missing,
        static_features,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenSequence {
    pub variable_ids: Vec<usize>,
    pub values: Vec<f64>,
    pub times: Vec<f64>,
    pub positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.variable_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variable_ids.is_empty()
    }

    /// Number of distinct positional indices.
    pub fn span(&self) -> usize {
        self.positions.last().map_or(0, |&p| p + 1)
    }
}

/// Dense ranks of `timestamps`: equal values share a rank, ranks start at 0
/// and increase by one per distinct value.
pub fn assign_positions(timestamps: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = timestamps.iter().position(|t| t.is_nan()) {
        return Err(Error::Input(format!("timestamp {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..timestamps.len()).collect();
    order.sort_by(|&a, &b| timestamps[a].total_cmp(&timestamps[b]));
    let mut ranks = vec![0; timestamps.len()];
    let mut rank = 0;
    for (k, &i) in order.iter().enumerate() {
        if k > 0 && timestamps[i] != timestamps[order[k - 1]] {
            rank += 1;
        }
        ranks[i] = rank;
    }
    Ok(ranks)
}

pub fn tokenize(record: &EncounterRecord, stats: &NormStats, max_len: usize) -> Result<TokenSequence> {
    let n_vars = stats.n_variables();
    if let Some(e) = record.events.iter().find(|e| e.variable_id >= n_vars) {
        return Err(Error::Input(format!(
            "{}: unknown variable id {} (vocabulary size {n_vars})",
            record.id, e.variable_id
        )));
    }
    let mut events = record.events.clone();
    // a total order, so that truncation does not depend on input order
    events.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then(a.variable_id.cmp(&b.variable_id))
            .then(a.value.total_cmp(&b.value))
    });
    if events.len() > max_len {
        events.drain(..events.len() - max_len);
    }
    let raw_times: Vec<f64> = events.iter().map(|e| e.timestamp).collect();
    let positions = assign_positions(&raw_times)?;
    Ok(TokenSequence {
        variable_ids: events.iter().map(|e| e.variable_id).collect(),
        values: events
            .iter()
            .map(|e| stats.variables[e.variable_id].normalize(e.value))
            .collect(),
        times: raw_times.iter().map(|&t| stats.time.normalize(t)).collect(),
        positions,
    })
}
