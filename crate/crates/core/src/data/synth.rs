//! Seeded synthetic encounters with planted label signals.
//!
//! Every encounter is generated from its own RNG stream (seed mixed with the
//! encounter index), so generation parallelizes without changing output.
//!
//! Each variable is sampled as a renewal process with exponential
//! inter-arrival times over a fixed window measured in "unit" time. The whole
//! encounter is then stretched by a per-encounter tempo factor, which changes
//! the time gaps but leaves the interleaving of events (and therefore every
//! positional index) untouched. Bedside-monitor clusters are made by snapping
//! a sample onto the nearest sample of the preceding variable.
//!
//! Labels follow a logistic model. For task `k` the logit is
//!
//! ```text
//! intercept_k + value_k·z_value(k) + time_gap_k·z_gap
//!             + note_k·z_note(k) + interaction_k·z_value(k)·z_note(k)
//! ```
//!
//! where `z_value(k)` is the standardized mean of variable `k`'s values,
//! `z_gap` the standardized log mean gap between distinct timestamps, and
//! `z_note(k)` the standardized projection of the mean note embedding on a
//! fixed direction. Standardizing moments and intercepts are fitted on a
//! calibration sample so that label rates match the configured prevalence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, EncounterRecord, Event};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::sigmoid;
use crate::tokenizer::Moments;
use crate::train::metrics::auroc;
use crate::N_TASKS;

/// Label rates of the nine postoperative outcomes in the surgical cohort.
pub const COHORT_PREVALENCE: [f64; N_TASKS] = [0.2329, 0.1309, 0.0864, 0.0200, 0.1348, 0.1509, 0.0820, 0.1218, 0.0451];

pub const STATIC_DIM: usize = 4;
const BASE_TIMESTAMP: f64 = 1_600_000_000.0;
const NOTE_NOISE: f64 = 0.5;
const VALUE_NOISE: f64 = 0.5;
const P_NO_NOTES: f64 = 0.1;

const STREAM_ENCOUNTER: u64 = 1;
const STREAM_CALIBRATION: u64 = 2;
const STREAM_ORACLE: u64 = 3;
const STREAM_DIRECTIONS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalStrengths {
    pub value: [f64; N_TASKS],
    pub time_gap: [f64; N_TASKS],
    pub note: [f64; N_TASKS],
    /// Coefficient of the note × value product term.
    pub interaction: [f64; N_TASKS],
}

impl Default for SignalStrengths {
    fn default() -> Self {
        SignalStrengths {
            value: [1.0; N_TASKS],
            time_gap: [0.5; N_TASKS],
            note: [0.5; N_TASKS],
            interaction: [0.0; N_TASKS],
        }
    }
}

impl SignalStrengths {
    pub fn zero() -> Self {
        SignalStrengths {
            value: [0.0; N_TASKS],
            time_gap: [0.0; N_TASKS],
            note: [0.0; N_TASKS],
            interaction: [0.0; N_TASKS],
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        let s = |a: &[f64; N_TASKS]| a.map(|x| x * f);
        SignalStrengths {
            value: s(&self.value),
            time_gap: s(&self.time_gap),
            note: s(&self.note),
            interaction: s(&self.interaction),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_encounters: usize,
    pub n_variables: usize,
    /// Mean sampling interval of each variable, in seconds at tempo 1.
    pub rates: Vec<f64>,
    /// Observation window in seconds at tempo 1.
    pub window_seconds: f64,
    /// Log-normal spread of the per-encounter tempo.
    pub tempo_sigma: f64,
    pub dup_cluster_prob: f64,
    pub prevalence: [f64; N_TASKS],
    pub signal_strengths: SignalStrengths,
    pub note_dim: usize,
    pub max_notes: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub calibration_samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_encounters: 5000,
            n_variables: 14,
            rates: vec![
                900.0, 900.0, 900.0, 720.0, 1080.0, 1200.0, 1200.0, 900.0, 1200.0, 2700.0, 2700.0, 2160.0, 2160.0,
                3600.0,
            ],
            window_seconds: 3600.0,
            tempo_sigma: 0.6,
            dup_cluster_prob: 0.3,
            prevalence: COHORT_PREVALENCE,
            signal_strengths: SignalStrengths::default(),
            note_dim: 16,
            max_notes: 4,
            split: [0.7, 0.15, 0.15],
            calibration_samples: 50_000,
        }
    }
}

/// Named synthetic tasks used by the tests and the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Default,
    /// Labels independent of all inputs.
    ZeroSignal,
    /// Strong time-series signal (values and time gaps), no note signal.
    StrongSignal,
    /// Signal dominated by the time-gap component.
    TimeGap,
    /// Signal dominated by the note × value interaction.
    CrossModal,
}

impl Preset {
    pub fn config(self, seed: u64, n_encounters: usize) -> SynthConfig {
        let mut c = SynthConfig {
            seed,
            n_encounters,
            ..SynthConfig::default()
        };
        c.signal_strengths = match self {
            Preset::Default => SignalStrengths::default(),
            Preset::ZeroSignal => SignalStrengths::zero(),
            Preset::StrongSignal => SignalStrengths {
                value: [2.6; N_TASKS],
                time_gap: [1.5; N_TASKS],
                note: [0.0; N_TASKS],
                interaction: [0.0; N_TASKS],
            },
            Preset::TimeGap => SignalStrengths {
                value: [1.0; N_TASKS],
                time_gap: [2.0; N_TASKS],
                note: [0.0; N_TASKS],
                interaction: [0.0; N_TASKS],
            },
            Preset::CrossModal => SignalStrengths {
                value: [0.8; N_TASKS],
                time_gap: [0.0; N_TASKS],
                note: [0.8; N_TASKS],
                interaction: [1.6; N_TASKS],
            },
        };
        c
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_encounters == 0 {
            return Err(Error::Config("n_encounters must be positive".into()));
        }
        for (k, &p) in self.prevalence.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("prevalence[{k}] out of (0,1): {p}")));
            }
        }
        if self.n_variables == 0 {
            return Err(Error::Config("n_variables must be positive".into()));
        }
        if self.rates.len() != self.n_variables {
            return Err(Error::Config(format!(
                "rates has {} entries, expected n_variables = {}",
                self.rates.len(),
                self.n_variables
            )));
        }
        if let Some(k) = self.rates.iter().position(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("rates[{k}] must be positive")));
        }
        if !(self.window_seconds > 0.0 && self.window_seconds.is_finite()) {
            return Err(Error::Config("window_seconds must be positive".into()));
        }
        if !(self.tempo_sigma >= 0.0 && self.tempo_sigma.is_finite()) {
            return Err(Error::Config("tempo_sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.dup_cluster_prob) {
            return Err(Error::Config("dup_cluster_prob out of [0,1]".into()));
        }
        if self.note_dim == 0 {
            return Err(Error::Config("note_dim must be positive".into()));
        }
        if self.split.iter().any(|&f| f.is_nan() || f < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "split fractions must be non-negative and sum to 1".into(),
            ));
        }
        if self.calibration_samples < 1000 {
            return Err(Error::Config("calibration_samples must be at least 1000".into()));
        }
        let s = &self.signal_strengths;
        for arr in [&s.value, &s.time_gap, &s.note, &s.interaction] {
            if arr.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("signal_strengths must be finite".into()));
            }
        }
        Ok(())
    }

    fn value_base(v: usize) -> f64 {
        60.0 + 7.0 * v as f64
    }

    fn value_scale(v: usize) -> f64 {
        4.0 + 0.5 * v as f64
    }
}

/// SplitMix64 finalizer over (seed, stream, index).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Raw (unstandardized) label features of one encounter.
#[derive(Debug, Clone)]
struct RawFeatures {
    value: [Option<f64>; N_TASKS],
    log_gap: Option<f64>,
    note: [Option<f64>; N_TASKS],
}

struct Draw {
    record: EncounterRecord,
    features: RawFeatures,
    label_uniforms: [f64; N_TASKS],
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_encounter(cfg: &SynthConfig, directions: &[Vec<f64>], rng: &mut ChaCha8Rng, id: String) -> Draw {
    let n_vars = cfg.n_variables;
    let tempo = (cfg.tempo_sigma * normal(rng)).exp();

    // unit-time renewal processes
    let mut unit_times: Vec<Vec<f64>> = Vec::with_capacity(n_vars);
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(n_vars);
    for v in 0..n_vars {
        let level = normal(rng);
        let gap = Exp::new(1.0 / cfg.rates[v]).expect("positive rate");
        let mut t = 0.0;
        let mut ts = Vec::new();
        let mut vs = Vec::new();
        loop {
            t += gap.sample(rng);
            if t >= cfg.window_seconds {
                break;
            }
            ts.push(t);
            vs.push(SynthConfig::value_base(v) + SynthConfig::value_scale(v) * (level + VALUE_NOISE * normal(rng)));
        }
        unit_times.push(ts);
        values.push(vs);
    }

    // monitor clusters: snap onto the nearest sample of the previous variable
    for v in 1..n_vars {
        let (prev, cur) = unit_times.split_at_mut(v);
        let prev = &prev[v - 1];
        for t in cur[0].iter_mut() {
            let snap = rng.random::<f64>() < cfg.dup_cluster_prob;
            if snap && !prev.is_empty() {
                let i = prev.partition_point(|&p| p < *t);
                let cand = [i.checked_sub(1), (i < prev.len()).then_some(i)];
                let nearest = cand
                    .into_iter()
                    .flatten()
                    .min_by(|&a, &b| (prev[a] - *t).abs().total_cmp(&(prev[b] - *t).abs()))
                    .expect("non-empty");
                *t = prev[nearest];
            }
        }
        // values are exchangeable within a variable, so only times need reordering
        cur[0].sort_by(f64::total_cmp);
    }

    let mut events = Vec::new();
    let mut value_feat = [None; N_TASKS];
    for v in 0..n_vars {
        for (&u, &x) in unit_times[v].iter().zip(&values[v]) {
            events.push(Event {
                variable_id: v,
                value: x,
                timestamp: BASE_TIMESTAMP + tempo * u,
            });
        }
    }
    for (k, f) in value_feat.iter_mut().enumerate() {
        let v = k % n_vars;
        if !values[v].is_empty() {
            let m = values[v]
                .iter()
                .map(|x| (x - SynthConfig::value_base(v)) / SynthConfig::value_scale(v))
                .sum::<f64>()
                / values[v].len() as f64;
            *f = Some(m);
        }
    }

    let mut distinct: Vec<f64> = events.iter().map(|e| e.timestamp).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let log_gap = (distinct.len() >= 2).then(|| {
        let span = distinct[distinct.len() - 1] - distinct[0];
        (span / (distinct.len() - 1) as f64).ln()
    });

    let age = (51.0 + 15.0 * normal(rng)).clamp(18.0, 106.0);
    let male = rng.random::<f64>() < 0.48;
    let bmi = (28.0 + 6.0 * normal(rng)).clamp(15.0, 60.0);
    let static_features = vec![age, male as u8 as f64, (!male) as u8 as f64, bmi];

    let n_notes = if rng.random::<f64>() < P_NO_NOTES {
        0
    } else {
        rng.random_range(1..=cfg.max_notes.max(1))
    };
    let latent: Vec<f64> = (0..cfg.note_dim).map(|_| normal(rng)).collect();
    let notes: Vec<Vec<f64>> = (0..n_notes)
        .map(|_| latent.iter().map(|z| z + NOTE_NOISE * normal(rng)).collect())
        .collect();
    let mut note_feat = [None; N_TASKS];
    if !notes.is_empty() {
        let mean: Vec<f64> = (0..cfg.note_dim)
            .map(|j| notes.iter().map(|n| n[j]).sum::<f64>() / notes.len() as f64)
            .collect();
        for (k, f) in note_feat.iter_mut().enumerate() {
            *f = Some(crate::tensor::dot(&directions[k], &mean));
        }
    }

    let mut label_uniforms = [0.0; N_TASKS];
    label_uniforms.iter_mut().for_each(|u| *u = rng.random::<f64>());

    Draw {
        record: EncounterRecord {
            id,
            static_features,
            events,
            notes,
            labels: [0; N_TASKS],
        },
        features: RawFeatures {
            value: value_feat,
            log_gap,
            note: note_feat,
        },
        label_uniforms,
    }
}

/// The generator's label model, fitted once per config.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    strengths: SignalStrengths,
    value: [Moments; N_TASKS],
    gap: Moments,
    note: [Moments; N_TASKS],
    pub intercepts: [f64; N_TASKS],
    directions: Vec<Vec<f64>>,
}

fn standardize(m: &Moments, x: Option<f64>) -> f64 {
    match x {
        Some(x) if m.std > 0.0 => (x - m.mean) / m.std,
        _ => 0.0,
    }
}

impl GroundTruth {
    pub fn fit(cfg: &SynthConfig, exec: Exec) -> Result<GroundTruth> {
        cfg.validate()?;
        let directions = note_directions(cfg);
        let feats: Vec<RawFeatures> = exec.map(cfg.calibration_samples, |i| {
            let mut rng = stream_rng(cfg.seed, STREAM_CALIBRATION, i as u64);
            draw_encounter(cfg, &directions, &mut rng, String::new()).features
        });
        let moments = |get: &dyn Fn(&RawFeatures) -> Option<f64>| {
            let xs: Vec<f64> = feats.iter().filter_map(get).collect();
            Moments::of(&xs).unwrap_or(Moments::UNIT)
        };
        let value: [Moments; N_TASKS] = std::array::from_fn(|k| moments(&|f| f.value[k]));
        let note: [Moments; N_TASKS] = std::array::from_fn(|k| moments(&|f| f.note[k]));
        let gap = moments(&|f| f.log_gap);
        let mut gt = GroundTruth {
            strengths: cfg.signal_strengths.clone(),
            value,
            gap,
            note,
            intercepts: [0.0; N_TASKS],
            directions,
        };
        for k in 0..N_TASKS {
            let contrib: Vec<f64> = feats.iter().map(|f| gt.signal(f, k)).collect();
            gt.intercepts[k] = solve_intercept(&contrib, cfg.prevalence[k]);
        }
        Ok(gt)
    }

    fn signal(&self, f: &RawFeatures, k: usize) -> f64 {
        let s = &self.strengths;
        let zv = standardize(&self.value[k], f.value[k]);
        let zg = standardize(&self.gap, f.log_gap);
        let zn = standardize(&self.note[k], f.note[k]);
        s.value[k] * zv + s.time_gap[k] * zg + s.note[k] * zn + s.interaction[k] * zv * zn
    }

    fn logits(&self, f: &RawFeatures) -> [f64; N_TASKS] {
        std::array::from_fn(|k| self.intercepts[k] + self.signal(f, k))
    }
}

fn note_directions(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(cfg.seed, STREAM_DIRECTIONS, 0);
    (0..N_TASKS)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.note_dim).map(|_| normal(&mut rng)).collect();
            let norm = crate::tensor::dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Intercept `b` with `mean(σ(b + contrib)) = target`, by bisection.
fn solve_intercept(contrib: &[f64], target: f64) -> f64 {
    let rate = |b: f64| contrib.iter().map(|c| sigmoid(b + c)).sum::<f64>() / contrib.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// A labelled encounter together with its true logits.
pub struct Encounter {
    pub record: EncounterRecord,
    pub true_logits: [f64; N_TASKS],
}

fn sample_stream(cfg: &SynthConfig, gt: &GroundTruth, stream: u64, n: usize, exec: Exec) -> Vec<Encounter> {
    exec.map(n, |i| {
        let mut rng = stream_rng(cfg.seed, stream, i as u64);
        let mut d = draw_encounter(cfg, &gt.directions, &mut rng, format!("enc-{i:06}"));
        let logits = gt.logits(&d.features);
        for ((label, u), z) in d.record.labels.iter_mut().zip(d.label_uniforms).zip(logits) {
            *label = (u < sigmoid(z)) as u8;
        }
        Encounter {
            record: d.record,
            true_logits: logits,
        }
    })
}

/// Encounters with labels and their true logits, in generation order.
pub fn generate_encounters(cfg: &SynthConfig, exec: Exec) -> Result<Vec<Encounter>> {
    let gt = GroundTruth::fit(cfg, exec)?;
    Ok(sample_stream(cfg, &gt, STREAM_ENCOUNTER, cfg.n_encounters, exec))
}

/// Generates the dataset and splits it by encounter into train/val/test.
pub fn generate_synthetic(cfg: &SynthConfig, exec: Exec) -> Result<DatasetSplit> {
    let records: Vec<EncounterRecord> = generate_encounters(cfg, exec)?.into_iter().map(|e| e.record).collect();
    let n = records.len();
    let n_train = (cfg.split[0] * n as f64).round() as usize;
    let n_val = ((cfg.split[1] * n as f64).round() as usize).min(n - n_train);
    let mut it = records.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let val: Vec<_> = it.by_ref().take(n_val).collect();
    let test: Vec<_> = it.collect();
    DatasetSplit::new(train, val, test, cfg.n_variables)
}

/// Monte-Carlo AUROC of the true logit on fresh encounters, per task.
pub fn bayes_auroc_oracle(cfg: &SynthConfig, n_mc: usize, exec: Exec) -> Result<[f64; N_TASKS]> {
    if n_mc < 1000 {
        return Err(Error::Config(format!("n_mc = {n_mc} is below the minimum of 1000")));
    }
    let gt = GroundTruth::fit(cfg, exec)?;
    let draws = sample_stream(cfg, &gt, STREAM_ORACLE, n_mc, exec);
    let mut out = [0.0; N_TASKS];
    for (k, o) in out.iter_mut().enumerate() {
        let scores: Vec<f64> = draws.iter().map(|d| d.true_logits[k]).collect();
        let labels: Vec<u8> = draws.iter().map(|d| d.record.labels[k]).collect();
        *o = auroc(&scores, &labels)
            .ok_or_else(|| Error::Input(format!("oracle sample for task {k} has a single class")))?;
    }
    Ok(out)
}
