//! The component-ablation and fusion-variant comparisons, each trained on
//! identical splits and seeds.

use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::FusionVariant;
use crate::model::{AblationFlags, Architecture, ModelConfig};

use super::metrics::{Metrics, SeedAggregate};
use super::{prepare, train_prepared, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    Full,
    NoTime2vec,
    NoRelpos,
    SharedEncoder,
    BehrtLike,
    GruAttention,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow::Full,
        AblationRow::NoTime2vec,
        AblationRow::NoRelpos,
        AblationRow::SharedEncoder,
        AblationRow::BehrtLike,
        AblationRow::GruAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Full => "full",
            AblationRow::NoTime2vec => "no_time2vec",
            AblationRow::NoRelpos => "no_relpos",
            AblationRow::SharedEncoder => "shared_encoder",
            AblationRow::BehrtLike => "behrt_like",
            AblationRow::GruAttention => "gru_attention",
        }
    }

    pub fn parse(s: &str) -> Option<AblationRow> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    /// The time-series-only configuration of this row, derived from `base`.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        m.fusion = FusionVariant::TimeOnly;
        m.architecture = Architecture::Transformer;
        m.ablation = AblationFlags::default();
        match self {
            AblationRow::Full => {}
            AblationRow::NoTime2vec => m.ablation.no_time2vec = true,
            AblationRow::NoRelpos => m.ablation.no_relpos = true,
            AblationRow::SharedEncoder => m.ablation.shared_encoder = true,
            AblationRow::BehrtLike => m.ablation = AblationFlags::behrt_like(),
            AblationRow::GruAttention => m.architecture = Architecture::Gru,
        }
        m
    }
}

/// Aggregated results of one named configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub name: String,
    pub runs: Vec<Metrics>,
    pub aggregate: SeedAggregate,
}

/// Trains `model` once per seed (the training seed drives initialization,
/// shuffling and dropout; the data split is shared).
pub fn run_seeds(
    split: &DatasetSplit,
    name: &str,
    model: &ModelConfig,
    tc: &TrainConfig,
    seeds: &[u64],
    exec: Exec,
) -> Result<RowResult> {
    let data = prepare(split, model, exec)?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let tc = TrainConfig { seed, ..tc.clone() };
        let out = train_prepared(&data, &split.stats, &tc, exec)?;
        log::info!("{name} seed {seed}: test mean AUROC {:.4}", out.test.mean_auroc);
        runs.push(out.test);
    }
    let aggregate = SeedAggregate::new(seeds.to_vec(), &runs);
    Ok(RowResult {
        name: name.to_string(),
        runs,
        aggregate,
    })
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("need at least 3 seeds, got {}", seeds.len())));
    }
    Ok(())
}

pub fn run_ablation_suite(
    split: &DatasetSplit,
    base: &ModelConfig,
    tc: &TrainConfig,
    seeds: &[u64],
    rows: &[AblationRow],
    exec: Exec,
) -> Result<Vec<RowResult>> {
    check_seeds(seeds)?;
    rows.iter()
        .map(|r| run_seeds(split, r.name(), &r.apply(base), tc, seeds, exec))
        .collect()
}

pub fn run_fusion_comparison(
    split: &DatasetSplit,
    base: &ModelConfig,
    tc: &TrainConfig,
    seeds: &[u64],
    variants: &[FusionVariant],
    exec: Exec,
) -> Result<Vec<RowResult>> {
    check_seeds(seeds)?;
    variants
        .iter()
        .map(|&v| {
            let mut m = AblationRow::Full.apply(base);
            m.fusion = v;
            run_seeds(split, v.name(), &m, tc, seeds, exec)
        })
        .collect()
}
