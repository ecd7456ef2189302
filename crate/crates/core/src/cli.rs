//! The `chronotoken` command line: `generate`, `train`, `eval`, `ablate` and
//! `report`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::synth::{generate_synthetic, SynthConfig};
use crate::data::{prevalence, read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::exec::{init_thread_pool, Exec};
use crate::fusion::FusionVariant;
use crate::model::ModelConfig;
use crate::train::ablation::{run_ablation_suite, run_fusion_comparison, AblationRow, RowResult};
use crate::train::metrics::Metrics;
use crate::train::report::{metrics_table, render_report};
use crate::train::{evaluate, prepare, train, EpochLog, TrainConfig};
use crate::TASK_NAMES;

pub const LOG_ENV: &str = "CHRONOTOKEN_LOG";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_FILE: &str = "eval_metrics.json";
pub const REPORT_FILE: &str = "report.md";
pub const RESULTS_FILE: &str = "ablation.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Parser)]
#[command(
    name = "chronotoken",
    version,
    about = "Time-aware tokenization and embedding of multimodal clinical time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train/val/test JSONL plus manifest.json).
    Generate(CommonArgs),
    /// Train one model and write its checkpoint, metrics.json and train_log.jsonl.
    Train(CommonArgs),
    /// Evaluate the checkpoint in --out on the test split of --data.
    Eval(CommonArgs),
    /// Train every ablation and fusion configuration over several seeds and write report.md.
    Ablate(CommonArgs),
    /// Re-render report.md from the results stored by `ablate` in --out.
    Report(CommonArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (as written by `generate`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed of the command (data seed for `generate`, training seed otherwise).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated training seeds for `ablate`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// A fusion variant (TimeOnly, NotesOnly, LateWeighted, CrossThenConcat,
    /// ConcatThenCross) or an ablation row (full, no_time2vec, no_relpos,
    /// shared_encoder, behrt_like, gru_attention).
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything one invocation can be configured with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training seeds of `ablate`.
    pub seeds: Vec<u64>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            model: ModelConfig {
                attention: crate::attention::AttentionConfig {
                    d: 32,
                    ..Default::default()
                },
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3],
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
                RunConfig::from_json(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn exec_for(a: &CommonArgs) -> Result<Exec> {
    if a.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    if a.threads > 1 {
        init_thread_pool(a.threads);
    }
    Ok(Exec::from_threads(a.threads))
}

fn required(flag: Option<&PathBuf>, fallback: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(fallback)
        .cloned()
        .ok_or_else(|| Error::Config(format!("--{name} is required (or paths.{name} in the config)")))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Applies `--variant` to a model configuration.
pub fn apply_variant(model: &ModelConfig, variant: Option<&str>) -> Result<ModelConfig> {
    let Some(v) = variant else {
        return Ok(model.clone());
    };
    if let Some(f) = FusionVariant::parse(v) {
        let mut m = model.clone();
        m.fusion = f;
        return Ok(m);
    }
    if let Some(r) = AblationRow::parse(v) {
        return Ok(r.apply(model));
    }
    Err(Error::Config(format!("unknown variant {v:?}")))
}

pub fn cmd_generate(a: &CommonArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let exec = exec_for(a)?;
    let out = required(a.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
    let mut synth = cfg.synth.clone();
    if let Some(s) = a.seed {
        synth.seed = s;
    }
    let split = generate_synthetic(&synth, exec)?;
    write_dataset(&split, &out)?;
    println!(
        "wrote {}: train {}, val {}, test {}",
        out.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let all: Vec<_> = split
        .train
        .iter()
        .chain(&split.val)
        .chain(&split.test)
        .cloned()
        .collect();
    let prev = prevalence(&all);
    for (name, p) in TASK_NAMES.iter().zip(prev) {
        println!("  {name:<15} prevalence {p:.4}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsFile<'a> {
    #[serde(flatten)]
    metrics: &'a Metrics,
    tasks: [&'static str; crate::N_TASKS],
    best_epoch: usize,
    seed: u64,
    variant: String,
}

pub fn cmd_train(a: &CommonArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let exec = exec_for(a)?;
    let data_dir = required(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?;
    let out = required(a.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
    let model = apply_variant(&cfg.model, a.variant.as_deref())?;
    let mut tc = cfg.train.clone();
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let split = read_dataset(&data_dir)?;
    let outcome = train(&split, &model, &tc, exec)?;
    create_dir(&out)?;
    checkpoint::save(&out.join(CHECKPOINT_DIR), &outcome.checkpoint)?;
    let mf = MetricsFile {
        metrics: &outcome.test,
        tasks: TASK_NAMES,
        best_epoch: outcome.best_epoch,
        seed: tc.seed,
        variant: a
            .variant
            .clone()
            .unwrap_or_else(|| outcome.checkpoint.model.fusion.name().to_string()),
    };
    write_file(&out.join(METRICS_FILE), &(serde_json::to_string_pretty(&mf)? + "\n"))?;
    write_file(&out.join(TRAIN_LOG_FILE), &log_lines(&outcome.log)?)?;
    print!("{}", metrics_table(&outcome.test));
    Ok(())
}

fn log_lines(log: &[EpochLog]) -> Result<String> {
    let mut s = String::new();
    for e in log {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn cmd_eval(a: &CommonArgs) -> Result<()> {
    let exec = exec_for(a)?;
    let cfg = RunConfig::load(a.config.as_deref())?;
    let data_dir = required(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?;
    let out = required(a.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
    let ck = checkpoint::load(&out.join(CHECKPOINT_DIR))?;
    let mut split = read_dataset(&data_dir)?;
    // evaluate with the statistics the model was trained with
    split.stats = ck.stats.clone();
    let data = prepare(&split, &ck.model, exec)?;
    if data.model != ck.model {
        return Err(Error::Input("dataset dimensions do not match the checkpoint".into()));
    }
    let m = evaluate(&ck.params, &ck.model, &data.test, exec)?;
    write_file(&out.join(EVAL_FILE), &(serde_json::to_string_pretty(&m)? + "\n"))?;
    print!("{}", metrics_table(&m));
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AblationResults {
    seeds: Vec<u64>,
    ablation: Vec<RowResult>,
    fusion: Vec<RowResult>,
}

pub fn cmd_ablate(a: &CommonArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let exec = exec_for(a)?;
    let data_dir = required(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?;
    let out = required(a.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
    let seeds = a.seeds.clone().unwrap_or(cfg.seeds.clone());
    let split = read_dataset(&data_dir)?;
    let ablation = run_ablation_suite(&split, &cfg.model, &cfg.train, &seeds, &AblationRow::ALL, exec)?;
    let fusion = run_fusion_comparison(&split, &cfg.model, &cfg.train, &seeds, &FusionVariant::ALL, exec)?;
    create_dir(&out)?;
    let results = AblationResults {
        seeds,
        ablation,
        fusion,
    };
    write_file(&out.join(RESULTS_FILE), &serde_json::to_string_pretty(&results)?)?;
    let report = render_report(&results.seeds, &results.ablation, &results.fusion);
    write_file(&out.join(REPORT_FILE), &report)?;
    print!("{report}");
    Ok(())
}

pub fn cmd_report(a: &CommonArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let out = required(a.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
    let path = out.join(RESULTS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let results: AblationResults =
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let report = render_report(&results.seeds, &results.ablation, &results.fusion);
    write_file(&out.join(REPORT_FILE), &report)?;
    print!("{report}");
    Ok(())
}
