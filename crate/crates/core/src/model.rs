//! Model configuration, parameter initialization and the per-sample forward
//! and backward passes shared by every architecture.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig};
use crate::data::EncounterRecord;
use crate::embedding::{self, EmbedSpec, EncoderKind};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionVariant};
use crate::graph::{Gradients, Graph, NodeId};
use crate::gru;
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize, NormStats, TokenSequence, DEFAULT_MAX_LEN};
use crate::N_TASKS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_time2vec: bool,
    pub no_relpos: bool,
    pub shared_encoder: bool,
    pub no_abs_pos: bool,
}

impl AblationFlags {
    /// Learned absolute positions only: no Time2Vec, no relative bias, one
    /// encoder shared by every variable.
    pub fn behrt_like() -> Self {
        AblationFlags {
            no_time2vec: true,
            no_relpos: true,
            shared_encoder: true,
            no_abs_pos: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Transformer,
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_variables: usize,
    pub static_dim: usize,
    pub note_dim: usize,
    pub max_len: usize,
    pub encoder: EncoderKind,
    /// Clipping radius of the relative-position table.
    pub rel_clip: usize,
    pub attention: AttentionConfig,
    pub fusion: FusionVariant,
    pub architecture: Architecture,
    pub gru_layers: usize,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_variables: 14,
            static_dim: 4,
            note_dim: 16,
            max_len: DEFAULT_MAX_LEN,
            encoder: EncoderKind::Linear,
            rel_clip: 16,
            attention: AttentionConfig::default(),
            fusion: FusionVariant::TimeOnly,
            architecture: Architecture::Transformer,
            gru_layers: 2,
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.attention.d
    }

    pub fn embed_spec(&self) -> EmbedSpec {
        EmbedSpec {
            n_variables: self.n_variables,
            d: self.attention.d,
            max_len: self.max_len,
            encoder: self.encoder,
            flags: self.ablation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.attention;
        let bad = |m: String| Err(Error::Config(m));
        if a.d == 0 || a.heads == 0 || !a.d.is_multiple_of(a.heads) {
            return bad(format!("d={} must be a positive multiple of heads={}", a.d, a.heads));
        }
        if a.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if a.window_radius == 0 {
            return bad("window_radius must be at least 1".into());
        }
        if self.n_variables == 0 || self.max_len == 0 {
            return bad("n_variables and max_len must be positive".into());
        }
        if self.architecture == Architecture::Gru {
            if self.fusion != FusionVariant::TimeOnly {
                return bad("the GRU baseline only supports fusion time_only".into());
            }
            if self.gru_layers == 0 {
                return bad("gru_layers must be at least 1".into());
            }
        }
        Ok(())
    }
}

/// Everything the forward pass needs for one encounter.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: TokenSequence,
    /// Standardized static features, 1×S.
    pub static_features: Vec<f64>,
    /// Note chunk embeddings, M×D (M may be 0).
    pub notes: Tensor,
    pub labels: [u8; N_TASKS],
}

impl Sample {
    pub fn from_record(r: &EncounterRecord, stats: &NormStats, cfg: &ModelConfig) -> Result<Sample> {
        let tokens = tokenize(r, stats, cfg.max_len)?;
        if r.static_features.len() != cfg.static_dim {
            return Err(Error::Input(format!(
                "{}: {} static features, model expects {}",
                r.id,
                r.static_features.len(),
                cfg.static_dim
            )));
        }
        let static_features = r
            .static_features
            .iter()
            .enumerate()
            .map(|(j, &x)| stats.static_features.get(j).map_or(x, |m| m.normalize(x)))
            .collect();
        if let Some(n) = r.notes.iter().find(|n| n.len() != cfg.note_dim) {
            return Err(Error::Input(format!(
                "{}: note chunk of dim {}, model expects {}",
                r.id,
                n.len(),
                cfg.note_dim
            )));
        }
        let notes = Tensor::from_rows(&r.notes, cfg.note_dim);
        Ok(Sample {
            tokens,
            static_features,
            notes,
            labels: r.labels,
        })
    }

    pub fn label_vec(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| y as f64).collect()
    }
}

/// Training-mode dropout state for one forward pass.
pub struct ForwardCtx {
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        ForwardCtx {
            dropout,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout; the identity in evaluation mode.
    pub fn dropout(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let n = g.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        g.const_mul(x, Rc::new(mask))
    }
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    if cfg.fusion.uses_time() {
        embedding::init_embedding(&mut p, &cfg.embed_spec(), &mut rng);
    }
    match cfg.architecture {
        Architecture::Transformer => {
            if cfg.fusion.uses_time() {
                attention::init_encoder(&mut p, cfg, &mut rng);
            }
            fusion::init_fusion(&mut p, cfg, &mut rng);
        }
        Architecture::Gru => gru::init_gru(&mut p, cfg, &mut rng),
    }
    attention::init_heads(&mut p, cfg, &mut rng);
    Ok(p)
}

/// 9×1 logits of one sample.
pub fn forward(g: &mut Graph, cfg: &ModelConfig, s: &Sample, ctx: &mut ForwardCtx) -> Result<NodeId> {
    match cfg.architecture {
        Architecture::Transformer => fusion::forward(g, cfg, s, ctx),
        Architecture::Gru => gru::forward(g, cfg, s, ctx),
    }
}

pub fn predict(params: &ModelParams, cfg: &ModelConfig, s: &Sample) -> Result<[f64; N_TASKS]> {
    let mut g = Graph::new(params);
    let out = forward(&mut g, cfg, s, &mut ForwardCtx::eval())?;
    let v = g.value(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut logits = [0.0; N_TASKS];
    logits.copy_from_slice(&v.data);
    Ok(logits)
}

/// Weighted BCE of one sample (summed over tasks) and its gradient.
pub fn loss_and_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    s: &Sample,
    pos_weight: &[f64],
    ctx: &mut ForwardCtx,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(params);
    let logits = forward(&mut g, cfg, s, ctx)?;
    let loss = g.bce(logits, &s.label_vec(), pos_weight);
    let value = g.value(loss).data[0];
    Ok((value, g.backward(loss)))
}
