//! Combining the time-series encoder with clinical-note chunk embeddings.
//!
//! Five variants share the same time-series encoder and heads:
//! * `TimeOnly` — no notes;
//! * `NotesOnly` — mean-pooled projected note chunks only;
//! * `LateWeighted` — separate time and note heads mixed by a learned weight;
//! * `CrossThenConcat` — bidirectional cross-attention between the encoded
//!   time series and the notes, then concatenation;
//! * `ConcatThenCross` — note chunks join the time tokens as extra global
//!   tokens of one jointly encoded sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{encode, init_attention, init_layer_norm, layer_norm, static_rows, task_heads, SequenceLayout};
use crate::embedding::{embed_tokens, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{Architecture, ForwardCtx, ModelConfig, Sample};
use crate::params::{fan_in_std, truncated_normal, ModelParams};
use crate::tensor::Tensor;
use crate::N_TASKS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FusionVariant {
    #[default]
    TimeOnly,
    NotesOnly,
    LateWeighted,
    CrossThenConcat,
    ConcatThenCross,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::TimeOnly,
        FusionVariant::NotesOnly,
        FusionVariant::LateWeighted,
        FusionVariant::CrossThenConcat,
        FusionVariant::ConcatThenCross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::TimeOnly => "TimeOnly",
            FusionVariant::NotesOnly => "NotesOnly",
            FusionVariant::LateWeighted => "LateWeighted",
            FusionVariant::CrossThenConcat => "CrossThenConcat",
            FusionVariant::ConcatThenCross => "ConcatThenCross",
        }
    }

    /// Case-insensitive; underscores are ignored, so `concat_then_cross`
    /// and `ConcatThenCross` are the same variant.
    pub fn parse(s: &str) -> Option<FusionVariant> {
        let key: String = s.chars().filter(|&c| c != '_').collect();
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(&key))
    }

    pub fn uses_time(self) -> bool {
        self != FusionVariant::NotesOnly
    }

    pub fn uses_notes(self) -> bool {
        self != FusionVariant::TimeOnly
    }

    /// Number of d-wide feature blocks read by the main task heads.
    pub fn head_blocks(self, arch: Architecture) -> usize {
        match (arch, self) {
            (Architecture::Transformer, FusionVariant::CrossThenConcat) => 3,
            _ => 2,
        }
    }
}

pub fn init_fusion<R: Rng>(p: &mut ModelParams, cfg: &ModelConfig, rng: &mut R) {
    let d = cfg.d();
    let v = cfg.fusion;
    if v.uses_notes() {
        p.insert(
            "note.proj.w",
            truncated_normal(rng, cfg.note_dim, d, fan_in_std(cfg.note_dim)),
        );
        p.insert("note.proj.b", Tensor::zeros(1, d));
        p.insert("note.null", truncated_normal(rng, 1, d, INIT_STD));
    }
    match v {
        FusionVariant::TimeOnly | FusionVariant::NotesOnly => {}
        FusionVariant::LateWeighted => {
            p.insert("note.head.w", truncated_normal(rng, N_TASKS, 2 * d, INIT_STD));
            p.insert("note.head.b", Tensor::zeros(N_TASKS, 1));
            p.insert("late.alpha_raw", Tensor::zeros(1, 1));
        }
        FusionVariant::CrossThenConcat => {
            for dir in ["cross.t2n", "cross.n2t"] {
                init_attention(p, dir, d, rng);
                init_layer_norm(p, &format!("{dir}.ln"), d);
            }
        }
        FusionVariant::ConcatThenCross => {
            p.insert("note.type", truncated_normal(rng, 2, d, INIT_STD));
        }
    }
}

/// Projected note chunks (M×d), or the learned null embedding (1×d) for an
/// encounter without notes.
pub fn note_tokens(g: &mut Graph, s: &Sample) -> NodeId {
    if s.notes.rows == 0 {
        return g.param("note.null");
    }
    let x = g.input(s.notes.clone());
    let w = g.param("note.proj.w");
    let b = g.param("note.proj.b");
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub struct CrossAttention {
    /// Attention output after the output projection, A×d.
    pub out: NodeId,
    /// A×B attention weights.
    pub weights: NodeId,
}

/// Single-head attention of the rows of `xq` (A×d) over the rows of `xkv`
/// (B×d), with projections `{prefix}.w{q,k,v,o}` and biases
/// `{prefix}.b{q,v,o}`.
pub fn cross_attention(g: &mut Graph, xq: NodeId, xkv: NodeId, prefix: &str) -> Result<CrossAttention> {
    let (a, d) = g.shape(xq);
    let (b, d2) = g.shape(xkv);
    if d != d2 || a == 0 || b == 0 {
        return Err(Error::Shape(format!("cross attention {a}×{d} over {b}×{d2}")));
    }
    let mut proj = |x: NodeId, m: &str| {
        let w = g.param(&format!("{prefix}.w{m}"));
        let bias = g.param(&format!("{prefix}.b{m}"));
        let y = g.matmul(x, w);
        g.add_row(y, bias)
    };
    let q = proj(xq, "q");
    let v = proj(xkv, "v");
    let wk = g.param(&format!("{prefix}.wk"));
    let k = g.matmul(xkv, wk);
    let s = g.matmul_bt(q, k);
    let s = g.affine(s, 1.0 / (d as f64).sqrt(), 0.0);
    let weights = g.softmax(s, None);
    let ctx = g.matmul(weights, v);
    let wo = g.param(&format!("{prefix}.wo"));
    let bo = g.param(&format!("{prefix}.bo"));
    let out = g.matmul(ctx, wo);
    let out = g.add_row(out, bo);
    Ok(CrossAttention { out, weights })
}

/// Pre-norm residual cross-attention: `xq + attn(LN(xq), xkv)`, matching the
/// encoder's pre-norm blocks so the encoder readout keeps an identity path.
fn cross_block(g: &mut Graph, xq: NodeId, xkv: NodeId, prefix: &str, ctx: &mut ForwardCtx) -> Result<NodeId> {
    let qn = layer_norm(g, xq, &format!("{prefix}.ln"));
    let c = cross_attention(g, qn, xkv, prefix)?;
    let o = ctx.dropout(g, c.out);
    Ok(g.add(xq, o))
}

/// Encodes `[globals; time tokens (; note tokens)]` and returns the whole
/// encoded sequence.
fn encode_joint(
    g: &mut Graph,
    cfg: &ModelConfig,
    s: &Sample,
    notes: Option<NodeId>,
    ctx: &mut ForwardCtx,
) -> Result<NodeId> {
    let emb = embed_tokens(g, &cfg.embed_spec(), &s.tokens)?;
    let mut emb = ctx.dropout(g, emb);
    let globals = g.param("global.tokens");
    let mut layout = SequenceLayout::with_globals(N_TASKS, &s.tokens.positions);
    let mut parts = vec![globals];
    if let Some(p) = notes {
        let types = g.param("note.type");
        let t0 = g.slice_rows(types, 0, 1);
        let t1 = g.slice_rows(types, 1, 1);
        if !s.tokens.is_empty() {
            emb = g.add_row(emb, t0);
        }
        parts.push(emb);
        parts.push(g.add_row(p, t1));
        // note chunks have no timestamp: they behave like global tokens
        layout.positions.extend(std::iter::repeat_n(None, g.shape(p).0));
    } else {
        parts.push(emb);
    }
    let x = g.concat_rows(&parts);
    encode(g, cfg, x, &layout, ctx)
}

/// 9×1 logits of one sample under `cfg.fusion`.
pub fn forward(g: &mut Graph, cfg: &ModelConfig, s: &Sample, ctx: &mut ForwardCtx) -> Result<NodeId> {
    let st = static_rows(g, s);
    match cfg.fusion {
        FusionVariant::TimeOnly => {
            let h = encode_joint(g, cfg, s, None, ctx)?;
            let gl = g.slice_rows(h, 0, N_TASKS);
            Ok(task_heads(g, &[gl, st], "head"))
        }
        FusionVariant::NotesOnly => {
            let p = note_tokens(g, s);
            let n = g.mean_rows(p);
            let n = g.broadcast_rows(n, N_TASKS);
            Ok(task_heads(g, &[n, st], "head"))
        }
        FusionVariant::LateWeighted => {
            let h = encode_joint(g, cfg, s, None, ctx)?;
            let gl = g.slice_rows(h, 0, N_TASKS);
            let time = task_heads(g, &[gl, st], "head");
            let p = note_tokens(g, s);
            let n = g.mean_rows(p);
            let n = g.broadcast_rows(n, N_TASKS);
            let note = task_heads(g, &[n, st], "note.head");
            let raw = g.param("late.alpha_raw");
            let alpha = g.sigmoid(raw);
            let beta = g.affine(alpha, -1.0, 1.0);
            let a = g.mul_scalar(time, alpha);
            let b = g.mul_scalar(note, beta);
            Ok(g.add(a, b))
        }
        FusionVariant::CrossThenConcat => {
            let h = encode_joint(g, cfg, s, None, ctx)?;
            let gl = g.slice_rows(h, 0, N_TASKS);
            let p = note_tokens(g, s);
            let gx = cross_block(g, gl, p, "cross.t2n", ctx)?;
            let nx = cross_block(g, p, h, "cross.n2t", ctx)?;
            let n = g.mean_rows(nx);
            let n = g.broadcast_rows(n, N_TASKS);
            Ok(task_heads(g, &[gx, n, st], "head"))
        }
        FusionVariant::ConcatThenCross => {
            let p = note_tokens(g, s);
            let h = encode_joint(g, cfg, s, Some(p), ctx)?;
            let gl = g.slice_rows(h, 0, N_TASKS);
            Ok(task_heads(g, &[gl, st], "head"))
        }
    }
}
