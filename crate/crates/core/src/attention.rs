//! Sliding-window self-attention with a learned relative-position bias and
//! global outcome tokens, the pre-norm encoder stack built on it, and the
//! per-task output heads.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{rel_pos_index, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{ForwardCtx, ModelConfig, Sample};
use crate::params::{fan_in_std, truncated_normal, ModelParams};
use crate::tensor::Tensor;
use crate::N_TASKS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// Non-global tokens attend to tokens whose positional index differs by
    /// at most this much.
    pub window_radius: usize,
    /// Feed-forward width as a multiple of `d`.
    pub ff_mult: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            d: 64,
            heads: 1,
            layers: 1,
            window_radius: 64,
            ff_mult: 4,
        }
    }
}

/// Positional index of every row of an attention input; `None` marks a
/// global token, which attends to and is attended by everything.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceLayout {
    pub positions: Vec<Option<usize>>,
}

impl SequenceLayout {
    /// `n_global` global rows followed by ordinary tokens.
    pub fn with_globals(n_global: usize, positions: &[usize]) -> Self {
        let mut p = vec![None; n_global];
        p.extend(positions.iter().map(|&x| Some(x)));
        SequenceLayout { positions: p }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn allowed(&self, i: usize, j: usize, window: usize) -> bool {
        match (self.positions[i], self.positions[j]) {
            (Some(a), Some(b)) => a.abs_diff(b) <= window,
            _ => true,
        }
    }

    /// Row-major query×key mask, `true` where attention is allowed.
    pub fn mask(&self, window: usize) -> Vec<bool> {
        let n = self.len();
        let mut m = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                m.push(self.allowed(i, j, window));
            }
        }
        m
    }

    /// Relative-position table index for every pair of ordinary tokens.
    pub fn rel_index(&self, k: usize) -> Vec<Option<usize>> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(match (self.positions[i], self.positions[j]) {
                    (Some(a), Some(b)) => Some(rel_pos_index(a, b, k)),
                    _ => None,
                });
            }
        }
        out
    }
}

pub struct AttentionOutput {
    /// Attention output after the output projection, L×d.
    pub out: NodeId,
    /// Per-head concatenated context before the output projection, L×d.
    pub context: NodeId,
    /// Per-head L×L attention weights.
    pub weights: Vec<NodeId>,
}

pub fn init_attention<R: Rng>(p: &mut ModelParams, prefix: &str, d: usize, rng: &mut R) {
    for m in ["q", "k", "v", "o"] {
        p.insert(format!("{prefix}.w{m}"), truncated_normal(rng, d, d, fan_in_std(d)));
    }
    // no key bias: it shifts all scores of a query equally and cancels in
    // the softmax
    for m in ["q", "v", "o"] {
        p.insert(format!("{prefix}.b{m}"), Tensor::zeros(1, d));
    }
}

pub fn init_layer_norm(p: &mut ModelParams, prefix: &str, d: usize) {
    p.insert(format!("{prefix}.g"), Tensor::from_vec(1, d, vec![1.0; d]));
    p.insert(format!("{prefix}.b"), Tensor::zeros(1, d));
}

pub fn init_encoder<R: Rng>(p: &mut ModelParams, cfg: &ModelConfig, rng: &mut R) {
    let a = &cfg.attention;
    let d = a.d;
    p.insert("global.tokens", truncated_normal(rng, N_TASKS, d, INIT_STD));
    for l in 0..a.layers {
        let pre = format!("layer.{l}");
        init_layer_norm(p, &format!("{pre}.ln1"), d);
        init_attention(p, &format!("{pre}.attn"), d, rng);
        if !cfg.ablation.no_relpos {
            p.insert(
                format!("{pre}.relpos"),
                truncated_normal(rng, a.heads, 2 * cfg.rel_clip + 1, INIT_STD),
            );
        }
        init_layer_norm(p, &format!("{pre}.ln2"), d);
        let f = a.ff_mult * d;
        p.insert(format!("{pre}.ff.w1"), truncated_normal(rng, d, f, fan_in_std(d)));
        p.insert(format!("{pre}.ff.b1"), Tensor::zeros(1, f));
        p.insert(format!("{pre}.ff.w2"), truncated_normal(rng, f, d, fan_in_std(f)));
        p.insert(format!("{pre}.ff.b2"), Tensor::zeros(1, d));
    }
    init_layer_norm(p, "enc.ln_f", d);
}

/// Static projection and the per-task linear heads over `width` d-wide
/// feature blocks (the static projection among them).
pub fn init_heads<R: Rng>(p: &mut ModelParams, cfg: &ModelConfig, rng: &mut R) {
    let d = cfg.d();
    p.insert(
        "static.w",
        truncated_normal(rng, cfg.static_dim, d, fan_in_std(cfg.static_dim)),
    );
    p.insert("static.b", Tensor::zeros(1, d));
    let width = cfg.fusion.head_blocks(cfg.architecture);
    p.insert("head.w", truncated_normal(rng, N_TASKS, width * d, INIT_STD));
    p.insert("head.b", Tensor::zeros(N_TASKS, 1));
}

/// Multi-head attention of `x` (L×d) over itself, restricted to the sliding
/// window of `layout`, with an optional per-layer relative bias table
/// `{prefix}.relpos` of clipping radius `rel_clip`.
pub fn sliding_window_attention(
    g: &mut Graph,
    x: NodeId,
    prefix: &str,
    cfg: &AttentionConfig,
    layout: &SequenceLayout,
    rel: Option<(&str, usize)>,
) -> Result<AttentionOutput> {
    let (n, d) = g.shape(x);
    if n != layout.len() {
        return Err(Error::Shape(format!("{n} rows but layout of {}", layout.len())));
    }
    if n == 0 {
        return Err(Error::Shape("attention over an empty sequence".into()));
    }
    if d != cfg.d || d % cfg.heads != 0 {
        return Err(Error::Shape(format!("width {d} vs d={} heads={}", cfg.d, cfg.heads)));
    }
    let proj = |g: &mut Graph, m: &str| {
        let w = g.param(&format!("{prefix}.w{m}"));
        let b = g.param(&format!("{prefix}.b{m}"));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    };
    let q = proj(g, "q");
    let wk = g.param(&format!("{prefix}.wk"));
    let k = g.matmul(x, wk);
    let v = proj(g, "v");
    let mask = Rc::new(layout.mask(cfg.window_radius));
    let rel = rel.map(|(name, clip)| (g.param(name), Rc::new(layout.rel_index(clip))));
    let dh = d / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let s = g.matmul_bt(qh, kh);
        let mut s = g.affine(s, scale, 0.0);
        if let Some((table, idx)) = &rel {
            let row = g.slice_rows(*table, h, 1);
            let b = g.bias_table(row, idx.clone(), n, n);
            s = g.add(s, b);
        }
        let a = g.softmax(s, Some(mask.clone()));
        weights.push(a);
        heads.push(g.matmul(a, vh));
    }
    let context = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    let wo = g.param(&format!("{prefix}.wo"));
    let bo = g.param(&format!("{prefix}.bo"));
    let out = g.matmul(context, wo);
    let out = g.add_row(out, bo);
    Ok(AttentionOutput { out, context, weights })
}

/// Layer norm with learned gain `{prefix}.g` and shift `{prefix}.b`.
pub fn layer_norm(g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
    let n = g.layer_norm(x);
    let gain = g.param(&format!("{prefix}.g"));
    let bias = g.param(&format!("{prefix}.b"));
    let n = g.mul_row(n, gain);
    g.add_row(n, bias)
}

/// The encoder stack: pre-norm attention and feed-forward sublayers with
/// residual connections, then a final layer norm.
pub fn encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    x: NodeId,
    layout: &SequenceLayout,
    ctx: &mut ForwardCtx,
) -> Result<NodeId> {
    let a = &cfg.attention;
    let mut h = x;
    for l in 0..a.layers {
        let pre = format!("layer.{l}");
        let rel_name = format!("{pre}.relpos");
        let rel = (!cfg.ablation.no_relpos).then_some((rel_name.as_str(), cfg.rel_clip));
        let xn = layer_norm(g, h, &format!("{pre}.ln1"));
        let att = sliding_window_attention(g, xn, &format!("{pre}.attn"), a, layout, rel)?;
        let o = ctx.dropout(g, att.out);
        h = g.add(h, o);
        let xn = layer_norm(g, h, &format!("{pre}.ln2"));
        let w1 = g.param(&format!("{pre}.ff.w1"));
        let b1 = g.param(&format!("{pre}.ff.b1"));
        let w2 = g.param(&format!("{pre}.ff.w2"));
        let b2 = g.param(&format!("{pre}.ff.b2"));
        let f = g.matmul(xn, w1);
        let f = g.add_row(f, b1);
        let f = g.gelu(f);
        let f = g.matmul(f, w2);
        let f = g.add_row(f, b2);
        let f = ctx.dropout(g, f);
        h = g.add(h, f);
    }
    Ok(layer_norm(g, h, "enc.ln_f"))
}

/// Static projection broadcast to one row per task (9×d).
pub fn static_rows(g: &mut Graph, s: &Sample) -> NodeId {
    let x = g.input(Tensor::row_vector(s.static_features.clone()));
    let w = g.param("static.w");
    let b = g.param("static.b");
    let y = g.matmul(x, w);
    let y = g.add_row(y, b);
    g.broadcast_rows(y, N_TASKS)
}

/// Task `k`'s logit is the dot product of row `k` of the concatenated
/// feature blocks with row `k` of `{prefix}.w`, plus `{prefix}.b[k]`.
pub fn task_heads(g: &mut Graph, blocks: &[NodeId], prefix: &str) -> NodeId {
    let f = if blocks.len() == 1 {
        blocks[0]
    } else {
        g.concat_cols(blocks)
    };
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let p = g.mul(f, w);
    let s = g.sum_cols(p);
    g.add(s, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, heads: usize, clip: usize) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ModelParams::new();
        init_attention(&mut p, "a", d, &mut rng);
        p.insert("a.relpos", truncated_normal(&mut rng, heads, 2 * clip + 1, 0.5));
        let flat: Vec<f64> = p.flatten().iter().map(|_| rng.random_range(-0.8..0.8)).collect();
        p.unflatten(&flat).unwrap()
    }

    fn cfg(d: usize, heads: usize, window: usize) -> AttentionConfig {
        AttentionConfig {
            d,
            heads,
            window_radius: window,
            ..AttentionConfig::default()
        }
    }

    #[test]
    fn mask_respects_window_and_globals() {
        let l = SequenceLayout::with_globals(2, &[0, 0, 3, 7]);
        let m = l.mask(3);
        let n = l.len();
        assert!(m[..2 * n].iter().all(|&b| b), "globals see everything");
        assert!((0..n).all(|i| m[i * n] && m[i * n + 1]), "everyone sees globals");
        assert!(m[2 * n + 4]); // 0 vs 3
        assert!(!m[2 * n + 5]); // 0 vs 7
        assert!(m[3 * n + 2]); // shared timestamp
    }

    #[test]
    fn rel_index_only_between_ordinary_tokens() {
        let l = SequenceLayout::with_globals(1, &[0, 5]);
        let r = l.rel_index(2);
        assert_eq!(r[0], None);
        assert_eq!(r[3], None);
        assert_eq!(r[4], Some(2));
        assert_eq!(r[5], Some(4));
        assert_eq!(r[7], Some(0));
    }

    #[test]
    fn single_token_outputs_value_projection() {
        let p = params(4, 1, 2);
        let x = Tensor::from_vec(1, 4, vec![0.3, -0.2, 0.9, 0.1]);
        let mut g = Graph::new(&p);
        let xi = g.input(x.clone());
        let layout = SequenceLayout::with_globals(0, &[0]);
        let o = sliding_window_attention(&mut g, xi, "a", &cfg(4, 1, 1), &layout, Some(("a.relpos", 2))).unwrap();
        assert_eq!(g.value(o.weights[0]).data, vec![1.0]);
        let mut v = crate::tensor::matmul(&x, p.get("a.wv").unwrap());
        v.add_assign(p.get("a.bv").unwrap());
        assert!(g.value(o.context).max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn out_of_window_weights_are_zero() {
        let p = params(4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let positions = [0, 1, 1, 4, 9];
        let layout = SequenceLayout::with_globals(1, &positions);
        let x = truncated_normal(&mut rng, layout.len(), 4, 1.0);
        let mut g = Graph::new(&p);
        let xi = g.input(x);
        let o = sliding_window_attention(&mut g, xi, "a", &cfg(4, 2, 2), &layout, Some(("a.relpos", 2))).unwrap();
        let n = layout.len();
        for &w in &o.weights {
            let a = g.value(w);
            for i in 0..n {
                let sum: f64 = a.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                for j in 0..n {
                    if !layout.allowed(i, j, 2) {
                        assert_eq!(a.at(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let p = params(4, 1, 2);
        let mut g = Graph::new(&p);
        let xi = g.input(Tensor::zeros(0, 4));
        let r = sliding_window_attention(&mut g, xi, "a", &cfg(4, 1, 1), &SequenceLayout::default(), None);
        assert!(r.is_err());
    }
}
