//! Token embeddings: per-variable value encoders, Time2Vec and a learned
//! absolute-position table, combined by summation.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::AblationFlags;
use crate::params::{fan_in_std, truncated_normal, ModelParams};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

pub const INIT_STD: f64 = 0.02;
/// Value encoders map a single scalar (fan-in 1), so their weights start at
/// unit scale instead of the small projection scale.
pub const ENCODER_INIT_STD: f64 = 1.0;
/// Taps of the convolutional encoder: the current value and two predecessors
/// of the same variable.
pub const CONV_TAPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Linear,
    Conv1d,
    Transformer,
}

/// What [`embed_tokens`] needs to know about the architecture.
#[derive(Debug, Clone, Copy)]
pub struct EmbedSpec {
    pub n_variables: usize,
    pub d: usize,
    pub max_len: usize,
    pub encoder: EncoderKind,
    pub flags: AblationFlags,
}

/// Time2Vec parameters: component 0 is `w_np·t + b_np`, component `i ≥ 1` is
/// `sin(w_p[i-1]·t + b_p[i-1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Time2VecParams {
    pub w_np: f64,
    pub b_np: f64,
    pub w_p: Vec<f64>,
    pub b_p: Vec<f64>,
}

impl Time2VecParams {
    pub fn dim(&self) -> usize {
        1 + self.w_p.len()
    }

    /// Reads the `time2vec.w` / `time2vec.b` rows of a parameter store.
    pub fn from_params(p: &ModelParams) -> Option<Self> {
        let w = &p.get("time2vec.w")?.data;
        let b = &p.get("time2vec.b")?.data;
        Some(Time2VecParams {
            w_np: w[0],
            b_np: b[0],
            w_p: w[1..].to_vec(),
            b_p: b[1..].to_vec(),
        })
    }
}

pub fn time2vec(t: f64, p: &Time2VecParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.dim());
    out.push(p.w_np * t + p.b_np);
    out.extend(p.w_p.iter().zip(&p.b_p).map(|(w, b)| (w * t + b).sin()));
    out
}

/// Index into a relative-position table of radius `k` for the signed distance
/// `j - i`, measured in positional-index units.
pub fn rel_pos_index(i: usize, j: usize, k: usize) -> usize {
    let k = k as i64;
    ((j as i64 - i as i64).clamp(-k, k) + k) as usize
}

pub fn init_embedding<R: Rng>(p: &mut ModelParams, spec: &EmbedSpec, rng: &mut R) {
    let (v, d) = (spec.n_variables, spec.d);
    let shared = spec.flags.shared_encoder;
    let rows = if shared { 1 } else { v };
    match spec.encoder {
        EncoderKind::Linear => {
            p.insert("enc.w", truncated_normal(rng, rows, d, ENCODER_INIT_STD));
            p.insert("enc.b", Tensor::zeros(rows, d));
        }
        EncoderKind::Conv1d => {
            for tap in 0..CONV_TAPS {
                p.insert(
                    format!("enc.conv.w{tap}"),
                    truncated_normal(rng, rows, d, ENCODER_INIT_STD),
                );
            }
            p.insert("enc.conv.b", Tensor::zeros(rows, d));
        }
        EncoderKind::Transformer => {
            for e in 0..rows {
                let pre = transformer_prefix(shared, e);
                p.insert(format!("{pre}.in_w"), truncated_normal(rng, 1, d, ENCODER_INIT_STD));
                p.insert(format!("{pre}.in_b"), Tensor::zeros(1, d));
                for m in ["wq", "wk", "wv"] {
                    p.insert(format!("{pre}.{m}"), truncated_normal(rng, d, d, fan_in_std(d)));
                }
                p.insert(format!("{pre}.ln_g"), Tensor::from_vec(1, d, vec![1.0; d]));
                p.insert(format!("{pre}.ln_b"), Tensor::zeros(1, d));
            }
        }
    }
    if shared {
        p.insert("enc.var_emb", truncated_normal(rng, v, d, INIT_STD));
    }
    if !spec.flags.no_time2vec {
        // frequencies and phases spread over a useful range instead of the
        // small-std projection init
        let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-PI..PI)).collect();
        p.insert("time2vec.w", Tensor::row_vector(w));
        p.insert("time2vec.b", Tensor::row_vector(b));
    }
    if !spec.flags.no_abs_pos {
        p.insert("pos.table", truncated_normal(rng, spec.max_len, d, INIT_STD));
    }
}

fn transformer_prefix(shared: bool, v: usize) -> String {
    if shared {
        "enc.tf.shared".to_string()
    } else {
        format!("enc.tf.{v}")
    }
}

/// L×d embedding of a token sequence.
pub fn embed_tokens(g: &mut Graph, spec: &EmbedSpec, seq: &TokenSequence) -> Result<NodeId> {
    let l = seq.len();
    if let Some(&p) = seq.positions.iter().find(|&&p| p >= spec.max_len) {
        return Err(Error::Input(format!(
            "position {p} exceeds the positional table of {}",
            spec.max_len
        )));
    }
    if let Some(&v) = seq.variable_ids.iter().find(|&&v| v >= spec.n_variables) {
        return Err(Error::Input(format!("variable id {v} outside vocabulary")));
    }
    let shared = spec.flags.shared_encoder;
    let rows: Rc<Vec<usize>> = Rc::new(if shared { vec![0; l] } else { seq.variable_ids.clone() });

    let mut out = match spec.encoder {
        EncoderKind::Linear => {
            let x = g.input(Tensor::column(seq.values.clone()));
            let w = g.param("enc.w");
            let b = g.param("enc.b");
            let w = g.gather(w, rows.clone());
            let b = g.gather(b, rows);
            let h = g.mul_col(w, x);
            let h = g.add(h, b);
            g.gelu(h)
        }
        EncoderKind::Conv1d => {
            let taps = conv_taps(seq);
            let b = g.param("enc.conv.b");
            let mut h = g.gather(b, rows.clone());
            for (tap, col) in taps.into_iter().enumerate() {
                let x = g.input(Tensor::column(col));
                let w = g.param(&format!("enc.conv.w{tap}"));
                let w = g.gather(w, rows.clone());
                let term = g.mul_col(w, x);
                h = g.add(h, term);
            }
            g.gelu(h)
        }
        EncoderKind::Transformer => transformer_encoders(g, spec, seq)?,
    };
    if shared {
        let table = g.param("enc.var_emb");
        let ids = g.gather(table, Rc::new(seq.variable_ids.clone()));
        out = g.add(out, ids);
    }
    if !spec.flags.no_time2vec {
        let t = g.input(Tensor::column(seq.times.clone()));
        let w = g.param("time2vec.w");
        let b = g.param("time2vec.b");
        let lin = g.matmul(t, w);
        let lin = g.add_row(lin, b);
        let t2v = g.sin_tail(lin, 1);
        out = g.add(out, t2v);
    }
    if !spec.flags.no_abs_pos {
        let table = g.param("pos.table");
        let pos = g.gather(table, Rc::new(seq.positions.clone()));
        out = g.add(out, pos);
    }
    debug_assert_eq!(g.shape(out), (l, spec.d));
    Ok(out)
}

/// Value columns for each convolution tap: tap `j` holds the value of the
/// `j`-th previous token of the same variable, or 0 when there is none.
pub fn conv_taps(seq: &TokenSequence) -> Vec<Vec<f64>> {
    let l = seq.len();
    let mut taps = vec![vec![0.0; l]; CONV_TAPS];
    let mut history: std::collections::HashMap<usize, Vec<f64>> = Default::default();
    for i in 0..l {
        let h = history.entry(seq.variable_ids[i]).or_default();
        h.push(seq.values[i]);
        for (j, tap) in taps.iter_mut().enumerate() {
            if h.len() > j {
                tap[i] = h[h.len() - 1 - j];
            }
        }
    }
    taps
}

/// One single-layer, single-head self-attention encoder per variable over
/// that variable's own tokens.
fn transformer_encoders(g: &mut Graph, spec: &EmbedSpec, seq: &TokenSequence) -> Result<NodeId> {
    let d = spec.d;
    let l = seq.len();
    if l == 0 {
        return Ok(g.input(Tensor::zeros(0, d)));
    }
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(l);
    for v in 0..spec.n_variables {
        let idx: Vec<usize> = (0..l).filter(|&i| seq.variable_ids[i] == v).collect();
        if idx.is_empty() {
            continue;
        }
        let pre = transformer_prefix(spec.flags.shared_encoder, v);
        let x = g.input(Tensor::column(idx.iter().map(|&i| seq.values[i]).collect()));
        let in_w = g.param(&format!("{pre}.in_w"));
        let in_b = g.param(&format!("{pre}.in_b"));
        let h = g.matmul(x, in_w);
        let h = g.add_row(h, in_b);
        let wq = g.param(&format!("{pre}.wq"));
        let wk = g.param(&format!("{pre}.wk"));
        let wv = g.param(&format!("{pre}.wv"));
        let q = g.matmul(h, wq);
        let k = g.matmul(h, wk);
        let vv = g.matmul(h, wv);
        let s = g.matmul_bt(q, k);
        let s = g.affine(s, 1.0 / (d as f64).sqrt(), 0.0);
        let a = g.softmax(s, None);
        let o = g.matmul(a, vv);
        let r = g.add(h, o);
        let n = g.layer_norm(r);
        let ln_g = g.param(&format!("{pre}.ln_g"));
        let ln_b = g.param(&format!("{pre}.ln_b"));
        let n = g.mul_row(n, ln_g);
        let n = g.add_row(n, ln_b);
        parts.push(n);
        order.extend(idx);
    }
    let stacked = g.concat_rows(&parts);
    // stacked row r holds token order[r]; invert to token order
    let mut inv = vec![0; l];
    for (r, &i) in order.iter().enumerate() {
        inv[i] = r;
    }
    Ok(g.gather(stacked, Rc::new(inv)))
}
