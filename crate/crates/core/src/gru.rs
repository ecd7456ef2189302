//! Recurrent baseline: a stacked GRU over the same token embeddings, pooled
//! by attention with a learned query, feeding the same per-task heads.

use rand::Rng;

use crate::attention::{static_rows, task_heads};
use crate::embedding::{embed_tokens, INIT_STD};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::model::{ForwardCtx, ModelConfig, Sample};
use crate::params::{fan_in_std, truncated_normal, ModelParams};
use crate::tensor::Tensor;
use crate::N_TASKS;

pub fn init_gru<R: Rng>(p: &mut ModelParams, cfg: &ModelConfig, rng: &mut R) {
    let d = cfg.d();
    for l in 0..cfg.gru_layers {
        let pre = format!("gru.{l}");
        p.insert(format!("{pre}.wi"), truncated_normal(rng, d, 3 * d, fan_in_std(d)));
        p.insert(format!("{pre}.bi"), Tensor::zeros(1, 3 * d));
        p.insert(format!("{pre}.wh"), truncated_normal(rng, d, 3 * d, fan_in_std(d)));
        p.insert(format!("{pre}.bh"), Tensor::zeros(1, 3 * d));
        p.insert(format!("{pre}.h0"), Tensor::zeros(1, d));
    }
    p.insert("gru.attn.q", truncated_normal(rng, 1, d, INIT_STD));
}

/// Reset and update gate activations of one step of one layer.
#[derive(Debug, Clone, Copy)]
pub struct GateNodes {
    pub layer: usize,
    pub reset: NodeId,
    pub update: NodeId,
}

/// One GRU layer over the rows of `x` (L×d), starting from `h0` (1×d).
/// Returns the L×d hidden states (or `None` for an empty input).
fn layer(g: &mut Graph, x: NodeId, l: usize, d: usize, trace: &mut Option<&mut Vec<GateNodes>>) -> Option<NodeId> {
    let n = g.shape(x).0;
    if n == 0 {
        return None;
    }
    let pre = format!("gru.{l}");
    let wi = g.param(&format!("{pre}.wi"));
    let bi = g.param(&format!("{pre}.bi"));
    let wh = g.param(&format!("{pre}.wh"));
    let bh = g.param(&format!("{pre}.bh"));
    let xi = g.matmul(x, wi);
    let xi = g.add_row(xi, bi);
    let mut h = g.param(&format!("{pre}.h0"));
    let mut states = Vec::with_capacity(n);
    for t in 0..n {
        let xt = g.slice_rows(xi, t, 1);
        let hh = g.matmul(h, wh);
        let hh = g.add_row(hh, bh);
        let gate = |g: &mut Graph, k: usize| {
            let a = g.slice_cols(xt, k * d, d);
            let b = g.slice_cols(hh, k * d, d);
            g.add(a, b)
        };
        let r = gate(g, 0);
        let r = g.sigmoid(r);
        let z = gate(g, 1);
        let z = g.sigmoid(z);
        let xn = g.slice_cols(xt, 2 * d, d);
        let hn = g.slice_cols(hh, 2 * d, d);
        let rh = g.mul(r, hn);
        let cand = g.add(xn, rh);
        let cand = g.tanh(cand);
        // h' = (1 - z) ⊙ n + z ⊙ h = n + z ⊙ (h - n)
        let neg = g.affine(cand, -1.0, 0.0);
        let diff = g.add(h, neg);
        let zd = g.mul(z, diff);
        h = g.add(cand, zd);
        states.push(h);
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(GateNodes {
                layer: l,
                reset: r,
                update: z,
            });
        }
    }
    Some(g.concat_rows(&states))
}

fn run(
    g: &mut Graph,
    cfg: &ModelConfig,
    s: &Sample,
    ctx: &mut ForwardCtx,
    mut trace: Option<&mut Vec<GateNodes>>,
) -> Result<NodeId> {
    let d = cfg.d();
    let emb = embed_tokens(g, &cfg.embed_spec(), &s.tokens)?;
    let mut x = ctx.dropout(g, emb);
    let mut top = None;
    for l in 0..cfg.gru_layers {
        top = layer(g, x, l, d, &mut trace);
        if let Some(h) = top {
            x = if l + 1 < cfg.gru_layers { ctx.dropout(g, h) } else { h };
        }
    }
    let h0 = g.param(&format!("gru.{}.h0", cfg.gru_layers - 1));
    let keys = match top {
        Some(h) => g.concat_rows(&[h0, h]),
        None => h0,
    };
    let q = g.param("gru.attn.q");
    let scores = g.matmul_bt(q, keys);
    let scores = g.affine(scores, 1.0 / (d as f64).sqrt(), 0.0);
    let w = g.softmax(scores, None);
    let pooled = g.matmul(w, keys);
    let pooled = ctx.dropout(g, pooled);
    let pooled = g.broadcast_rows(pooled, N_TASKS);
    let st = static_rows(g, s);
    Ok(task_heads(g, &[pooled, st], "head"))
}

/// 9×1 logits of one sample.
pub fn forward(g: &mut Graph, cfg: &ModelConfig, s: &Sample, ctx: &mut ForwardCtx) -> Result<NodeId> {
    run(g, cfg, s, ctx, None)
}

/// Forward pass that also reports the gate activations of every step.
pub fn forward_with_gates(
    g: &mut Graph,
    cfg: &ModelConfig,
    s: &Sample,
    ctx: &mut ForwardCtx,
) -> Result<(NodeId, Vec<GateNodes>)> {
    let mut trace = Vec::new();
    let out = run(g, cfg, s, ctx, Some(&mut trace))?;
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use crate::model::{init_params, predict, Architecture};
    use crate::tokenizer::TokenSequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_variables: 3,
            static_dim: 1,
            note_dim: 2,
            max_len: 64,
            attention: AttentionConfig {
                d: 6,
                ..AttentionConfig::default()
            },
            architecture: Architecture::Gru,
            ..ModelConfig::default()
        }
    }

    fn sample(n: usize) -> Sample {
        Sample {
            tokens: TokenSequence {
                variable_ids: (0..n).map(|i| i % 3).collect(),
                values: (0..n).map(|i| (i as f64 * 0.7).sin() * 3.0).collect(),
                times: (0..n).map(|i| i as f64 * 0.1).collect(),
                positions: (0..n).collect(),
            },
            static_features: vec![0.2],
            notes: Tensor::zeros(0, 2),
            labels: [0; N_TASKS],
        }
    }

    #[test]
    fn gates_stay_in_unit_interval() {
        let c = cfg();
        let p = init_params(&c, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let flat: Vec<f64> = p.flatten().iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = p.unflatten(&flat).unwrap();
        let s = sample(40);
        let mut g = Graph::new(&p);
        let (_, gates) = forward_with_gates(&mut g, &c, &s, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(gates.len(), 2 * 40);
        for gn in gates {
            for id in [gn.reset, gn.update] {
                assert!(g.value(id).data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn empty_sequence_pools_initial_state() {
        let c = cfg();
        let p = init_params(&c, 1).unwrap();
        let l = predict(&p, &c, &sample(0)).unwrap();
        assert!(l.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut c = cfg();
        c.gru_layers = 1;
        let d = c.d();
        let p = init_params(&c, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let flat: Vec<f64> = p.flatten().iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = p.unflatten(&flat).unwrap();
        let x = Tensor::from_vec(1, d, (0..d).map(|i| 0.3 * i as f64 - 0.5).collect());
        let mut g = Graph::new(&p);
        let xi = g.input(x.clone());
        let h = layer(&mut g, xi, 0, d, &mut None).unwrap();

        let h0 = p.get("gru.0.h0").unwrap();
        let mut a = crate::tensor::matmul(&x, p.get("gru.0.wi").unwrap());
        a.add_assign(p.get("gru.0.bi").unwrap());
        let mut b = crate::tensor::matmul(h0, p.get("gru.0.wh").unwrap());
        b.add_assign(p.get("gru.0.bh").unwrap());
        let sig = crate::graph::sigmoid;
        for j in 0..d {
            let r = sig(a.data[j] + b.data[j]);
            let z = sig(a.data[d + j] + b.data[d + j]);
            let n = (a.data[2 * d + j] + r * b.data[2 * d + j]).tanh();
            let expect = (1.0 - z) * n + z * h0.data[j];
            assert!((g.value(h).data[j] - expect).abs() < 1e-14);
        }
    }
}
