//! Shared transformer building blocks used by the LM backbone, the
//! conformer-style audio encoder, and the vocoder predictor.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::numerics::{xavier_uniform, GraphBuilder, NodeId, ParamStore, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;
/// Additive attention mask value; large enough to underflow softmax to an
/// exact zero yet finite so finite differences stay well defined.
pub(crate) const MASK_NEG: f64 = -1e30;

pub(crate) fn linear_params(
    rng: &mut ChaCha8Rng,
    params: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) {
    params.insert(
        format!("{}.w", prefix),
        xavier_uniform(rng, &[d_in, d_out], d_in, d_out),
    );
    params.insert(format!("{}.b", prefix), Tensor::zeros(&[d_out]));
}

pub(crate) fn ln_params(params: &mut ParamStore, prefix: &str, d: usize) {
    params.insert(format!("{}.g", prefix), Tensor::full(&[d], 1.0));
    params.insert(format!("{}.b", prefix), Tensor::zeros(&[d]));
}

pub(crate) fn attention_params(
    rng: &mut ChaCha8Rng,
    params: &mut ParamStore,
    prefix: &str,
    d: usize,
) {
    for name in ["q", "k", "v", "o"] {
        linear_params(rng, params, &format!("{}.{}", prefix, name), d, d);
    }
}

pub(crate) fn affine_ln(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    x: NodeId,
    prefix: &str,
) -> NodeId {
    let n = b.layer_norm(x, LN_EPS);
    let scaled = b.mul_row(n, pn[&format!("{}.g", prefix)]);
    b.add_row(scaled, pn[&format!("{}.b", prefix)])
}

pub(crate) fn linear(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    x: NodeId,
    prefix: &str,
) -> NodeId {
    let h = b.matmul(x, pn[&format!("{}.w", prefix)]);
    b.add_row(h, pn[&format!("{}.b", prefix)])
}

pub(crate) fn ffn(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    x: NodeId,
    prefix: &str,
) -> NodeId {
    let h = linear(b, pn, x, &format!("{}.in", prefix));
    let h = b.gelu(h);
    linear(b, pn, h, &format!("{}.out", prefix))
}

/// Multi-head self-attention; an additive mask of −1e30 on blocked pairs
/// makes it causal, `None` leaves it bidirectional.
pub(crate) fn attention(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    x: NodeId,
    prefix: &str,
    heads: usize,
    mask: Option<NodeId>,
) -> NodeId {
    let d = b.value(x).shape()[1];
    let dh = d / heads;
    let q = linear(b, pn, x, &format!("{}.q", prefix));
    let k = linear(b, pn, x, &format!("{}.k", prefix));
    let v = linear(b, pn, x, &format!("{}.v", prefix));
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = b.slice_cols(q, lo, hi);
        let kh = b.slice_cols(k, lo, hi);
        let vh = b.slice_cols(v, lo, hi);
        let kt = b.transpose(kh);
        let scores = b.matmul(qh, kt);
        let scores = b.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = match mask {
            Some(m) => b.add(scores, m),
            None => scores,
        };
        let probs = b.softmax(scores);
        parts.push(b.matmul(probs, vh));
    }
    let ctx = b.concat_cols(&parts);
    linear(b, pn, ctx, &format!("{}.o", prefix))
}

pub(crate) fn causal_mask(b: &mut GraphBuilder, t_len: usize) -> NodeId {
    let mut m = vec![0.0; t_len * t_len];
    for i in 0..t_len {
        for j in (i + 1)..t_len {
            m[i * t_len + j] = MASK_NEG;
        }
    }
    b.constant(Tensor::new(vec![t_len, t_len], m).unwrap())
}

pub fn sinusoidal_pe(t_len: usize, d: usize) -> Tensor {
    let mut pe = vec![0.0; t_len * d];
    for t in 0..t_len {
        for i in 0..d.div_ceil(2) {
            let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            pe[t * d + 2 * i] = (t as f64 * rate).sin();
            if 2 * i + 1 < d {
                pe[t * d + 2 * i + 1] = (t as f64 * rate).cos();
            }
        }
    }
    Tensor::new(vec![t_len, d], pe).unwrap()
}

pub(crate) fn bind_const_params(
    b: &mut GraphBuilder,
    params: &ParamStore,
) -> BTreeMap<String, NodeId> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), b.constant(v.clone())))
        .collect()
}

/// One pre-norm transformer block: x += attn(ln(x)); x += ffn(ln(x)).
pub(crate) fn transformer_block(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    x: NodeId,
    prefix: &str,
    heads: usize,
    mask: Option<NodeId>,
) -> NodeId {
    let h = affine_ln(b, pn, x, &format!("{}.ln1", prefix));
    let h = attention(b, pn, h, &format!("{}.attn", prefix), heads, mask);
    let x = b.add(x, h);
    let h = affine_ln(b, pn, x, &format!("{}.ln2", prefix));
    let h = ffn(b, pn, h, &format!("{}.ff", prefix));
    b.add(x, h)
}

pub(crate) fn transformer_block_params(
    rng: &mut ChaCha8Rng,
    params: &mut ParamStore,
    prefix: &str,
    d: usize,
    ff: usize,
) {
    ln_params(params, &format!("{}.ln1", prefix), d);
    attention_params(rng, params, &format!("{}.attn", prefix), d);
    ln_params(params, &format!("{}.ln2", prefix), d);
    linear_params(rng, params, &format!("{}.ff.in", prefix), d, ff);
    linear_params(rng, params, &format!("{}.ff.out", prefix), ff, d);
}
