//! Forward and backward passes for a single sequence.
//!
//! Matrices are row-major slices. A linear layer computes `y = x W + b` with
//! `W` stored as `[in, out]` and `b` stored right after `W`.

use crate::corpus::{TokenId, CLS_ID, MASK_ID};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{BlockOffsets, ModelParams};

const LN_EPS: f64 = 1e-5;

fn linear<S: Scalar>(x: &[S], rows: usize, din: usize, wb: &[S], dout: usize) -> Vec<S> {
    let (w, b) = wb.split_at(din * dout);
    let mut y = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        y.extend_from_slice(&b[..dout]);
        let yr = &mut y[r * dout..];
        for (k, &xv) in x[r * din..(r + 1) * din].iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            for (yo, &wv) in yr.iter_mut().zip(&w[k * dout..(k + 1) * dout]) {
                *yo += xv * wv;
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients into `gwb` and returns `dL/dx`.
fn linear_backward<S: Scalar>(
    x: &[S],
    dy: &[S],
    rows: usize,
    din: usize,
    dout: usize,
    w: &[S],
    gwb: &mut [S],
) -> Vec<S> {
    let (gw, gb) = gwb.split_at_mut(din * dout);
    let mut dx = vec![S::zero(); rows * din];
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        if dyr.iter().all(|&v| v == S::zero()) {
            continue;
        }
        for (g, &d) in gb.iter_mut().zip(dyr) {
            *g += d;
        }
        let xr = &x[r * din..(r + 1) * din];
        let dxr = &mut dx[r * din..(r + 1) * din];
        for k in 0..din {
            let wk = &w[k * dout..(k + 1) * dout];
            let gwk = &mut gw[k * dout..(k + 1) * dout];
            let xv = xr[k];
            let mut acc = S::zero();
            for o in 0..dout {
                gwk[o] += xv * dyr[o];
                acc += dyr[o] * wk[o];
            }
            dxr[k] = acc;
        }
    }
    dx
}

struct NormCache<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
}

fn layer_norm<S: Scalar>(x: &[S], rows: usize, d: usize, gain: &[S], bias: &[S]) -> (Vec<S>, NormCache<S>) {
    let mut y = vec![S::zero(); rows * d];
    let mut xhat = vec![S::zero(); rows * d];
    let mut inv_std = Vec::with_capacity(rows);
    let dn = S::of(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<S>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let inv = S::one() / (var + S::of(LN_EPS)).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (xr[j] - mean) * inv;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// `gain_bias` holds the gain followed by the bias gradient slots.
fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    cache: &NormCache<S>,
    rows: usize,
    d: usize,
    gain: &[S],
    gain_bias: &mut [S],
) -> Vec<S> {
    let (gg, gb) = gain_bias.split_at_mut(d);
    let mut dx = vec![S::zero(); rows * d];
    let dn = S::of(d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        if dyr.iter().all(|&v| v == S::zero()) {
            continue;
        }
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum = S::zero();
        let mut sum_x = S::zero();
        let mut dxhat = vec![S::zero(); d];
        for j in 0..d {
            gg[j] += dyr[j] * xh[j];
            gb[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            sum += dxhat[j];
            sum_x += dxhat[j] * xh[j];
        }
        let scale = cache.inv_std[r] / dn;
        for j in 0..d {
            dx[r * d + j] = scale * (dn * dxhat[j] - sum - xh[j] * sum_x);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(u: S) -> S {
    let t = (S::of(GELU_C) * (u + S::of(GELU_A) * u * u * u)).tanh();
    S::of(0.5) * u * (S::one() + t)
}

fn gelu_grad<S: Scalar>(u: S) -> S {
    let t = (S::of(GELU_C) * (u + S::of(GELU_A) * u * u * u)).tanh();
    let half = S::of(0.5);
    half * (S::one() + t) + half * u * (S::one() - t * t) * S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_A) * u * u)
}

struct BlockCache<S> {
    ln1: NormCache<S>,
    a: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    /// heads × n × n attention probabilities
    probs: Vec<S>,
    ctx: Vec<S>,
    ln2: NormCache<S>,
    b: Vec<S>,
    u: Vec<S>,
    g: Vec<S>,
}

/// Activations kept for the backward pass.
pub(crate) struct Trace<S> {
    tokens: Vec<TokenId>,
    blocks: Vec<BlockCache<S>>,
    lnf: NormCache<S>,
    /// Final hidden states, n × d.
    pub hidden: Vec<S>,
}

impl<S: Scalar> Trace<S> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn row(&self, pos: usize, d: usize) -> &[S] {
        &self.hidden[pos * d..(pos + 1) * d]
    }
}

fn check_tokens<S: Scalar>(params: &ModelParams<S>, tokens: &[TokenId]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {} outside 1..={}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Contract(format!("token id {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(())
}

pub(crate) fn forward<S: Scalar>(params: &ModelParams<S>, tokens: &[TokenId]) -> Result<Trace<S>> {
    check_tokens(params, tokens)?;
    let cfg = &params.config;
    let lay = params.layout();
    let p = &params.flat;
    let (n, d, f, h) = (tokens.len(), cfg.d_model, cfg.d_ffn, cfg.num_heads);
    let dh = cfg.head_dim();
    let scale = S::one() / S::of(dh as f64).sqrt();

    let mut x = vec![S::zero(); n * d];
    for (i, &t) in tokens.iter().enumerate() {
        let e = &p[lay.tok_emb + t as usize * d..][..d];
        let pe = &p[lay.pos_emb + i * d..][..d];
        for j in 0..d {
            x[i * d + j] = e[j] + pe[j];
        }
    }

    let mut blocks = Vec::with_capacity(lay.blocks.len());
    for bo in &lay.blocks {
        let (a, ln1) = layer_norm(&x, n, d, &p[bo.ln1_g..][..d], &p[bo.ln1_b..][..d]);
        let q = linear(&a, n, d, &p[bo.wq..], d);
        let k = linear(&a, n, d, &p[bo.wk..], d);
        let v = linear(&a, n, d, &p[bo.wv..], d);
        let mut probs = vec![S::zero(); h * n * n];
        let mut ctx = vec![S::zero(); n * d];
        for head in 0..h {
            let off = head * dh;
            for i in 0..n {
                let row = &mut probs[(head * n + i) * n..][..n];
                let qi = &q[i * d + off..][..dh];
                let mut max = S::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k[j * d + off..][..dh];
                    let dot: S = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut total = S::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for s in row.iter_mut() {
                    *s /= total;
                }
                let ci = &mut ctx[i * d + off..][..dh];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &v[j * d + off..][..dh];
                    for (c, &vv) in ci.iter_mut().zip(vj) {
                        *c += pij * vv;
                    }
                }
            }
        }
        let o = linear(&ctx, n, d, &p[bo.wo..], d);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += *ov;
        }
        let (b, ln2) = layer_norm(&x, n, d, &p[bo.ln2_g..][..d], &p[bo.ln2_b..][..d]);
        let u = linear(&b, n, d, &p[bo.w1..], f);
        let g: Vec<S> = u.iter().map(|&v| gelu(v)).collect();
        let out = linear(&g, n, f, &p[bo.w2..], d);
        for (xv, ov) in x.iter_mut().zip(&out) {
            *xv += *ov;
        }
        blocks.push(BlockCache { ln1, a, q, k, v, probs, ctx, ln2, b, u, g });
    }
    let (hidden, lnf) = layer_norm(&x, n, d, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d]);
    Ok(Trace { tokens: tokens.to_vec(), blocks, lnf, hidden })
}

fn block_backward<S: Scalar>(
    params: &ModelParams<S>,
    bo: &BlockOffsets,
    c: &BlockCache<S>,
    dx: Vec<S>,
    n: usize,
    grad: &mut [S],
) -> Vec<S> {
    let cfg = &params.config;
    let p = &params.flat;
    let (d, f, h) = (cfg.d_model, cfg.d_ffn, cfg.num_heads);
    let dh = cfg.head_dim();
    let scale = S::one() / S::of(dh as f64).sqrt();

    // feed-forward residual branch
    let dg = linear_backward(&c.g, &dx, n, f, d, &p[bo.w2..], &mut grad[bo.w2..bo.w2 + f * d + d]);
    let du: Vec<S> = dg.iter().zip(&c.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
    let db = linear_backward(&c.b, &du, n, d, f, &p[bo.w1..], &mut grad[bo.w1..bo.w1 + d * f + f]);
    let dln2 = layer_norm_backward(&db, &c.ln2, n, d, &p[bo.ln2_g..][..d], &mut grad[bo.ln2_g..bo.ln2_g + 2 * d]);
    let dmid: Vec<S> = dx.iter().zip(&dln2).map(|(&a, &b)| a + b).collect();

    // attention residual branch
    let dctx = linear_backward(&c.ctx, &dmid, n, d, d, &p[bo.wo..], &mut grad[bo.wo..bo.wo + d * d + d]);
    let mut dq = vec![S::zero(); n * d];
    let mut dk = vec![S::zero(); n * d];
    let mut dv = vec![S::zero(); n * d];
    let mut dp = vec![S::zero(); n];
    for head in 0..h {
        let off = head * dh;
        for i in 0..n {
            let probs = &c.probs[(head * n + i) * n..][..n];
            let dci = &dctx[i * d + off..][..dh];
            if dci.iter().all(|&v| v == S::zero()) {
                continue;
            }
            let mut weighted = S::zero();
            for j in 0..n {
                let vj = &c.v[j * d + off..][..dh];
                dp[j] = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                weighted += dp[j] * probs[j];
                let dvj = &mut dv[j * d + off..][..dh];
                for (t, &dc) in dvj.iter_mut().zip(dci) {
                    *t += probs[j] * dc;
                }
            }
            let qi: Vec<S> = c.q[i * d + off..][..dh].to_vec();
            for j in 0..n {
                let ds = probs[j] * (dp[j] - weighted) * scale;
                if ds == S::zero() {
                    continue;
                }
                for t in 0..dh {
                    dq[i * d + off + t] += ds * c.k[j * d + off + t];
                    dk[j * d + off + t] += ds * qi[t];
                }
            }
        }
    }
    let mut da = linear_backward(&c.a, &dq, n, d, d, &p[bo.wq..], &mut grad[bo.wq..bo.wq + d * d + d]);
    for (src, w) in [(&dk, bo.wk), (&dv, bo.wv)] {
        let part = linear_backward(&c.a, src, n, d, d, &p[w..], &mut grad[w..w + d * d + d]);
        for (a, b) in da.iter_mut().zip(part) {
            *a += b;
        }
    }
    let dln1 = layer_norm_backward(&da, &c.ln1, n, d, &p[bo.ln1_g..][..d], &mut grad[bo.ln1_g..bo.ln1_g + 2 * d]);
    dmid.iter().zip(&dln1).map(|(&a, &b)| a + b).collect()
}

/// Backpropagates `d_hidden` (gradient w.r.t. the final hidden states,
/// n × d) through the encoder, accumulating into `grad`.
pub(crate) fn backward<S: Scalar>(params: &ModelParams<S>, trace: &Trace<S>, d_hidden: &[S], grad: &mut [S]) {
    let cfg = &params.config;
    let lay = params.layout();
    let (n, d) = (trace.len(), cfg.d_model);
    let mut dx = layer_norm_backward(
        d_hidden,
        &trace.lnf,
        n,
        d,
        &params.flat[lay.lnf_g..][..d],
        &mut grad[lay.lnf_g..lay.lnf_g + 2 * d],
    );
    for (bo, cache) in lay.blocks.iter().zip(&trace.blocks).rev() {
        dx = block_backward(params, bo, cache, dx, n, grad);
    }
    for (i, &t) in trace.tokens.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        let ge = &mut grad[lay.tok_emb + t as usize * d..][..d];
        for (g, &v) in ge.iter_mut().zip(row) {
            *g += v;
        }
        let gp = &mut grad[lay.pos_emb + i * d..][..d];
        for (g, &v) in gp.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Logit of `token` given a final hidden row, through the tied projection.
pub(crate) fn token_logit<S: Scalar>(params: &ModelParams<S>, hidden: &[S], token: TokenId) -> S {
    let lay = params.layout();
    let d = params.config.d_model;
    let e = &params.flat[lay.tok_emb + token as usize * d..][..d];
    hidden.iter().zip(e).map(|(&a, &b)| a * b).sum::<S>() + params.flat[lay.mlm_bias + token as usize]
}

pub(crate) fn cls_from_hidden<S: Scalar>(params: &ModelParams<S>, hidden: &[S]) -> Vec<S> {
    let lay = params.layout();
    let c = params.config.num_labels;
    linear(hidden, 1, params.config.d_model, &params.flat[lay.cls_w..lay.cls_b + c], c)
}

fn check_mask<S: Scalar>(params: &ModelParams<S>, tokens: &[TokenId], mask_position: usize) -> Result<()> {
    check_tokens(params, tokens)?;
    if mask_position >= tokens.len() {
        return Err(Error::Contract(format!("mask position {mask_position} outside sequence of {}", tokens.len())));
    }
    if tokens[mask_position] != MASK_ID {
        return Err(Error::Contract(format!("token at position {mask_position} is not the mask token")));
    }
    Ok(())
}

/// Final hidden state at `position`.
pub fn hidden_at<S: Scalar>(params: &ModelParams<S>, tokens: &[TokenId], position: usize) -> Result<Vec<S>> {
    if position >= tokens.len() {
        return Err(Error::Contract(format!("position {position} outside sequence of {}", tokens.len())));
    }
    let trace = forward(params, tokens)?;
    Ok(trace.row(position, params.config.d_model).to_vec())
}

/// Full-vocabulary logits at the masked position.
pub fn mlm_logits<S: Scalar>(params: &ModelParams<S>, tokens: &[TokenId], mask_position: usize) -> Result<Vec<S>> {
    check_mask(params, tokens, mask_position)?;
    let h = hidden_at(params, tokens, mask_position)?;
    Ok((0..params.config.vocab_size as TokenId).map(|t| token_logit(params, &h, t)).collect())
}

/// Logits of the given tokens only, at the masked position.
pub fn restricted_logits<S: Scalar>(
    params: &ModelParams<S>,
    tokens: &[TokenId],
    mask_position: usize,
    candidates: &[TokenId],
) -> Result<Vec<S>> {
    check_mask(params, tokens, mask_position)?;
    if let Some(t) = candidates.iter().find(|&&t| t as usize >= params.config.vocab_size) {
        return Err(Error::Contract(format!("candidate token {t} outside vocabulary")));
    }
    let h = hidden_at(params, tokens, mask_position)?;
    Ok(candidates.iter().map(|&t| token_logit(params, &h, t)).collect())
}

/// Classification-head logits read at the leading `[CLS]` position.
pub fn cls_logits<S: Scalar>(params: &ModelParams<S>, tokens: &[TokenId]) -> Result<Vec<S>> {
    if tokens.first() != Some(&CLS_ID) {
        return Err(Error::Contract("classification input must start with [CLS]".into()));
    }
    let h = hidden_at(params, tokens, 0)?;
    Ok(cls_from_hidden(params, &h))
}
