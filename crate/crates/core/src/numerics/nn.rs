//! Neural building blocks on top of [`Graph`].

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Var};

pub const LN_EPS: f64 = 1e-5;

pub fn register_attention<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    for p in ["q", "k", "v", "out"] {
        store.add_linear(&format!("{prefix}.{p}"), c, c)?;
    }
    Ok(())
}

pub fn register_ffn<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize, hidden: usize) -> Result<()> {
    store.add_linear(&format!("{prefix}.fc1"), c, hidden)?;
    store.add_linear(&format!("{prefix}.fc2"), hidden, c)
}

/// `x · W + b` with parameters `{prefix}.weight`, `{prefix}.bias`.
pub fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Two linear layers with a GELU between; shape preserving.
pub fn ffn<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.fc2"), h)
}

/// Multi-head scaled dot-product attention with learned projections.
///
/// `mask[i * n_k + j] == false` removes key `j` from query `i`'s softmax.
/// Self-attention is the call with `k == v == q`.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    attention_with_weights(g, store, prefix, q, k, v, heads, mask).map(|(out, _)| out)
}

/// As [`attention`], also returning the per-head softmax nodes.
#[allow(clippy::too_many_arguments)]
pub fn attention_with_weights<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let c = g.shape(q).get(1).copied().unwrap_or(0);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("channels {c} not divisible by {heads} heads")));
    }
    let n_q = g.shape(q)[0];
    let n_k = g.shape(k)[0];
    if g.shape(v)[0] != n_k {
        return Err(Error::Dimension {
            op: "attention",
            lhs: g.shape(k).to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    if let Some(m) = mask {
        if m.len() != n_q * n_k {
            return Err(Error::Dimension {
                op: "attention mask",
                lhs: vec![n_q, n_k],
                rhs: vec![m.len()],
            });
        }
        if let Some(r) = (0..n_q).find(|&r| !m[r * n_k..(r + 1) * n_k].iter().any(|&b| b)) {
            return Err(Error::Config(format!("attention mask row {r} is fully masked")));
        }
    }
    if n_k == 0 {
        return Err(Error::Config("attention over an empty key set".into()));
    }

    let qp = linear(g, store, &format!("{prefix}.q"), q)?;
    let kp = linear(g, store, &format!("{prefix}.k"), k)?;
    let vp = linear(g, store, &format!("{prefix}.v"), v)?;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_cols(qp, h * d, d)?,
                g.slice_cols(kp, h * d, d)?,
                g.slice_cols(vp, h * d, d)?,
            )
        };
        let logits = g.matmul_t(qh, kh)?;
        let logits = g.scale(logits, scale);
        let p = g.softmax_rows(logits, mask)?;
        probs.push(p);
        outs.push(g.matmul(p, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let out = linear(g, store, &format!("{prefix}.out"), merged)?;
    Ok((out, probs))
}
