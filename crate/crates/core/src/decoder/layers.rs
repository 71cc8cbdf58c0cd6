use crate::error::Result;
use crate::numerics::{nn, Graph, ParamStore, Real, Var};

/// `LN(Attn(q, kv, kv) + q)`. An empty key set contributes nothing, leaving `LN(q)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    q: Var,
    kv: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let ln = format!("{prefix}_ln");
    if g.shape(kv)[0] == 0 {
        return nn::layer_norm(g, store, &ln, q);
    }
    let a = nn::attention(g, store, prefix, q, kv, kv, heads, mask)?;
    let r = g.add(a, q)?;
    nn::layer_norm(g, store, &ln, r)
}

pub fn ffn_block<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = nn::ffn(g, store, prefix, x)?;
    let r = g.add(h, x)?;
    nn::layer_norm(g, store, &format!("{prefix}_ln"), r)
}

/// SA → CA → FFN, each wrapped as `LN(f(x) + x)`.
pub fn standard_layer<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    q: Var,
    f: Var,
    heads: usize,
    sa_mask: Option<&[bool]>,
) -> Result<Var> {
    let x = attention_block(g, store, &format!("{prefix}.sa"), q, q, heads, sa_mask)?;
    let x = attention_block(g, store, &format!("{prefix}.ca0"), x, f, heads, None)?;
    ffn_block(g, store, &format!("{prefix}.ffn"), x)
}

/// `m` parallel CA blocks on the incoming queries, channel concatenation, fusion
/// back to `C`, then SA and FFN. Returns the layer output and the `m` CA outputs.
#[allow(clippy::too_many_arguments)]
pub fn reordered_layer<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    q: Var,
    f: Var,
    heads: usize,
    m: usize,
    sa_mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let mut taps = Vec::with_capacity(m);
    for b in 0..m {
        taps.push(attention_block(
            g,
            store,
            &format!("{prefix}.ca{b}"),
            q,
            f,
            heads,
            None,
        )?);
    }
    let cat = if m == 1 { taps[0] } else { g.concat_cols(&taps)? };
    let fused = nn::linear(g, store, &format!("{prefix}.fuse"), cat)?;
    let x = attention_block(g, store, &format!("{prefix}.sa"), fused, fused, heads, sa_mask)?;
    let x = ffn_block(g, store, &format!("{prefix}.ffn"), x)?;
    Ok((x, taps))
}

/// Block-diagonal self-attention mask for `groups` consecutive blocks of `size` queries.
pub fn group_mask(groups: usize, size: usize) -> Vec<bool> {
    let n = groups * size;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = i / size == j / size;
        }
    }
    mask
}
