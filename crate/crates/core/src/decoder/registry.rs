//! Parameter naming and initialization.
//!
//! Names are shared across modes wherever the roles coincide, so one store can
//! seed every mode identically (each parameter draws from its own name-keyed
//! stream):
//!
//! ```text
//! bev.stem, bev.pos                       feature stem, per-cell positions
//! lane.query                              N̄_L × C
//! layer{i}.sa, layer{i}.sa_ln             self-attention block
//! layer{i}.ca{m}, layer{i}.ca{m}_ln       cross-attention block m
//! layer{i}.fuse                           M·C → C (reordered only)
//! layer{i}.ffn, layer{i}.ffn_ln
//! traffic.stem, traffic.query, traffic.layer{j}.*
//! head.lane_cls, head.lane_reg, head.traffic_cls, head.traffic_box
//! head.topo_ll, head.topo_lt              pairwise MLPs
//! ```

use super::{DecoderConfig, DecoderMode};
use crate::error::Result;
use crate::numerics::{nn, ParamStore, Real, Tensor};
use crate::scene::{BEV_CHANNELS, TRAFFIC_CLASSES, TRAFFIC_INPUT_DIM};

/// Classification bias giving an initial foreground probability of 1%.
pub const PRIOR_BIAS: f64 = -4.59511985013459;

pub fn register_attention_block<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    nn::register_attention(store, prefix, c)?;
    store.add_layer_norm(&format!("{prefix}_ln"), c)
}

fn register_ffn_block<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize, hidden: usize) -> Result<()> {
    nn::register_ffn(store, prefix, c, hidden)?;
    store.add_layer_norm(&format!("{prefix}_ln"), c)
}

fn register_mlp<T: Real>(store: &mut ParamStore<T>, prefix: &str, i: usize, h: usize, o: usize) -> Result<()> {
    store.add_linear(&format!("{prefix}.fc1"), i, h)?;
    store.add_linear(&format!("{prefix}.fc2"), h, o)
}

/// Registers a standard layer: SA, one CA block, FFN.
pub fn register_standard_layer<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &DecoderConfig) -> Result<()> {
    let c = cfg.channels;
    register_attention_block(store, &format!("{prefix}.sa"), c)?;
    register_attention_block(store, &format!("{prefix}.ca0"), c)?;
    register_ffn_block(store, &format!("{prefix}.ffn"), c, cfg.ffn_hidden)
}

/// Registers a reordered layer: `m` CA blocks, the fusion linear, SA, FFN.
///
/// The fusion weight starts as `m` stacked copies of `I/m`, i.e. the mean of
/// the block outputs; for `m = 1` that is the identity.
pub fn register_reordered_layer<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &DecoderConfig,
    m: usize,
) -> Result<()> {
    let c = cfg.channels;
    for b in 0..m {
        register_attention_block(store, &format!("{prefix}.ca{b}"), c)?;
    }
    store.add_linear(&format!("{prefix}.fuse"), m * c, c)?;
    let mut w = vec![0.0; m * c * c];
    for b in 0..m {
        for j in 0..c {
            w[(b * c + j) * c + j] = 1.0 / m as f64;
        }
    }
    store.set(&format!("{prefix}.fuse.weight"), Tensor::from_f64(&[m * c, c], &w)?)?;
    store.set(&format!("{prefix}.fuse.bias"), Tensor::zeros(&[c]))?;
    register_attention_block(store, &format!("{prefix}.sa"), c)?;
    register_ffn_block(store, &format!("{prefix}.ffn"), c, cfg.ffn_hidden)
}

/// Initial value of the learned per-cell position table: sin/cos pairs of the
/// row coordinate in the first half of the channels and of the column
/// coordinate in the second, at geometrically spaced frequencies from one
/// cycle per window up to a quarter of the grid resolution. A random table
/// would leave dot-product attention unable to prefer one region of the grid
/// over another until it had been learned.
pub fn sine_positions<T: Real>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let half = c / 2;
    let mut data = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let row = &mut data[(i * w + j) * c..][..c];
            for (offset, width, n, u) in [(0, half, h, i), (half, c - half, w, j)] {
                let pairs = width / 2;
                let top = (n as f64 / 4.0).max(1.0);
                for k in 0..pairs {
                    let f = if pairs > 1 {
                        top.powf(k as f64 / (pairs - 1) as f64)
                    } else {
                        1.0
                    };
                    let a = std::f64::consts::TAU * f * (u as f64 + 0.5) / n as f64;
                    row[offset + 2 * k] = a.sin();
                    row[offset + 2 * k + 1] = a.cos();
                }
            }
        }
    }
    Tensor::from_f64(&[h * w, c], &data).expect("shape matches data")
}

/// Builds and initializes every parameter the configured decoder touches.
pub fn init_params<T: Real>(cfg: &DecoderConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let c = cfg.channels;
    let mut s = ParamStore::new(seed);

    s.add_linear("bev.stem", BEV_CHANNELS, c)?;
    s.add_const("bev.pos", &[cfg.bev_h * cfg.bev_w, c], 0.0)?;
    s.set("bev.pos", sine_positions(cfg.bev_h, cfg.bev_w, c))?;
    s.add_normal("lane.query", &[cfg.lane_queries, c], 1.0)?;
    for i in 0..cfg.layers {
        let prefix = format!("layer{i}");
        match cfg.mode {
            DecoderMode::Reordered => register_reordered_layer(&mut s, &prefix, cfg, cfg.parallel_blocks)?,
            _ => register_standard_layer(&mut s, &prefix, cfg)?,
        }
    }

    s.add_linear("traffic.stem", TRAFFIC_INPUT_DIM, c)?;
    s.add_normal("traffic.query", &[cfg.traffic_queries, c], 1.0)?;
    for j in 0..cfg.traffic_layers {
        register_standard_layer(&mut s, &format!("traffic.layer{j}"), cfg)?;
    }

    register_mlp(&mut s, "head.lane_cls", c, c, 1)?;
    register_mlp(&mut s, "head.lane_reg", c, c, cfg.points * 3)?;
    s.add_linear("head.traffic_cls", c, TRAFFIC_CLASSES)?;
    register_mlp(&mut s, "head.traffic_box", c, c, 4)?;
    register_mlp(&mut s, "head.topo_ll", 2 * c, cfg.topo_hidden, 1)?;
    register_mlp(&mut s, "head.topo_lt", 2 * c, cfg.topo_hidden, 1)?;
    for (name, n) in [
        ("head.lane_cls.fc2.bias", 1),
        ("head.traffic_cls.bias", TRAFFIC_CLASSES),
        ("head.topo_ll.fc2.bias", 1),
        ("head.topo_lt.fc2.bias", 1),
    ] {
        s.set(name, Tensor::full(&[n], T::of(PRIOR_BIAS)))?;
    }
    Ok(s)
}
