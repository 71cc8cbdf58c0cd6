//! Lane decoder in four modes, plus the lane, traffic and topology heads.
//!
//! In reordered mode every layer runs `M` cross-attention blocks on its input
//! queries before self-attention. Those pre-suppression query sets ("taps")
//! receive the shared heads during training and carry one-to-many topology
//! supervision downstream; inference only reads the final layer.

mod config;
mod heads;
mod layers;
mod registry;

pub use config::{DecoderConfig, DecoderMode};
pub use heads::{lane_heads, mlp, predict, topo_head, traffic_heads, PredictionValues, Predictions};
pub use layers::{attention_block, ffn_block, group_mask, reordered_layer, standard_layer};
pub use registry::{
    init_params, register_attention_block, register_reordered_layer, register_standard_layer, PRIOR_BIAS,
};

use crate::error::{Error, Result};
use crate::numerics::{nn, Graph, ParamStore, Real, Var};
use crate::scene::{BEV_CHANNELS, TRAFFIC_INPUT_DIM};

/// Query-side outputs of the lane decoder.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub final_queries: Var,
    /// Output of every layer, first to last.
    pub layer_outputs: Vec<Var>,
    /// `taps[i][m]`: output of CA block `m` in layer `i` (reordered mode only).
    pub taps: Vec<Vec<Var>>,
}

impl DecoderOutput {
    pub fn tap_count(&self) -> usize {
        self.taps.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub decoder: DecoderOutput,
    /// `layers[i][g]`: prediction set of group `g` read from layer `i`. With
    /// `training == false` only the final layer's first group is produced.
    pub layers: Vec<Vec<Predictions>>,
    /// One prediction set per tap, layer-major.
    pub taps: Vec<Predictions>,
    pub traffic_queries: Var,
}

impl ForwardOutput {
    /// The deployed prediction set: last layer, first group.
    pub fn final_predictions(&self) -> &Predictions {
        &self.layers.last().expect("at least one layer")[0]
    }
}

/// Runs the traffic and lane decoders.
///
/// `bev` is the raw `(H·W) × 8` raster, `traffic` the raw `N_T × 17` element
/// inputs; both are embedded here. With `training` set, heads are also applied
/// to every intermediate layer, group and tap.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &DecoderConfig,
    bev: Var,
    traffic: Var,
    training: bool,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let cells = cfg.bev_h * cfg.bev_w;
    if g.shape(bev) != [cells, BEV_CHANNELS] {
        return Err(Error::Dimension {
            op: "decoder bev input",
            lhs: vec![cells, BEV_CHANNELS],
            rhs: g.shape(bev).to_vec(),
        });
    }
    if g.shape(traffic).len() != 2 || g.shape(traffic)[1] != TRAFFIC_INPUT_DIM {
        return Err(Error::Dimension {
            op: "decoder traffic input",
            lhs: vec![0, TRAFFIC_INPUT_DIM],
            rhs: g.shape(traffic).to_vec(),
        });
    }

    // traffic branch: a small standard decoder over the embedded elements
    let elems = nn::linear(g, store, "traffic.stem", traffic)?;
    let mut t = g.param(store, "traffic.query")?;
    for j in 0..cfg.traffic_layers {
        t = standard_layer(g, store, &format!("traffic.layer{j}"), t, elems, cfg.heads, None)?;
    }
    let traffic_out = traffic_heads(g, store, t)?;

    // lane branch
    let stem = nn::linear(g, store, "bev.stem", bev)?;
    let pos = g.param(store, "bev.pos")?;
    let f = g.add(stem, pos)?;

    let groups = cfg.group_count();
    let size = cfg.group_size();
    let mask = (groups > 1).then(|| group_mask(groups, size));
    let mut q = g.param(store, "lane.query")?;
    let mut layer_outputs = Vec::with_capacity(cfg.layers);
    let mut taps = Vec::new();
    for i in 0..cfg.layers {
        let prefix = format!("layer{i}");
        q = match cfg.mode {
            DecoderMode::Reordered => {
                let (out, t) =
                    reordered_layer(g, store, &prefix, q, f, cfg.heads, cfg.parallel_blocks, mask.as_deref())?;
                taps.push(t);
                out
            }
            _ => standard_layer(g, store, &prefix, q, f, cfg.heads, mask.as_deref())?,
        };
        layer_outputs.push(q);
    }

    let split = |g: &mut Graph<T>, x: Var, k: usize| -> Result<Var> {
        if groups == 1 {
            Ok(x)
        } else {
            g.slice_rows(x, k * size, size)
        }
    };
    let mut layers = Vec::new();
    let mut tap_preds = Vec::new();
    if training {
        for &out in &layer_outputs {
            let mut per_group = Vec::with_capacity(groups);
            for k in 0..groups {
                let qk = split(g, out, k)?;
                per_group.push(predict(g, store, qk, t, traffic_out)?);
            }
            layers.push(per_group);
        }
        for layer_taps in &taps {
            for &tap in layer_taps {
                tap_preds.push(predict(g, store, tap, t, traffic_out)?);
            }
        }
    } else {
        let q0 = split(g, q, 0)?;
        layers.push(vec![predict(g, store, q0, t, traffic_out)?]);
    }

    Ok(ForwardOutput {
        decoder: DecoderOutput {
            final_queries: q,
            layer_outputs,
            taps,
        },
        layers,
        taps: tap_preds,
        traffic_queries: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_inputs, check_params, weighted_sum, DEFAULT_STEP};
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny(mode: DecoderMode) -> DecoderConfig {
        DecoderConfig {
            mode,
            layers: 2,
            lane_queries: 6,
            traffic_queries: 3,
            channels: 8,
            heads: 2,
            parallel_blocks: 2,
            groups: 2,
            points: 3,
            ffn_hidden: 12,
            topo_hidden: 6,
            traffic_layers: 1,
            bev_h: 4,
            bev_w: 3,
        }
    }

    fn run(cfg: &DecoderConfig, store: &ParamStore<f64>, training: bool) -> (Graph<f64>, ForwardOutput) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::new();
        let bev = g.constant(rand_tensor(&mut rng, &[cfg.bev_h * cfg.bev_w, BEV_CHANNELS]));
        let tr = g.constant(rand_tensor(&mut rng, &[2, TRAFFIC_INPUT_DIM]));
        let out = forward(&mut g, store, cfg, bev, tr, training).unwrap();
        (g, out)
    }

    #[test]
    fn reordered_layer_parameter_overhead() {
        let (c, m) = (64, 4);
        let base = DecoderConfig {
            channels: c,
            heads: 4,
            parallel_blocks: m,
            ..DecoderConfig::default()
        };
        let std_store = init_params::<f64>(
            &DecoderConfig {
                mode: DecoderMode::Standard,
                ..base.clone()
            },
            0,
        )
        .unwrap();
        let re_store = init_params::<f64>(
            &DecoderConfig {
                mode: DecoderMode::Reordered,
                ..base
            },
            0,
        )
        .unwrap();
        let ca_block = 4 * (c * c + c) + 2 * c;
        let fusion = m * c * c + c;
        let diff = re_store.numel_with_prefix("layer0.") - std_store.numel_with_prefix("layer0.");
        assert_eq!(diff, (m - 1) * ca_block + fusion);
    }

    #[test]
    fn tap_counts() {
        let cfg = DecoderConfig {
            parallel_blocks: 1,
            ..tiny(DecoderMode::Reordered)
        };
        let store = init_params(&cfg, 1).unwrap();
        let (_, out) = run(&cfg, &store, true);
        assert!(out.decoder.taps.iter().all(|t| t.len() == 1));

        let cfg = DecoderConfig {
            layers: 3,
            parallel_blocks: 4,
            ..tiny(DecoderMode::Reordered)
        };
        let store = init_params(&cfg, 1).unwrap();
        let (_, out) = run(&cfg, &store, true);
        assert_eq!(out.decoder.tap_count(), 12);
        assert_eq!(out.taps.len(), 12);
        assert_eq!(out.layers.len(), 3);

        for mode in [DecoderMode::Standard, DecoderMode::NaiveO2m, DecoderMode::GroupO2m] {
            let cfg = tiny(mode);
            let (_, out) = run(&cfg, &init_params(&cfg, 1).unwrap(), true);
            assert_eq!(out.decoder.tap_count(), 0);
            assert!(out.taps.is_empty());
        }
    }

    #[test]
    fn group_mask_is_block_diagonal() {
        let m = group_mask(3, 20);
        assert_eq!(m.len(), 3600);
        for i in 0..60 {
            for j in 0..60 {
                assert_eq!(m[i * 60 + j], i / 20 == j / 20);
            }
        }
        assert_eq!(m.iter().filter(|&&b| b).count(), 3 * 400);
    }

    #[test]
    fn single_group_matches_standard() {
        let std_cfg = tiny(DecoderMode::Standard);
        let grp_cfg = DecoderConfig {
            groups: 1,
            ..tiny(DecoderMode::GroupO2m)
        };
        let store = init_params(&std_cfg, 7).unwrap();
        assert_eq!(
            store.names().collect::<Vec<_>>(),
            init_params::<f64>(&grp_cfg, 7).unwrap().names().collect::<Vec<_>>()
        );
        let (ga, a) = run(&std_cfg, &store, true);
        let (gb, b) = run(&grp_cfg, &store, true);
        assert_eq!(ga.value(a.decoder.final_queries), gb.value(b.decoder.final_queries));
        assert_eq!(a.final_predictions().values(&ga), b.final_predictions().values(&gb));
    }

    #[test]
    fn group_mode_isolates_groups() {
        let cfg = tiny(DecoderMode::GroupO2m);
        let store = init_params(&cfg, 3).unwrap();
        let (g0, out0) = run(&cfg, &store, true);
        assert_eq!(out0.layers[0].len(), 2);
        assert_eq!(g0.shape(out0.layers[1][1].topo_ll), &[3, 3]);

        // perturbing a query of group 1 leaves group 0 untouched
        let mut other = store.clone();
        other.get_mut("lane.query").unwrap().data_mut()[5 * 8] += 0.5;
        let (g1, out1) = run(&cfg, &other, true);
        assert_eq!(out0.layers[1][0].values(&g0), out1.layers[1][0].values(&g1));
        assert_ne!(out0.layers[1][1].values(&g0), out1.layers[1][1].values(&g1));
    }

    #[test]
    fn reorder_changes_the_output() {
        let std_cfg = tiny(DecoderMode::Standard);
        let re_cfg = DecoderConfig {
            parallel_blocks: 1,
            ..tiny(DecoderMode::Reordered)
        };
        let std_store = init_params::<f64>(&std_cfg, 11).unwrap();
        let mut re_store = init_params::<f64>(&re_cfg, 11).unwrap();
        for (name, t) in std_store.iter() {
            re_store.set(name, t.clone()).unwrap();
        }
        let fuse = re_store.get("layer0.fuse.weight").unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(fuse.at(r, c), if r == c { 1.0 } else { 0.0 });
            }
        }
        let (ga, a) = run(&std_cfg, &std_store, false);
        let (gb, b) = run(&re_cfg, &re_store, false);
        assert_eq!(ga.shape(a.decoder.final_queries), gb.shape(b.decoder.final_queries));
        assert_ne!(ga.value(a.decoder.final_queries), gb.value(b.decoder.final_queries));
    }

    #[test]
    fn zero_projections_leave_the_layer_norm_chain() {
        let cfg = tiny(DecoderMode::Standard);
        let mut store = init_params::<f64>(&cfg, 5).unwrap();
        for p in ["layer0.sa.out", "layer0.ca0.out", "layer0.ffn.fc2"] {
            for s in ["weight", "bias"] {
                let name = format!("{p}.{s}");
                let shape = store.get(&name).unwrap().shape().to_vec();
                store.set(&name, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let q = g.input(rand_tensor(&mut rng, &[5, 8]));
        let f = g.input(rand_tensor(&mut rng, &[7, 8]));
        let out = standard_layer(&mut g, &store, "layer0", q, f, 2, None).unwrap();
        let mut x = q;
        for ln in ["layer0.sa_ln", "layer0.ca0_ln", "layer0.ffn_ln"] {
            x = nn::layer_norm(&mut g, &store, ln, x).unwrap();
        }
        let (a, b) = (g.value(out), g.value(x));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_blocks_give_identical_taps() {
        let cfg = DecoderConfig {
            parallel_blocks: 4,
            ..tiny(DecoderMode::Reordered)
        };
        let mut store = init_params::<f64>(&cfg, 9).unwrap();
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("layer0.ca0"))
            .map(String::from)
            .collect();
        for n in &names {
            let t = store.get(n).unwrap().clone();
            for m in 1..4 {
                store.set(&n.replacen("ca0", &format!("ca{m}"), 1), t.clone()).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let q = g.input(rand_tensor(&mut rng, &[5, 8]));
        let f = g.input(rand_tensor(&mut rng, &[7, 8]));
        let (_, taps) = reordered_layer(&mut g, &store, "layer0", q, f, 2, 4, None).unwrap();
        let cat = g.concat_cols(&taps).unwrap();
        let fused = nn::linear(&mut g, &store, "layer0.fuse", cat).unwrap();
        for &t in &taps[1..] {
            assert_eq!(g.value(t), g.value(taps[0]));
        }
        for (u, v) in g.value(fused).data().iter().zip(g.value(taps[0]).data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn head_shapes() {
        let cfg = DecoderConfig {
            lane_queries: 60,
            traffic_queries: 20,
            ..tiny(DecoderMode::Standard)
        };
        let store = init_params(&cfg, 2).unwrap();
        let (g, out) = run(&cfg, &store, false);
        let p = out.final_predictions();
        assert_eq!(g.shape(p.topo_ll), &[60, 60]);
        assert_eq!(g.shape(p.topo_lt), &[60, 20]);
        assert_eq!(g.shape(p.lane_points), &[60, 9]);
        assert_eq!(g.shape(p.traffic_boxes), &[20, 4]);
        let v = p.values(&g);
        for b in &v.traffic_boxes {
            assert!(b[0] < b[2] && b[1] < b[3]);
        }
    }

    #[test]
    fn no_traffic_elements() {
        let cfg = tiny(DecoderMode::Reordered);
        let store = init_params::<f64>(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let bev = g.constant(Tensor::zeros(&[12, BEV_CHANNELS]));
        let tr = g.constant(Tensor::zeros(&[0, TRAFFIC_INPUT_DIM]));
        let out = forward(&mut g, &store, &cfg, bev, tr, true).unwrap();
        assert_eq!(g.shape(out.final_predictions().topo_lt), &[6, 3]);
        assert!(g.value(out.final_predictions().topo_lt).is_finite());
    }

    #[test]
    fn topo_head_is_equivariant() {
        let cfg = tiny(DecoderMode::Standard);
        let store = init_params::<f64>(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[5, 8]);
        let b = rand_tensor(&mut rng, &[4, 8]);
        let pa = [3, 0, 4, 1, 2];
        let pb = [2, 3, 1, 0];
        let permute = |t: &Tensor<f64>, p: &[usize]| {
            Tensor::from_rows(&p.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let (wa, wb) = (g.constant(permute(&a, &pa)), g.constant(permute(&b, &pb)));
        let l = topo_head(&mut g, &store, "head.topo_lt", va, vb).unwrap();
        let lp = topo_head(&mut g, &store, "head.topo_lt", wa, wb).unwrap();
        for r in 0..5 {
            for s in 0..4 {
                assert_eq!(g.value(lp).at(r, s), g.value(l).at(pa[r], pb[s]));
            }
        }
    }

    #[test]
    fn standard_layer_gradcheck() {
        let cfg = tiny(DecoderMode::Standard);
        let store = init_params::<f64>(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = [rand_tensor(&mut rng, &[3, 8]), rand_tensor(&mut rng, &[5, 8])];
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let out = standard_layer(g, &store, "layer0", v[0], v[1], 2, None)?;
            weighted_sum(g, out, 1)
        };
        let r = check_inputs(&inputs, DEFAULT_STEP, f).unwrap();
        assert!(r.passes(1e-4), "{r:?}");

        let q = inputs[0].clone();
        let kv = inputs[1].clone();
        let r = check_params(&store, DEFAULT_STEP, Some(6), |g, s| {
            let (q, kv) = (g.constant(q.clone()), g.constant(kv.clone()));
            let out = standard_layer(g, s, "layer0", q, kv, 2, None)?;
            weighted_sum(g, out, 2)
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn topo_head_gradcheck() {
        let cfg = tiny(DecoderMode::Standard);
        let store = init_params::<f64>(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = [rand_tensor(&mut rng, &[3, 8]), rand_tensor(&mut rng, &[2, 8])];
        let r = check_inputs(&inputs, DEFAULT_STEP, |g, v| {
            let out = topo_head(g, &store, "head.topo_ll", v[0], v[1])?;
            weighted_sum(g, out, 3)
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
