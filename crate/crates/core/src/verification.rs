//! Seeded finite-difference suite over every differentiable operation, the
//! losses and the composed decoder layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{init_params, reordered_layer, standard_layer, topo_head, DecoderConfig, DecoderMode};
use crate::error::Result;
use crate::losses::{focal_loss, giou_loss, l1_loss};
use crate::numerics::gradcheck::{check_inputs, check_params, weighted_sum, GradcheckReport, DEFAULT_STEP};
use crate::numerics::{nn, Graph, ParamStore, Tensor, Var};

/// Relative error ceiling of the suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Trials per case used by the command line and the acceptance suite.
pub const DEFAULT_TRIALS: usize = 4;

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub trials: usize,
    pub report: GradcheckReport,
}

impl CaseReport {
    pub fn passes(&self) -> bool {
        self.report.passes(GRADCHECK_TOLERANCE)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

fn tiny_decoder(mode: DecoderMode) -> DecoderConfig {
    DecoderConfig {
        mode,
        layers: 1,
        lane_queries: 4,
        traffic_queries: 2,
        channels: 8,
        heads: 2,
        parallel_blocks: 2,
        groups: 2,
        points: 3,
        ffn_hidden: 10,
        topo_hidden: 6,
        traffic_layers: 1,
        bev_h: 3,
        bev_w: 2,
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<GradcheckReport>;

fn unary(rng: &mut ChaCha8Rng, x: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<GradcheckReport> {
    let seed = rng.gen();
    check_inputs(&[x], DEFAULT_STEP, move |g, v| {
        let y = op(g, v[0])?;
        weighted_sum(g, y, seed)
    })
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: Tensor<f64>,
    b: Tensor<f64>,
    op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    let seed = rng.gen();
    check_inputs(&[a, b], DEFAULT_STEP, move |g, v| {
        let y = op(g, v[0], v[1])?;
        weighted_sum(g, y, seed)
    })
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            let (a, b) = (uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0));
            binary(r, a, b, |g, a, b| g.matmul(a, b))
        }),
        ("matmul_t", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            let (a, b) = (uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[n, k], -1.0, 1.0));
            binary(r, a, b, |g, a, b| g.matmul_t(a, b))
        }),
        ("add", |r| {
            let s = [dim(r), dim(r)];
            let (a, b) = (uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0));
            binary(r, a, b, |g, a, b| g.add(a, b))
        }),
        ("sub", |r| {
            let s = [dim(r), dim(r)];
            let (a, b) = (uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0));
            binary(r, a, b, |g, a, b| g.sub(a, b))
        }),
        ("mul", |r| {
            let s = [dim(r), dim(r)];
            let (a, b) = (uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0));
            binary(r, a, b, |g, a, b| g.mul(a, b))
        }),
        ("add_row", |r| {
            let (n, c) = (dim(r), dim(r));
            let (a, b) = (uniform(r, &[n, c], -1.0, 1.0), uniform(r, &[1, c], -1.0, 1.0));
            binary(r, a, b, |g, a, b| g.add_row(a, b))
        }),
        ("scale", |r| {
            let x = {
                let s = [dim(r), dim(r)];
                uniform(r, &s, -1.0, 1.0)
            };
            unary(r, x, |g, x| Ok(g.scale(x, -1.7)))
        }),
        ("gelu", |r| {
            let x = {
                let s = [dim(r), dim(r)];
                uniform(r, &s, -3.0, 3.0)
            };
            unary(r, x, |g, x| Ok(g.gelu(x)))
        }),
        ("sigmoid", |r| {
            let x = {
                let s = [dim(r), dim(r)];
                uniform(r, &s, -4.0, 4.0)
            };
            unary(r, x, |g, x| Ok(g.sigmoid(x)))
        }),
        ("abs", |r| {
            let x = {
                let s = [dim(r), dim(r)];
                off_zero(r, &s)
            };
            unary(r, x, |g, x| Ok(g.abs(x)))
        }),
        ("layer_norm", |r| {
            let (n, c) = (dim(r), dim(r) + 1);
            let x = uniform(r, &[n, c], -2.0, 2.0);
            let gamma = uniform(r, &[1, c], 0.5, 1.5);
            let beta = uniform(r, &[1, c], -0.5, 0.5);
            let seed = r.gen();
            check_inputs(&[x, gamma, beta], DEFAULT_STEP, move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("softmax_rows", |r| {
            let x = {
                let s = [dim(r), dim(r) + 1];
                uniform(r, &s, -2.0, 2.0)
            };
            unary(r, x, |g, x| g.softmax_rows(x, None))
        }),
        ("softmax_rows_masked", |r| {
            let (n, c) = (dim(r), dim(r) + 1);
            let x = uniform(r, &[n, c], -2.0, 2.0);
            let mask: Vec<bool> = (0..n * c).map(|i| i % c == 0 || r.gen_bool(0.6)).collect();
            let seed = r.gen();
            check_inputs(&[x], DEFAULT_STEP, move |g, v| {
                let y = g.softmax_rows(v[0], Some(&mask))?;
                weighted_sum(g, y, seed)
            })
        }),
        ("slice_cols", |r| {
            let x = {
                let s = [dim(r), 5];
                uniform(r, &s, -1.0, 1.0)
            };
            unary(r, x, |g, x| g.slice_cols(x, 1, 3))
        }),
        ("concat_cols", |r| {
            let n = dim(r);
            let (a, b) = (
                {
                    let s = [n, dim(r)];
                    uniform(r, &s, -1.0, 1.0)
                },
                {
                    let s = [n, dim(r)];
                    uniform(r, &s, -1.0, 1.0)
                },
            );
            binary(r, a, b, |g, a, b| g.concat_cols(&[a, b, a]))
        }),
        ("slice_rows", |r| {
            let x = {
                let s = [5, dim(r)];
                uniform(r, &s, -1.0, 1.0)
            };
            unary(r, x, |g, x| g.slice_rows(x, 2, 2))
        }),
        ("concat_rows", |r| {
            let c = dim(r);
            let (a, b) = (
                {
                    let s = [dim(r), c];
                    uniform(r, &s, -1.0, 1.0)
                },
                {
                    let s = [dim(r), c];
                    uniform(r, &s, -1.0, 1.0)
                },
            );
            binary(r, a, b, |g, a, b| g.concat_rows(&[b, a, b]))
        }),
        ("gather_rows", |r| {
            let x = {
                let s = [4, dim(r)];
                uniform(r, &s, -1.0, 1.0)
            };
            unary(r, x, |g, x| g.gather_rows(x, &[3, 0, 3, 1]))
        }),
        ("pair_sum", |r| {
            let c = dim(r);
            let (a, b) = (
                {
                    let s = [dim(r), c];
                    uniform(r, &s, -1.0, 1.0)
                },
                {
                    let s = [dim(r), c];
                    uniform(r, &s, -1.0, 1.0)
                },
            );
            binary(r, a, b, |g, a, b| g.pair_sum(a, b))
        }),
        ("reshape", |r| {
            let x = uniform(r, &[2, 6], -1.0, 1.0);
            unary(r, x, |g, x| g.reshape(x, &[3, 4]))
        }),
        ("sum", |r| {
            let x = {
                let s = [dim(r), dim(r)];
                uniform(r, &s, -1.0, 1.0)
            };
            unary(r, x, |g, x| Ok(g.sum(x)))
        }),
        ("mean", |r| {
            let x = {
                let s = [dim(r), dim(r)];
                uniform(r, &s, -1.0, 1.0)
            };
            unary(r, x, |g, x| Ok(g.mean(x)))
        }),
        ("focal_loss", |r| {
            let (n, c) = (dim(r), dim(r));
            let x = uniform(r, &[n, c], -3.0, 3.0);
            let t: Vec<u8> = (0..n * c).map(|_| r.gen_range(0..2)).collect();
            let mask: Vec<bool> = (0..n * c).map(|_| r.gen_bool(0.7)).collect();
            check_inputs(&[x], DEFAULT_STEP, move |g, v| {
                Ok(focal_loss(g, v[0], &t, Some(&mask), 0.25, 2.0)?.value)
            })
        }),
        ("giou_loss", |r| {
            let n = dim(r);
            let mut boxes = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..n {
                let (x, y) = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
                boxes.extend([x, y, x + r.gen_range(0.5..2.0), y + r.gen_range(0.5..2.0)]);
                let (tx, ty) = (x + r.gen_range(-1.5..1.5), y + r.gen_range(-1.5..1.5));
                targets.push([tx, ty, tx + r.gen_range(0.5..2.0), ty + r.gen_range(0.5..2.0)]);
            }
            let x = Tensor::from_f64(&[n, 4], &boxes)?;
            check_inputs(&[x], DEFAULT_STEP, move |g, v| giou_loss(g, v[0], &targets))
        }),
        ("l1_loss", |r| {
            let (n, c) = (4, dim(r));
            let x = uniform(r, &[n, c], -1.0, 1.0);
            // targets sit at least 0.1 away from the picked rows, clear of the kink
            let shift = off_zero(r, &[2, c]);
            let picked = Tensor::new(
                vec![2, c],
                x.data()[c..3 * c]
                    .iter()
                    .zip(shift.data())
                    .map(|(a, b)| a + b)
                    .collect(),
            )?;
            check_inputs(&[x], DEFAULT_STEP, move |g, v| {
                l1_loss(g, v[0], &[1, 2], picked.clone())
            })
        }),
        ("attention", |r| {
            let mut store = ParamStore::<f64>::new(r.gen());
            nn::register_attention(&mut store, "att", 4)?;
            let q = {
                let s = [dim(r), 4];
                uniform(r, &s, -1.0, 1.0)
            };
            let kv = {
                let s = [dim(r) + 1, 4];
                uniform(r, &s, -1.0, 1.0)
            };
            let seed = r.gen();
            let mut rep = check_inputs(&[q.clone(), kv.clone()], DEFAULT_STEP, |g, v| {
                let y = nn::attention(g, &store, "att", v[0], v[1], v[1], 2, None)?;
                weighted_sum(g, y, seed)
            })?;
            rep.merge(check_params(&store, DEFAULT_STEP, Some(4), |g, s| {
                let (q, kv) = (g.constant(q.clone()), g.constant(kv.clone()));
                let y = nn::attention(g, s, "att", q, kv, kv, 2, None)?;
                weighted_sum(g, y, seed)
            })?);
            Ok(rep)
        }),
        ("ffn", |r| {
            let mut store = ParamStore::<f64>::new(r.gen());
            nn::register_ffn(&mut store, "ffn", 4, 6)?;
            let x = {
                let s = [dim(r), 4];
                uniform(r, &s, -1.0, 1.0)
            };
            let seed = r.gen();
            let mut rep = check_inputs(std::slice::from_ref(&x), DEFAULT_STEP, |g, v| {
                let y = nn::ffn(g, &store, "ffn", v[0])?;
                weighted_sum(g, y, seed)
            })?;
            rep.merge(check_params(&store, DEFAULT_STEP, Some(4), |g, s| {
                let x = g.constant(x.clone());
                let y = nn::ffn(g, s, "ffn", x)?;
                weighted_sum(g, y, seed)
            })?);
            Ok(rep)
        }),
        ("standard_layer", |r| {
            let cfg = tiny_decoder(DecoderMode::Standard);
            let store = init_params::<f64>(&cfg, r.gen())?;
            let q = uniform(r, &[3, 8], -1.0, 1.0);
            let f = uniform(r, &[4, 8], -1.0, 1.0);
            let seed = r.gen();
            let mut rep = check_inputs(&[q.clone(), f.clone()], DEFAULT_STEP, |g, v| {
                let y = standard_layer(g, &store, "layer0", v[0], v[1], 2, None)?;
                weighted_sum(g, y, seed)
            })?;
            rep.merge(check_params(&store, DEFAULT_STEP, Some(3), |g, s| {
                let (q, f) = (g.constant(q.clone()), g.constant(f.clone()));
                let y = standard_layer(g, s, "layer0", q, f, 2, None)?;
                weighted_sum(g, y, seed)
            })?);
            Ok(rep)
        }),
        ("reordered_layer", |r| {
            let cfg = tiny_decoder(DecoderMode::Reordered);
            let store = init_params::<f64>(&cfg, r.gen())?;
            let q = uniform(r, &[4, 8], -1.0, 1.0);
            let f = uniform(r, &[5, 8], -1.0, 1.0);
            let mask = crate::decoder::group_mask(2, 2);
            let seed = r.gen();
            let objective = |g: &mut Graph<f64>, s: &ParamStore<f64>, q: Var, f: Var| -> Result<Var> {
                let (out, taps) = reordered_layer(g, s, "layer0", q, f, 2, 2, Some(&mask))?;
                let all = g.concat_rows(&[&[out][..], &taps].concat())?;
                weighted_sum(g, all, seed)
            };
            let mut rep = check_inputs(&[q.clone(), f.clone()], DEFAULT_STEP, |g, v| {
                objective(g, &store, v[0], v[1])
            })?;
            rep.merge(check_params(&store, DEFAULT_STEP, Some(3), |g, s| {
                let (q, f) = (g.constant(q.clone()), g.constant(f.clone()));
                objective(g, s, q, f)
            })?);
            Ok(rep)
        }),
        ("topo_head", |r| {
            let cfg = tiny_decoder(DecoderMode::Standard);
            let store = init_params::<f64>(&cfg, r.gen())?;
            let a = {
                let s = [dim(r), 8];
                uniform(r, &s, -1.0, 1.0)
            };
            let b = {
                let s = [dim(r), 8];
                uniform(r, &s, -1.0, 1.0)
            };
            let seed = r.gen();
            check_inputs(&[a, b], DEFAULT_STEP, |g, v| {
                let y = topo_head(g, &store, "head.topo_lt", v[0], v[1])?;
                weighted_sum(g, y, seed)
            })
        }),
    ]
}

/// Names of the suite's cases, in execution order.
pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs every case `trials` times with inputs drawn from `seed`.
pub fn gradcheck_suite(trials: usize, seed: u64) -> Result<Vec<CaseReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, case) in cases() {
        let mut report = GradcheckReport::default();
        for _ in 0..trials {
            report.merge(case(&mut rng)?);
        }
        out.push(CaseReport { name, trials, report });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_once() {
        let reports = gradcheck_suite(1, 11).unwrap();
        assert_eq!(reports.len(), case_names().len());
        for r in &reports {
            assert!(r.report.checked > 0, "{} checked nothing", r.name);
            assert!(r.passes(), "{}: {:?}", r.name, r.report);
        }
    }

    #[test]
    fn default_suite_has_at_least_100_trials() {
        assert!(case_names().len() * DEFAULT_TRIALS >= 100);
    }
}
