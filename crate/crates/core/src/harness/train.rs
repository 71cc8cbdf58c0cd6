use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::optim::AdamW;
use super::RunConfig;
use crate::assignment::{hungarian, lane_cost, one_to_many, traffic_cost, CostWeights};
use crate::decoder::{forward, init_params, DecoderConfig, DecoderMode, ForwardOutput, PredictionValues, Predictions};
use crate::error::{Error, Result};
use crate::losses::{detection_loss, topo_loss_o2m, topo_loss_o2o, total_loss, DetectionTargets, LossWeights};
use crate::metrics::{self, MetricsReport};
use crate::numerics::{Graph, ParamStore, Real, Tensor};
use crate::scene::{generate, rasterize, traffic_inputs, SceneGraph};
use crate::supervision::{count_valid, project_o2m, project_o2o, ColumnSets, SupervisionTarget};

/// A scene with its rendered decoder inputs and regression targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: SceneGraph,
    pub bev: Tensor<f64>,
    pub traffic: Tensor<f64>,
    pub targets: DetectionTargets,
}

impl Sample {
    /// Renders `scene` with BEV noise drawn from `bev_seed`.
    pub fn new(cfg: &RunConfig, scene: SceneGraph, bev_seed: u64) -> Result<Self> {
        let bev = rasterize(&scene, &cfg.bev(bev_seed))?.to_tensor();
        let traffic = traffic_inputs(&scene);
        let targets = DetectionTargets::from_scene(&scene, cfg.decoder.points)?;
        Ok(Sample {
            scene,
            bev,
            traffic,
            targets,
        })
    }
}

/// Which scene population a seed is drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of scene `i` of a split, derived from the run seed.
pub fn scene_seed(run_seed: u64, split: Split, i: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Eval => 0x6576_616c_0000_0000,
    };
    splitmix(splitmix(run_seed ^ tag) ^ i as u64)
}

pub fn scenes(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let n = match split {
        Split::Train => cfg.pool,
        Split::Eval => cfg.eval_scenes,
    };
    (0..n)
        .map(|i| {
            let seed = scene_seed(cfg.seed, split, i);
            Sample::new(cfg, generate(&cfg.generator, seed)?, seed)
        })
        .collect()
}

/// Scalar parts of one scene's objective.
#[derive(Debug, Clone, Copy)]
pub struct SceneLoss {
    pub total: crate::numerics::Var,
    pub det: crate::numerics::Var,
    pub topo: crate::numerics::Var,
    pub topo_o2m: crate::numerics::Var,
    /// Supervised lane-lane entries summed over the one-to-many sets.
    pub valid_ll_o2m: usize,
    /// `Σ (K·N_L)²` over the same sets.
    pub expected_ll_o2m: usize,
}

/// Prediction sets that receive one-to-many topology supervision.
fn o2m_sets(mode: DecoderMode, out: &ForwardOutput) -> Vec<Predictions> {
    match mode {
        DecoderMode::Reordered => out.taps.clone(),
        DecoderMode::NaiveO2m => out.layers.iter().map(|l| l[0]).collect(),
        DecoderMode::Standard | DecoderMode::GroupO2m => Vec::new(),
    }
}

/// The training objective of one scene on already computed forward outputs.
///
/// Every layer (and group) gets one-to-one detection and topology losses; the
/// traffic detection terms are counted once, on the deployed set. The
/// one-to-many sets of the mode get auxiliary topology losses only.
pub fn objective<T: Real>(
    g: &mut Graph<T>,
    cfg: &RunConfig,
    out: &ForwardOutput,
    sample: &Sample,
) -> Result<SceneLoss> {
    let scene = &sample.scene;
    let cw = CostWeights::default();
    let n_lanes = scene.n_lanes();
    let final_vals = out.final_predictions().values(g);
    let n_pred = final_vals.n_lanes();
    let n_tq = final_vals.n_traffic();
    let sigma_t = hungarian(&traffic_cost(&final_vals, scene, &cw)?)?.sigma();
    let no_traffic = LossWeights {
        traffic: 0.0,
        ..cfg.weights
    };

    let last = out.layers.len() - 1;
    let mut det_terms = Vec::new();
    let mut topo_terms = Vec::new();
    for (i, layer) in out.layers.iter().enumerate() {
        for (k, p) in layer.iter().enumerate() {
            let deployed = i == last && k == 0;
            let vals = if deployed { final_vals.clone() } else { p.values(g) };
            let sigma = hungarian(&lane_cost(&vals, scene, &cw)?)?.sigma();
            let w = if deployed { &cfg.weights } else { &no_traffic };
            det_terms.push(detection_loss(g, p, &sample.targets, &sigma, &sigma_t, w)?.total);
            let ll = project_o2o(&scene.g_ll, &sigma, &sigma, n_pred, n_pred, cfg.regime)?;
            let lt = project_o2o(&scene.g_lt, &sigma, &sigma_t, n_pred, n_tq, cfg.regime)?;
            topo_terms.push(topo_loss_o2o(g, p.topo_ll, p.topo_lt, &ll, &lt, &cfg.weights)?);
        }
    }

    let aux = o2m_sets(cfg.decoder.mode, out);
    let k = if n_lanes == 0 {
        cfg.k
    } else {
        cfg.k.min(n_pred / n_lanes).max(1)
    };
    let mut logits = Vec::with_capacity(aux.len());
    let mut targets: Vec<(SupervisionTarget, SupervisionTarget)> = Vec::with_capacity(aux.len());
    let mut valid = 0;
    for p in &aux {
        let vals = p.values(g);
        let sets = one_to_many(&lane_cost(&vals, scene, &cw)?, k)?.sets;
        let ll = project_o2m(&scene.g_ll, &sets, ColumnSets::Lanes, n_pred, n_pred)?;
        let lt = project_o2m(&scene.g_lt, &sets, ColumnSets::Traffic(&sigma_t), n_pred, n_tq)?;
        valid += count_valid(&ll);
        logits.push((p.topo_ll, p.topo_lt));
        targets.push((ll, lt));
    }

    let det = crate::losses::sum_all(g, &det_terms)?;
    let topo = crate::losses::sum_all(g, &topo_terms)?;
    let topo_o2m = topo_loss_o2m(g, &logits, &targets, &cfg.weights, cfg.tap_reduction)?;
    let total = total_loss(g, det, topo, topo_o2m, &cfg.weights)?;
    Ok(SceneLoss {
        total,
        det,
        topo,
        topo_o2m,
        valid_ll_o2m: valid,
        expected_ll_o2m: aux.len() * (k * n_lanes) * (k * n_lanes),
    })
}

/// Forward plus objective for one scene in training mode.
pub fn scene_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    sample: &Sample,
) -> Result<SceneLoss> {
    let bev = g.constant(sample.bev.cast());
    let traffic = g.constant(sample.traffic.cast());
    let out = forward(g, store, &cfg.decoder, bev, traffic, true)?;
    objective(g, cfg, &out, sample)
}

/// One row of the loss log; `total` is the mean over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub det: f64,
    pub topo: f64,
    pub topo_o2m: f64,
    pub valid_ll_o2m: usize,
}

pub const LOSS_CSV_HEADER: &str = "step,total,det,topo,topo_o2m,valid_ll_o2m";

pub fn losses_csv(losses: &[StepLoss]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for l in losses {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            l.step, l.total, l.det, l.topo, l.topo_o2m, l.valid_ll_o2m
        );
    }
    s
}

/// Result of training in memory, before anything is written.
#[derive(Debug, Clone)]
pub struct Trained {
    pub store: ParamStore<f32>,
    pub losses: Vec<StepLoss>,
}

/// Runs the optimization loop on the fixed scene pool of `cfg`.
pub fn fit(cfg: &RunConfig, pool: &[Sample]) -> Result<Trained> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Usage("training needs a non-empty scene pool".into()));
    }
    let mut store = init_params::<f32>(&cfg.decoder, cfg.seed)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x6261_7463_6800_0000));
    let mut order: Vec<usize> = Vec::new();
    let mut losses: Vec<StepLoss> = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch as f64;

    for step in 0..cfg.steps {
        let mut g = Graph::<f32>::new();
        let mut parts = Vec::with_capacity(cfg.batch);
        let mut valid = 0;
        for _ in 0..cfg.batch {
            if order.is_empty() {
                order = (0..pool.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled above");
            let sl = scene_loss(&mut g, &store, cfg, &pool[idx]).map_err(|e| diverged(e, step, &losses))?;
            assert_eq!(
                sl.valid_ll_o2m, sl.expected_ll_o2m,
                "valid lane-lane entries under one-to-many supervision must equal sum of (K*N_L)^2"
            );
            valid += sl.valid_ll_o2m;
            parts.push(sl);
        }
        let totals: Vec<_> = parts.iter().map(|p| p.total).collect();
        let sum = crate::losses::sum_all(&mut g, &totals)?;
        let loss = g.scale(sum, scale);
        let mean = |g: &Graph<f32>, f: fn(&SceneLoss) -> crate::numerics::Var| {
            parts.iter().map(|p| g.value(f(p)).item().as_f64()).sum::<f64>() * scale
        };
        let row = StepLoss {
            step,
            total: g.value(loss).item().as_f64(),
            det: mean(&g, |p| p.det),
            topo: mean(&g, |p| p.topo),
            topo_o2m: mean(&g, |p| p.topo_o2m),
            valid_ll_o2m: valid,
        };
        if !row.total.is_finite() {
            return Err(divergence(step, &losses));
        }
        g.backward(loss).map_err(|e| diverged(e, step, &losses))?;
        let grads: Vec<(String, Tensor<f32>)> = g
            .params()
            .iter()
            .filter_map(|(name, v)| g.grad(*v).map(|t| (name.clone(), t.clone())))
            .collect();
        if grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(divergence(step, &losses));
        }
        opt.step(&mut store, &grads);
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::info!(
                "step {step}: loss {:.4} (det {:.4}, topo {:.4}, o2m {:.4})",
                row.total,
                row.det,
                row.topo,
                row.topo_o2m
            );
        }
        losses.push(row);
    }
    Ok(Trained { store, losses })
}

fn divergence(step: usize, losses: &[StepLoss]) -> Error {
    let tail = losses.len().saturating_sub(5);
    Error::Divergence {
        step,
        last_finite: losses[tail..].iter().map(|l| l.total).collect(),
    }
}

fn diverged(e: Error, step: usize, losses: &[StepLoss]) -> Error {
    match e {
        Error::Numeric(_) => divergence(step, losses),
        other => other,
    }
}

/// Deployed predictions of a trained model on one sample.
pub fn predict_sample(store: &ParamStore<f32>, cfg: &DecoderConfig, sample: &Sample) -> Result<PredictionValues> {
    let mut g = Graph::<f32>::new();
    let bev = g.constant(sample.bev.cast());
    let traffic = g.constant(sample.traffic.cast());
    let out = forward(&mut g, store, cfg, bev, traffic, false)?;
    Ok(out.final_predictions().values(&g))
}

pub fn evaluate_store(store: &ParamStore<f32>, cfg: &DecoderConfig, samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Usage("evaluation needs at least one scene".into()));
    }
    let preds = samples
        .iter()
        .map(|s| predict_sample(store, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<SceneGraph> = samples.iter().map(|s| s.scene.clone()).collect();
    metrics::evaluate(&preds, &gts)
}

/// Loads a checkpoint and scores it on `scenes`; scene `i` is rendered with
/// BEV noise seed `i`.
pub fn evaluate(checkpoint: impl AsRef<Path>, scenes: &[SceneGraph]) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::Usage("evaluation needs at least one scene".into()));
    }
    let (cfg, store) = checkpoint::load(checkpoint)?;
    let samples = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Sample::new(&cfg, s.clone(), i as u64))
        .collect::<Result<Vec<_>>>()?;
    evaluate_store(&store, &cfg.decoder, &samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub losses: Vec<StepLoss>,
    pub metrics: MetricsReport,
    pub wall_clock_secs: f64,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSSES_FILE: &str = "losses.csv";
pub const RECORD_FILE: &str = "record.json";
pub const CONFIG_FILE: &str = "config.txt";

impl RunRecord {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: e.path().to_string(),
            message: e.into_inner().to_string(),
        })
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains, evaluates on the held-out scenes and writes the checkpoint, loss
/// CSV, config and run record into `cfg.out`.
pub fn train(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let pool = scenes(cfg, Split::Train)?;
    let trained = fit(cfg, &pool)?;
    let held_out = scenes(cfg, Split::Eval)?;
    let metrics = if held_out.is_empty() {
        evaluate_store(&trained.store, &cfg.decoder, &pool)?
    } else {
        evaluate_store(&trained.store, &cfg.decoder, &held_out)?
    };

    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    let hash = checkpoint::save(&ckpt, cfg, &trained.store)?;
    write(&cfg.out.join(LOSSES_FILE), losses_csv(&trained.losses))?;
    write(&cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    let record = RunRecord {
        config: cfg.clone(),
        losses: trained.losses,
        metrics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoint: ckpt,
        checkpoint_hash: hash,
    };
    let json = serde_json::to_string_pretty(&record).expect("record serialization is infallible");
    write(&cfg.out.join(RECORD_FILE), json)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(mode: DecoderMode) -> RunConfig {
        let mut c = RunConfig::default();
        c.decoder = DecoderConfig {
            mode,
            layers: 2,
            lane_queries: 12,
            traffic_queries: 4,
            channels: 8,
            heads: 2,
            parallel_blocks: 2,
            groups: 2,
            points: 11,
            ffn_hidden: 16,
            topo_hidden: 8,
            traffic_layers: 1,
            bev_h: 10,
            bev_w: 5,
        };
        c.generator.lanes_max = 4;
        c.k = 2;
        c.steps = 3;
        c.batch = 2;
        c.pool = 3;
        c.eval_scenes = 2;
        c.lr = 1e-3;
        c
    }

    #[test]
    fn scene_seeds_separate_splits_and_runs() {
        let a = scene_seed(0, Split::Train, 0);
        assert_ne!(a, scene_seed(0, Split::Eval, 0));
        assert_ne!(a, scene_seed(1, Split::Train, 0));
        assert_ne!(a, scene_seed(0, Split::Train, 1));
        assert_eq!(a, scene_seed(0, Split::Train, 0));
    }

    #[test]
    fn fit_is_deterministic() {
        let cfg = tiny(DecoderMode::Reordered);
        let pool = scenes(&cfg, Split::Train).unwrap();
        let a = fit(&cfg, &pool).unwrap();
        let b = fit(&cfg, &pool).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(checkpoint::encode(&cfg, &a.store), checkpoint::encode(&cfg, &b.store));
    }

    #[test]
    fn valid_counts_follow_the_square_law() {
        let cfg = tiny(DecoderMode::Reordered);
        let pool = scenes(&cfg, Split::Train).unwrap();
        let store = init_params::<f64>(&cfg.decoder, 0).unwrap();
        for s in &pool {
            let mut g = Graph::new();
            let sl = scene_loss(&mut g, &store, &cfg, s).unwrap();
            let n = s.scene.n_lanes();
            // 2 layers × 2 taps, K = 2
            assert_eq!(sl.valid_ll_o2m, 4 * (2 * n) * (2 * n));
        }
    }

    #[test]
    fn modes_without_o2m_sets_have_zero_aux() {
        for mode in [DecoderMode::Standard, DecoderMode::GroupO2m] {
            let mut cfg = tiny(mode);
            cfg.weights.o2m = 7.0;
            let pool = scenes(&cfg, Split::Train).unwrap();
            let store = init_params::<f64>(&cfg.decoder, 0).unwrap();
            let mut g = Graph::new();
            let sl = scene_loss(&mut g, &store, &cfg, &pool[0]).unwrap();
            assert_eq!(g.value(sl.topo_o2m).item(), 0.0);
            let base = g.value(sl.det).item() + g.value(sl.topo).item();
            assert_eq!(g.value(sl.total).item(), base);
        }
    }

    #[test]
    fn naive_o2m_supervises_layer_outputs() {
        let cfg = tiny(DecoderMode::NaiveO2m);
        let pool = scenes(&cfg, Split::Train).unwrap();
        let store = init_params::<f64>(&cfg.decoder, 0).unwrap();
        let mut g = Graph::new();
        let sl = scene_loss(&mut g, &store, &cfg, &pool[0]).unwrap();
        let n = pool[0].scene.n_lanes();
        assert_eq!(sl.valid_ll_o2m, 2 * (2 * n) * (2 * n));
        assert!(g.value(sl.topo_o2m).item() > 0.0);
    }

    #[test]
    fn k_is_clamped_to_the_query_budget() {
        let mut cfg = tiny(DecoderMode::Reordered);
        cfg.k = 5;
        cfg.generator.lanes_min = 4;
        let pool = scenes(&cfg, Split::Train).unwrap();
        let store = init_params::<f64>(&cfg.decoder, 0).unwrap();
        let mut g = Graph::new();
        let sl = scene_loss(&mut g, &store, &cfg, &pool[0]).unwrap();
        let n = pool[0].scene.n_lanes();
        let k = 12 / n;
        assert_eq!(sl.valid_ll_o2m, 4 * (k * n) * (k * n));
    }

    #[test]
    fn evaluate_rejects_empty_scene_lists() {
        let cfg = tiny(DecoderMode::Standard);
        let store = init_params::<f32>(&cfg.decoder, 0).unwrap();
        assert!(matches!(
            evaluate_store(&store, &cfg.decoder, &[]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn huge_learning_rate_diverges_with_context() {
        let mut cfg = tiny(DecoderMode::Standard);
        cfg.lr = 1e30;
        cfg.steps = 20;
        let pool = scenes(&cfg, Split::Train).unwrap();
        match fit(&cfg, &pool) {
            Err(Error::Divergence { step, last_finite }) => {
                assert!(step > 0);
                assert!(!last_finite.is_empty() && last_finite.iter().all(|v| v.is_finite()));
            }
            other => panic!("expected divergence, got {:?}", other.map(|t| t.losses.len())),
        }
    }
}
