//! Detection and topology objectives.
//!
//! Focal loss and the GIoU term are fused reductions: their values and local
//! gradients are computed in closed form in 64-bit and recorded as a single
//! graph node.

use serde::{Deserialize, Serialize};

use crate::assignment::{lane_target, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::decoder::Predictions;
use crate::error::{Error, Result};
use crate::geometry::{giou_with_grad, Point3};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::scene::{SceneGraph, TRAFFIC_CLASSES};
use crate::supervision::SupervisionTarget;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lane: f64,
    pub traffic: f64,
    pub ll: f64,
    pub lt: f64,
    pub o2m: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lane: 1.0,
            traffic: 1.0,
            ll: 5.0,
            lt: 5.0,
            o2m: 2.0,
            alpha: FOCAL_ALPHA,
            gamma: FOCAL_GAMMA,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lane,
            self.traffic,
            self.ll,
            self.lt,
            self.o2m,
            self.alpha,
            self.gamma,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// How per-tap auxiliary losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapReduction {
    #[default]
    Sum,
    Mean,
}

/// A scalar loss node; `empty` is set when no entry was selected and the value is 0.
#[derive(Debug, Clone, Copy)]
pub struct FocalLoss {
    pub value: Var,
    pub empty: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal term for one logit: `(loss, d loss / d logit)`.
pub fn focal_term(logit: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    // z is the logit of the true class; p_t = sigmoid(z)
    let (z, a, sign) = if target {
        (logit, alpha, 1.0)
    } else {
        (-logit, 1.0 - alpha, -1.0)
    };
    let log_pt = -softplus(-z);
    let pt = log_pt.exp();
    let q = 1.0 / (1.0 + z.exp()); // 1 - p_t without cancellation
    let qg = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = -a * qg * log_pt;
    let grad = sign * a * qg * (gamma * pt * log_pt - q);
    (loss, grad)
}

/// Mean over `mask`ed entries of `−α_t (1−p_t)^γ log p_t`, `p = sigmoid(logits)`.
pub fn focal_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[u8],
    mask: Option<&[bool]>,
    alpha: f64,
    gamma: f64,
) -> Result<FocalLoss> {
    let n = g.value(logits).len();
    if targets.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(Error::Dimension {
            op: "focal_loss",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![targets.len(), mask.map_or(n, <[bool]>::len)],
        });
    }
    let count = mask.map_or(n, |m| m.iter().filter(|&&b| b).count());
    let mut local = vec![T::zero(); n];
    if count == 0 {
        let value = g.reduce(logits, T::zero(), local);
        return Ok(FocalLoss { value, empty: true });
    }
    let xs = g.value(logits).to_f64_vec();
    let mut total = 0.0;
    for i in 0..n {
        if mask.is_none_or(|m| m[i]) {
            let (l, d) = focal_term(xs[i], targets[i] == 1, alpha, gamma);
            total += l;
            local[i] = T::of(d / count as f64);
        }
    }
    let value = g.reduce(logits, T::of(total / count as f64), local);
    Ok(FocalLoss { value, empty: false })
}

/// Mean of `1 − GIoU(pred_r, target_r)` over rows of an `n × 4` corner matrix.
pub fn giou_loss<T: Real>(g: &mut Graph<T>, boxes: Var, targets: &[[f64; 4]]) -> Result<Var> {
    let n = targets.len();
    if g.shape(boxes) != [n, 4] {
        return Err(Error::Dimension {
            op: "giou_loss",
            lhs: g.shape(boxes).to_vec(),
            rhs: vec![n, 4],
        });
    }
    let vals = g.value(boxes).to_f64_vec();
    let mut local = vec![T::zero(); 4 * n];
    let mut total = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let a = [vals[4 * r], vals[4 * r + 1], vals[4 * r + 2], vals[4 * r + 3]];
        let (v, d) = giou_with_grad(&a, t);
        total += 1.0 - v;
        for k in 0..4 {
            local[4 * r + k] = T::of(-d[k] / n.max(1) as f64);
        }
    }
    Ok(g.reduce(boxes, T::of(total / n.max(1) as f64), local))
}

/// Mean absolute difference between the rows `index` of `x` and `target`.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, x: Var, index: &[usize], target: Tensor<T>) -> Result<Var> {
    let picked = g.gather_rows(x, index)?;
    let t = g.constant(target);
    let d = g.sub(picked, t)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

fn zero<T: Real>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// Sum of scalar nodes (0 for none).
pub fn sum_all<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(zero(g)),
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Per-scene detection targets in the regression frames of the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    /// Lane points in metres, `points` per lane.
    pub lanes: Vec<Vec<Point3>>,
    pub boxes: Vec<[f64; 4]>,
    pub attrs: Vec<usize>,
}

impl DetectionTargets {
    pub fn from_scene(scene: &SceneGraph, points: usize) -> Result<Self> {
        Ok(DetectionTargets {
            lanes: scene
                .lanes
                .iter()
                .map(|l| lane_target(l, points))
                .collect::<Result<_>>()?,
            boxes: scene.traffic.iter().map(|e| e.bbox.to_array()).collect(),
            attrs: scene.traffic.iter().map(|e| e.attr as usize).collect(),
        })
    }
}

/// Detection loss terms, kept separate for logging.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub lane_cls: Var,
    pub lane_reg: Var,
    pub traffic_cls: Var,
    pub traffic_reg: Var,
    pub traffic_giou: Var,
    pub total: Var,
}

/// `λ^l·(focal + L1)` over lanes plus `λ^t·(focal + L1 + GIoU)` over traffic,
/// with positives given by `sigma` (lanes) and `sigma_t` (traffic).
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    preds: &Predictions,
    targets: &DetectionTargets,
    sigma: &[usize],
    sigma_t: &[usize],
    w: &LossWeights,
) -> Result<DetectionLoss> {
    let n = g.shape(preds.lane_logits)[0];
    let mut lane_t = vec![0u8; n];
    for &j in sigma {
        lane_t[j] = 1;
    }
    let lane_cls = focal_loss(g, preds.lane_logits, &lane_t, None, w.alpha, w.gamma)?.value;
    let lane_reg = if sigma.is_empty() {
        zero(g)
    } else {
        let flat: Vec<f64> = targets.lanes.iter().flat_map(|l| l.iter().flatten().copied()).collect();
        let width = g.shape(preds.lane_points)[1];
        l1_loss(
            g,
            preds.lane_points,
            sigma,
            Tensor::from_f64(&[sigma.len(), width], &flat)?,
        )?
    };

    let nt = g.shape(preds.traffic_logits)[0];
    let mut cls_t = vec![0u8; nt * TRAFFIC_CLASSES];
    for (e, &j) in sigma_t.iter().enumerate() {
        cls_t[j * TRAFFIC_CLASSES + targets.attrs[e]] = 1;
    }
    let traffic_cls = focal_loss(g, preds.traffic_logits, &cls_t, None, w.alpha, w.gamma)?.value;
    let (traffic_reg, traffic_giou) = if sigma_t.is_empty() {
        (zero(g), zero(g))
    } else {
        let flat: Vec<f64> = targets.boxes.iter().flatten().copied().collect();
        let reg = l1_loss(
            g,
            preds.traffic_boxes,
            sigma_t,
            Tensor::from_f64(&[sigma_t.len(), 4], &flat)?,
        )?;
        let picked = g.gather_rows(preds.traffic_boxes, sigma_t)?;
        (reg, giou_loss(g, picked, &targets.boxes)?)
    };

    let lane = sum_all(g, &[lane_cls, lane_reg])?;
    let lane = g.scale(lane, w.lane);
    let traffic = sum_all(g, &[traffic_cls, traffic_reg, traffic_giou])?;
    let traffic = g.scale(traffic, w.traffic);
    let total = g.add(lane, traffic)?;
    Ok(DetectionLoss {
        lane_cls,
        lane_reg,
        traffic_cls,
        traffic_reg,
        traffic_giou,
        total,
    })
}

fn masked_focal<T: Real>(g: &mut Graph<T>, logits: Var, t: &SupervisionTarget, w: &LossWeights) -> Result<Var> {
    if g.shape(logits) != [t.rows, t.cols] {
        return Err(Error::Dimension {
            op: "topology loss",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![t.rows, t.cols],
        });
    }
    Ok(focal_loss(g, logits, &t.z, Some(&t.valid), w.alpha, w.gamma)?.value)
}

/// `λ^ll·focal(LL | valid) + λ^lt·focal(LT | valid)`.
pub fn topo_loss_o2o<T: Real>(
    g: &mut Graph<T>,
    topo_ll: Var,
    topo_lt: Var,
    ll: &SupervisionTarget,
    lt: &SupervisionTarget,
    w: &LossWeights,
) -> Result<Var> {
    let a = masked_focal(g, topo_ll, ll, w)?;
    let a = g.scale(a, w.ll);
    let b = masked_focal(g, topo_lt, lt, w)?;
    let b = g.scale(b, w.lt);
    g.add(a, b)
}

/// Accumulates the per-tap topology losses; `taps[i] = (LL logits, LT logits)`.
pub fn topo_loss_o2m<T: Real>(
    g: &mut Graph<T>,
    taps: &[(Var, Var)],
    targets: &[(SupervisionTarget, SupervisionTarget)],
    w: &LossWeights,
    reduction: TapReduction,
) -> Result<Var> {
    if taps.len() != targets.len() {
        return Err(Error::Usage(format!(
            "{} taps but {} supervision targets",
            taps.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(taps.len());
    for (&(ll, lt), (zl, zt)) in taps.iter().zip(targets) {
        terms.push(topo_loss_o2o(g, ll, lt, zl, zt, w)?);
    }
    let total = sum_all(g, &terms)?;
    Ok(match reduction {
        TapReduction::Mean if !taps.is_empty() => g.scale(total, 1.0 / taps.len() as f64),
        _ => total,
    })
}

/// `L = L_det + L_topo + λ_o2m·L_topo_o2m`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, det: Var, topo: Var, topo_o2m: Var, w: &LossWeights) -> Result<Var> {
    let base = g.add(det, topo)?;
    let aux = g.scale(topo_o2m, w.o2m);
    g.add(base, aux)
}
