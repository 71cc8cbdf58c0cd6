//! Detection, topology and overall scores.
//!
//! All average precisions are non-interpolated: predictions are ranked by
//! confidence (equal confidences keep scene order, then prediction index), and
//! `AP = Σ precision@k over true-positive ranks / #ground truths`. Matching is
//! greedy in that order; each ground truth is claimed at most once, by the
//! closest still-free ground truth within the threshold. Scores are pooled
//! over every scene of an evaluation before the AP is taken.
//!
//! TOP is a documented approximation of the benchmark's topology score. Lane
//! and traffic vertices are matched as for detection at 1.0 m Fréchet and 0.75
//! IoU. Every ordered pair of matched predictions is a candidate edge with
//! confidence `sigmoid(logit)`; candidates with zero confidence are dropped.
//! A candidate is a true positive when its matched ground-truth pair is an
//! edge. The recall denominator counts every ground-truth edge, including
//! edges with an unmatched endpoint that no candidate can recover. When there
//! are no ground-truth edges at all, the score is 1 if no candidate exceeds
//! 0.5 and 0 otherwise.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decoder::PredictionValues;
use crate::error::{Error, Result};
use crate::geometry::{frechet_points, iou};
use crate::scene::SceneGraph;

pub const FRECHET_THRESHOLDS: [f64; 3] = [1.0, 2.0, 3.0];
pub const IOU_THRESHOLD: f64 = 0.75;
/// Lane vertex-matching threshold for TOP.
pub const TOP_LANE_THRESHOLD: f64 = 1.0;
pub const NO_EDGE_THRESHOLD: f64 = 0.5;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Non-interpolated AP of `(confidence, is_tp)` detections against `n_gt` truths.
///
/// With no ground truth, AP is 1 for an empty detection list and 0 otherwise.
pub fn average_precision(dets: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable: equal confidences keep input order
    order.sort_by(|&a, &b| dets[b].0.total_cmp(&dets[a].0));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if dets[i].1 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    sum / n_gt as f64
}

/// Greedy confidence-ordered matching. `dist(j, p)` is the distance from
/// prediction `j` to ground truth `p`, `None` when incompatible. Returns
/// `match[j] = Some(p)`.
fn greedy_match(
    conf: &[f64],
    n_gt: usize,
    within: f64,
    dist: impl Fn(usize, usize) -> Option<f64>,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
    let mut taken = vec![false; n_gt];
    let mut out = vec![None; conf.len()];
    for j in order {
        let mut best: Option<(f64, usize)> = None;
        for (p, &t) in taken.iter().enumerate() {
            if t {
                continue;
            }
            if let Some(d) = dist(j, p) {
                if d <= within && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, p));
                }
            }
        }
        if let Some((_, p)) = best {
            taken[p] = true;
            out[j] = Some(p);
        }
    }
    out
}

fn lane_conf(pred: &PredictionValues) -> Vec<f64> {
    pred.lane_logits.iter().map(|&x| sigmoid(x)).collect()
}

/// Fréchet distances `[pred][gt]`.
fn lane_distances(pred: &PredictionValues, gt: &SceneGraph) -> Vec<Vec<f64>> {
    pred.lane_points
        .iter()
        .map(|p| gt.lanes.iter().map(|l| frechet_points(p, l.points())).collect())
        .collect()
}

fn match_lanes(pred: &PredictionValues, gt: &SceneGraph, d: &[Vec<f64>], thr: f64) -> Vec<Option<usize>> {
    greedy_match(&lane_conf(pred), gt.n_lanes(), thr, |j, p| Some(d[j][p]))
}

/// Predicted attribute (argmax) and its confidence for every traffic query.
fn traffic_labels(pred: &PredictionValues) -> Vec<(usize, f64)> {
    pred.traffic_logits
        .iter()
        .map(|row| {
            let (c, &x) = row.iter().enumerate().fold(
                (0, &f64::NEG_INFINITY),
                |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc },
            );
            (c, sigmoid(x))
        })
        .collect()
}

/// IoU ≥ threshold with matching attribute; distance is `1 − IoU`.
fn match_traffic(pred: &PredictionValues, gt: &SceneGraph) -> Vec<Option<usize>> {
    let labels = traffic_labels(pred);
    let conf: Vec<f64> = labels.iter().map(|l| l.1).collect();
    greedy_match(&conf, gt.n_traffic(), 1.0 - IOU_THRESHOLD, |j, p| {
        let e = &gt.traffic[p];
        (labels[j].0 == e.attr as usize).then(|| 1.0 - iou(&pred.traffic_box(j), &e.bbox))
    })
}

fn check_pairs(preds: &[PredictionValues], gts: &[SceneGraph]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Usage(format!(
            "{} prediction sets for {} scenes",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Mean over Fréchet thresholds of the pooled lane AP.
pub fn det_l(preds: &[PredictionValues], gts: &[SceneGraph]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let dists: Vec<_> = preds.iter().zip(gts).map(|(p, g)| lane_distances(p, g)).collect();
    let n_gt: usize = gts.iter().map(SceneGraph::n_lanes).sum();
    let mut total = 0.0;
    for thr in FRECHET_THRESHOLDS {
        let mut dets = Vec::new();
        for ((p, g), d) in preds.iter().zip(gts).zip(&dists) {
            let m = match_lanes(p, g, d, thr);
            dets.extend(lane_conf(p).into_iter().zip(m).map(|(c, m)| (c, m.is_some())));
        }
        total += average_precision(&dets, n_gt);
    }
    Ok(total / FRECHET_THRESHOLDS.len() as f64)
}

/// Pooled traffic AP at IoU 0.75, averaged over the attributes present in ground truth.
pub fn det_t(preds: &[PredictionValues], gts: &[SceneGraph]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let mut classes: Vec<usize> = gts
        .iter()
        .flat_map(|g| g.traffic.iter().map(|e| e.attr as usize))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let matches: Vec<_> = preds.iter().zip(gts).map(|(p, g)| match_traffic(p, g)).collect();
    let labels: Vec<_> = preds.iter().map(traffic_labels).collect();
    if classes.is_empty() {
        let any = labels.iter().any(|l| !l.is_empty());
        return Ok(if any { 0.0 } else { 1.0 });
    }
    let mut total = 0.0;
    for &c in &classes {
        let n_gt = gts
            .iter()
            .map(|g| g.traffic.iter().filter(|e| e.attr as usize == c).count())
            .sum();
        let mut dets = Vec::new();
        for (l, m) in labels.iter().zip(&matches) {
            for (j, &(cls, conf)) in l.iter().enumerate() {
                if cls == c {
                    dets.push((conf, m[j].is_some()));
                }
            }
        }
        total += average_precision(&dets, n_gt);
    }
    Ok(total / classes.len() as f64)
}

/// Candidate edges of one scene: `(confidence, is_tp)` over matched prediction pairs.
///
/// `rows`/`cols` map predictions to ground truths, `logits[i][j]` scores pair
/// `(i, j)`, `gt[a][b]` is the ground-truth edge set and `same` excludes `i == j`.
pub fn edge_candidates(
    rows: &[Option<usize>],
    cols: &[Option<usize>],
    logits: &[Vec<f64>],
    gt: &[Vec<u8>],
    same: bool,
) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for (i, ri) in rows.iter().enumerate() {
        let Some(a) = *ri else { continue };
        for (j, cj) in cols.iter().enumerate() {
            let Some(b) = *cj else { continue };
            if same && i == j {
                continue;
            }
            let conf = sigmoid(logits[i][j]);
            if conf > 0.0 {
                out.push((conf, gt[a][b] == 1));
            }
        }
    }
    out
}

/// TOP over pooled candidates against `n_gt_edges` ground-truth edges.
pub fn top_score(candidates: &[(f64, bool)], n_gt_edges: usize) -> f64 {
    if n_gt_edges == 0 {
        return if candidates.iter().any(|c| c.0 > NO_EDGE_THRESHOLD) {
            0.0
        } else {
            1.0
        };
    }
    average_precision(candidates, n_gt_edges)
}

/// `(TOP_ll, TOP_lt)` pooled over scenes.
pub fn top(preds: &[PredictionValues], gts: &[SceneGraph]) -> Result<(f64, f64)> {
    check_pairs(preds, gts)?;
    let (mut ll, mut lt) = (Vec::new(), Vec::new());
    let (mut n_ll, mut n_lt) = (0, 0);
    for (p, g) in preds.iter().zip(gts) {
        let lanes = match_lanes(p, g, &lane_distances(p, g), TOP_LANE_THRESHOLD);
        let traffic = match_traffic(p, g);
        ll.extend(edge_candidates(&lanes, &lanes, &p.topo_ll, &g.g_ll, true));
        lt.extend(edge_candidates(&lanes, &traffic, &p.topo_lt, &g.g_lt, false));
        n_ll += g.ll_edges();
        n_lt += g.g_lt.iter().flatten().filter(|&&v| v == 1).count();
    }
    Ok((top_score(&ll, n_ll), top_score(&lt, n_lt)))
}

/// `¼(DET_l + DET_t + √TOP_ll + √TOP_lt)`.
pub fn ols(det_l: f64, det_t: f64, top_ll: f64, top_lt: f64) -> Result<f64> {
    for (name, v) in [
        ("det_l", det_l),
        ("det_t", det_t),
        ("top_ll", top_ll),
        ("top_lt", top_lt),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Usage(format!("{name} = {v} is outside [0, 1]")));
        }
    }
    Ok(0.25 * (det_l + det_t + top_ll.sqrt() + top_lt.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub det_l: f64,
    pub det_t: f64,
    pub top_ll: f64,
    pub top_lt: f64,
    pub ols: f64,
}

impl Scores {
    pub fn compute(preds: &[PredictionValues], gts: &[SceneGraph]) -> Result<Self> {
        let det_l = det_l(preds, gts)?;
        let det_t = det_t(preds, gts)?;
        let (top_ll, top_lt) = top(preds, gts)?;
        Ok(Scores {
            det_l,
            det_t,
            top_ll,
            top_lt,
            ols: ols(det_l, det_t, top_ll, top_lt)?,
        })
    }
}

/// Matched/total ground-truth counts at the TOP operating point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub lanes_matched: usize,
    pub lanes_total: usize,
    pub traffic_matched: usize,
    pub traffic_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: usize,
    #[serde(flatten)]
    pub scores: Scores,
    #[serde(flatten)]
    pub counts: MatchCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub det_l: f64,
    pub det_t: f64,
    pub top_ll: f64,
    pub top_lt: f64,
    pub ols: f64,
    pub counts: MatchCounts,
    pub per_scene: Vec<SceneReport>,
}

impl MetricsReport {
    pub fn scores(&self) -> Scores {
        Scores {
            det_l: self.det_l,
            det_t: self.det_t,
            top_ll: self.top_ll,
            top_lt: self.top_lt,
            ols: self.ols,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    /// One row per scene.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "scene,det_l,det_t,top_ll,top_lt,ols,lanes_matched,lanes_total,traffic_matched,traffic_total\n",
        );
        for r in &self.per_scene {
            let (x, c) = (&r.scores, &r.counts);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.scene,
                x.det_l,
                x.det_t,
                x.top_ll,
                x.top_lt,
                x.ols,
                c.lanes_matched,
                c.lanes_total,
                c.traffic_matched,
                c.traffic_total
            );
        }
        s
    }
}

fn counts(p: &PredictionValues, g: &SceneGraph) -> MatchCounts {
    let lanes = match_lanes(p, g, &lane_distances(p, g), TOP_LANE_THRESHOLD);
    MatchCounts {
        lanes_matched: lanes.iter().flatten().count(),
        lanes_total: g.n_lanes(),
        traffic_matched: match_traffic(p, g).iter().flatten().count(),
        traffic_total: g.n_traffic(),
    }
}

/// Pooled scores plus per-scene breakdown.
pub fn evaluate(preds: &[PredictionValues], gts: &[SceneGraph]) -> Result<MetricsReport> {
    check_pairs(preds, gts)?;
    if gts.is_empty() {
        return Err(Error::Usage("evaluation needs at least one scene".into()));
    }
    let pooled = Scores::compute(preds, gts)?;
    let mut total = MatchCounts::default();
    let mut per_scene = Vec::with_capacity(gts.len());
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        let c = counts(p, g);
        total.lanes_matched += c.lanes_matched;
        total.lanes_total += c.lanes_total;
        total.traffic_matched += c.traffic_matched;
        total.traffic_total += c.traffic_total;
        per_scene.push(SceneReport {
            scene: i,
            scores: Scores::compute(std::slice::from_ref(p), std::slice::from_ref(g))?,
            counts: c,
        });
    }
    Ok(MetricsReport {
        det_l: pooled.det_l,
        det_t: pooled.det_t,
        top_ll: pooled.top_ll,
        top_lt: pooled.top_lt,
        ols: pooled.ols,
        counts: total,
        per_scene,
    })
}

/// Saturation logit used by [`oracle_predictions`]; `sigmoid(50) == 1.0` in 64-bit.
pub const ORACLE_LOGIT: f64 = 50.0;

/// Predictions that restate the ground truth exactly, with saturated confidences.
pub fn oracle_predictions(gt: &SceneGraph) -> PredictionValues {
    let sat = |v: u8| if v == 1 { ORACLE_LOGIT } else { -ORACLE_LOGIT };
    PredictionValues {
        lane_logits: vec![ORACLE_LOGIT; gt.n_lanes()],
        lane_points: gt.lanes.iter().map(|l| l.points().to_vec()).collect(),
        traffic_logits: gt
            .traffic
            .iter()
            .map(|e| {
                (0..crate::scene::TRAFFIC_CLASSES)
                    .map(|c| {
                        if c == e.attr as usize {
                            ORACLE_LOGIT
                        } else {
                            -ORACLE_LOGIT
                        }
                    })
                    .collect()
            })
            .collect(),
        traffic_boxes: gt.traffic.iter().map(|e| e.bbox.to_array()).collect(),
        topo_ll: gt.g_ll.iter().map(|r| r.iter().map(|&v| sat(v)).collect()).collect(),
        topo_lt: gt.g_lt.iter().map(|r| r.iter().map(|&v| sat(v)).collect()).collect(),
    }
}
