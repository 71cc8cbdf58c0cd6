//! Bipartite matching between ground truths (rows) and predictions (columns).
//!
//! [`hungarian`] is an exact shortest-augmenting-path solver with dual
//! potentials, `O(n²·m)`. Columns are scanned in increasing index order and
//! only a strictly smaller reduced cost displaces the current candidate, so
//! among equal-cost alternatives the solver settles on lower prediction indices
//! and the result is fully deterministic.
//!
//! [`one_to_many`] replicates each ground-truth row `K` times and solves the
//! enlarged one-to-one problem, which is exactly the "K positives per ground
//! truth, at most one ground truth per prediction" optimum.

use serde::{Deserialize, Serialize};

use crate::decoder::PredictionValues;
use crate::error::{Error, Result};
use crate::geometry::{giou, resample, Point3, Polyline3D};
use crate::scene::SceneGraph;

/// Focal parameters used by both the matching cost and the losses.
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Dense `rows × cols` matrix of finite costs; rows are ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "cost matrix",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "cost entry ({}, {}) is not finite: {}",
                i / cols.max(1),
                i % cols.max(1),
                data[i]
            )));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Usage("ragged cost matrix".into()));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    O2o,
    O2m,
}

/// `sets[p]` lists the predictions assigned to ground truth `p`, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub mode: AssignMode,
    pub sets: Vec<Vec<usize>>,
    /// `Σ_p Σ_{j ∈ sets[p]} c[p][j]`, summed in row order.
    pub total_cost: f64,
}

impl AssignmentResult {
    /// One-to-one view `σ(p)`: the first member of each set.
    pub fn sigma(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s[0]).collect()
    }

    pub fn k(&self) -> usize {
        self.sets.first().map_or(0, Vec::len)
    }

    /// Prediction index → ground truth it was assigned to.
    pub fn owner(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut owner = vec![None; n_pred];
        for (p, set) in self.sets.iter().enumerate() {
            for &j in set {
                owner[j] = Some(p);
            }
        }
        owner
    }
}

/// Minimum-cost injective assignment of every row to a distinct column.
pub fn hungarian(c: &CostMatrix) -> Result<AssignmentResult> {
    let (n, m) = (c.rows, c.cols);
    if m < n {
        return Err(Error::Size(format!(
            "one-to-one assignment needs at least as many predictions ({m}) as ground truths ({n})"
        )));
    }
    // 1-based potentials; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=m {
        if owner[j] > 0 {
            sigma[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = sigma.iter().enumerate().map(|(p, &j)| c.at(p, j)).sum();
    Ok(AssignmentResult {
        mode: AssignMode::O2o,
        sets: sigma.into_iter().map(|j| vec![j]).collect(),
        total_cost,
    })
}

/// Exactly `k` distinct predictions per ground truth, disjoint across ground truths.
pub fn one_to_many(c: &CostMatrix, k: usize) -> Result<AssignmentResult> {
    if k == 0 {
        return Err(Error::Usage("one-to-many assignment needs K >= 1".into()));
    }
    let (n, m) = (c.rows, c.cols);
    if m < k * n {
        return Err(Error::Size(format!(
            "one-to-many assignment with K={k} over {n} ground truths needs K·N_L = {} predictions, got {m}",
            k * n
        )));
    }
    let mut data = Vec::with_capacity(k * n * m);
    for p in 0..n {
        for _ in 0..k {
            data.extend_from_slice(&c.data[p * m..(p + 1) * m]);
        }
    }
    let rep = hungarian(&CostMatrix::new(k * n, m, data)?)?;
    let mut sets: Vec<Vec<usize>> = rep.sets.chunks(k).map(|ch| ch.iter().map(|s| s[0]).collect()).collect();
    for s in &mut sets {
        s.sort_unstable();
    }
    let total_cost = sets
        .iter()
        .enumerate()
        .map(|(p, s)| s.iter().map(|&j| c.at(p, j)).sum::<f64>())
        .sum();
    Ok(AssignmentResult {
        mode: if k == 1 { AssignMode::O2o } else { AssignMode::O2m },
        sets,
        total_cost,
    })
}

/// Weights of the matching cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub cls: f64,
    pub reg: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            cls: 1.0,
            reg: 1.0,
            giou: 1.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Positive-class focal term `α(1−p)^γ·(−ln p)` for a logit, stable for large |x|.
pub fn focal_cost(logit: f64) -> f64 {
    let p = sigmoid(logit);
    // -ln(sigmoid(x)) = softplus(-x)
    let nll = if logit > 0.0 {
        (-logit).exp().ln_1p()
    } else {
        -logit + logit.exp().ln_1p()
    };
    FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * nll
}

/// Ground-truth lane `lane` resampled to `points`.
pub fn lane_target(lane: &Polyline3D, points: usize) -> Result<Vec<Point3>> {
    Ok(if lane.len() == points {
        lane.points().to_vec()
    } else {
        resample(lane, points)?.points().to_vec()
    })
}

/// Mean absolute coordinate difference, in metres.
pub fn mean_l1(pred: &[Point3], target: &[Point3]) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (0..3).map(|d| (a[d] - b[d]).abs()).sum::<f64>())
        .sum();
    total / (3 * target.len()).max(1) as f64
}

/// `c[p][j] = cls·focal(logit_j) + reg·meanL1(points_j, lane_p)`.
pub fn lane_cost(preds: &PredictionValues, gts: &SceneGraph, w: &CostWeights) -> Result<CostMatrix> {
    let n_pred = preds.n_lanes();
    let points = preds.lane_points.first().map_or(2, Vec::len);
    let cls: Vec<f64> = preds.lane_logits.iter().map(|&x| focal_cost(x)).collect();
    let mut data = Vec::with_capacity(gts.n_lanes() * n_pred);
    for lane in &gts.lanes {
        let target = lane_target(lane, points)?;
        for j in 0..n_pred {
            data.push(w.cls * cls[j] + w.reg * mean_l1(&preds.lane_points[j], &target));
        }
    }
    CostMatrix::new(gts.n_lanes(), n_pred, data)
}

/// As [`lane_cost`] for traffic elements, using the ground-truth attribute's
/// logit, corner L1 and `−GIoU`.
pub fn traffic_cost(preds: &PredictionValues, gts: &SceneGraph, w: &CostWeights) -> Result<CostMatrix> {
    let n_pred = preds.n_traffic();
    let mut data = Vec::with_capacity(gts.n_traffic() * n_pred);
    for e in &gts.traffic {
        let gt = e.bbox.to_array();
        for j in 0..n_pred {
            let b = preds.traffic_boxes[j];
            let l1 = (0..4).map(|d| (b[d] - gt[d]).abs()).sum::<f64>() / 4.0;
            let cls = focal_cost(preds.traffic_logits[j][e.attr as usize]);
            data.push(w.cls * cls + w.reg * l1 - w.giou * giou(&preds.traffic_box(j), &e.bbox));
        }
    }
    CostMatrix::new(gts.n_traffic(), n_pred, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox2D;
    use crate::scene::TrafficElement;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over injections by DP on the set of used columns, rows in order.
    fn brute_o2o(c: &CostMatrix) -> f64 {
        let (n, m) = (c.rows(), c.cols());
        let mut best = vec![f64::INFINITY; 1 << m];
        best[0] = 0.0;
        for mask in 0..(1usize << m) {
            let p = mask.count_ones() as usize;
            if p >= n || best[mask].is_infinite() {
                continue;
            }
            for j in 0..m {
                if mask & (1 << j) == 0 {
                    let nm = mask | (1 << j);
                    best[nm] = best[nm].min(best[mask] + c.at(p, j));
                }
            }
        }
        (0..(1usize << m))
            .filter(|mk| mk.count_ones() as usize == n)
            .map(|mk| best[mk])
            .fold(f64::INFINITY, f64::min)
    }

    /// Minimum over exact-K partitions: each column goes to one GT or none.
    fn brute_o2m(c: &CostMatrix, k: usize) -> f64 {
        fn go(c: &CostMatrix, j: usize, left: &mut Vec<usize>) -> f64 {
            if left.iter().all(|&l| l == 0) {
                return 0.0;
            }
            if j == c.cols() {
                return f64::INFINITY;
            }
            let mut best = go(c, j + 1, left);
            for p in 0..c.rows() {
                if left[p] > 0 {
                    left[p] -= 1;
                    best = best.min(c.at(p, j) + go(c, j + 1, left));
                    left[p] += 1;
                }
            }
            best
        }
        go(c, 0, &mut vec![k; c.rows()])
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, integer: bool) -> CostMatrix {
        let data = (0..n * m)
            .map(|_| {
                if integer {
                    rng.gen_range(0..20) as f64
                } else {
                    rng.gen_range(0.0..10.0)
                }
            })
            .collect();
        CostMatrix::new(n, m, data).unwrap()
    }

    fn assert_disjoint(r: &AssignmentResult) {
        let mut all: Vec<usize> = r.sets.concat();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn small_examples() {
        let r = hungarian(&CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!((r.sigma(), r.total_cost), (vec![0, 1], 0.0));

        let c = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]]).unwrap();
        let r = hungarian(&c).unwrap();
        assert_eq!((r.sigma(), r.total_cost), (vec![1, 0, 2], 5.0));

        let c = CostMatrix::from_rows(&[vec![1.0, 2.0, 0.5], vec![2.0, 0.2, 3.0]]).unwrap();
        let r = hungarian(&c).unwrap();
        assert_eq!(r.sigma(), vec![2, 1]);
        assert!((r.total_cost - 0.7).abs() < 1e-12);
    }

    #[test]
    fn one_to_many_examples() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]]).unwrap();
        let r = one_to_many(&c, 2).unwrap();
        assert_eq!(r.sets, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(r.total_cost, 6.0);
        assert_eq!(r.mode, AssignMode::O2m);

        let c = CostMatrix::from_rows(&[vec![0.5, 1.5, 2.5]]).unwrap();
        let r = one_to_many(&c, 3).unwrap();
        assert_eq!(r.sets, vec![vec![0, 1, 2]]);
        assert_eq!(r.total_cost, 4.5);
    }

    #[test]
    fn size_and_value_errors() {
        let c = CostMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(hungarian(&c), Err(Error::Size(_))));
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let err = one_to_many(&c, 2).unwrap_err();
        assert!(matches!(err, Error::Size(_)));
        let msg = err.to_string();
        assert!(msg.contains('4') && msg.contains('3'), "{msg}");
        assert!(matches!(
            CostMatrix::from_rows(&[vec![f64::NAN]]),
            Err(Error::Numeric(_))
        ));
        let empty = hungarian(&CostMatrix::new(0, 3, vec![]).unwrap()).unwrap();
        assert!(empty.sets.is_empty() && empty.total_cost == 0.0);
    }

    #[test]
    fn hungarian_matches_exhaustive_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..1000 {
            let n = rng.gen_range(1..=7);
            let m = rng.gen_range(n..=9);
            let c = random_matrix(&mut rng, n, m, trial % 2 == 0);
            let r = hungarian(&c).unwrap();
            assert_disjoint(&r);
            assert_eq!(r.total_cost, brute_o2o(&c), "trial {trial}");
            let r1 = one_to_many(&c, 1).unwrap();
            assert_eq!(r1.sets, r.sets);
            assert_eq!(r1.total_cost, r.total_cost);
        }
    }

    #[test]
    fn one_to_many_matches_exhaustive_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..300 {
            let n = rng.gen_range(1..=3);
            let k = rng.gen_range(1..=3);
            let m = rng.gen_range(n * k..=9.max(n * k));
            let c = random_matrix(&mut rng, n, m, true);
            let r = one_to_many(&c, k).unwrap();
            assert_disjoint(&r);
            assert!(r.sets.iter().all(|s| s.len() == k));
            assert_eq!(r.total_cost, brute_o2m(&c, k), "trial {trial}");
        }
    }

    proptest! {
        #[test]
        fn dominated_column_keeps_the_optimum(seed in 0u64..500, n in 1usize..5, extra in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = n + extra;
            let c = random_matrix(&mut rng, n, m, true);
            let before = hungarian(&c).unwrap().total_cost;
            // a column strictly worse than every existing entry
            let mut rows: Vec<Vec<f64>> = (0..n).map(|p| (0..m).map(|j| c.at(p, j)).collect()).collect();
            for r in &mut rows {
                r.push(100.0);
            }
            let after = hungarian(&CostMatrix::from_rows(&rows).unwrap()).unwrap().total_cost;
            prop_assert_eq!(before, after);
        }
    }

    fn lane(y: f64) -> Polyline3D {
        Polyline3D::new((0..5).map(|i| [-10.0 + 5.0 * i as f64, y, 0.0]).collect()).unwrap()
    }

    fn preds_from(lanes: &[(Polyline3D, f64)]) -> PredictionValues {
        PredictionValues {
            lane_logits: lanes.iter().map(|l| l.1).collect(),
            lane_points: lanes.iter().map(|l| l.0.points().to_vec()).collect(),
            traffic_logits: vec![],
            traffic_boxes: vec![],
            topo_ll: vec![],
            topo_lt: vec![],
        }
    }

    #[test]
    fn lane_cost_behaviour() {
        let gt = SceneGraph::new(vec![lane(0.0)], vec![], vec![vec![0]], vec![vec![]]).unwrap();
        // exact, saturated prediction: cost reaches the classification floor of 0
        let c = lane_cost(&preds_from(&[(lane(0.0), 40.0)]), &gt, &CostWeights::default()).unwrap();
        assert!(c.at(0, 0) < 1e-15);
        // closer prediction is strictly cheaper
        let c = lane_cost(
            &preds_from(&[(lane(1.0), 0.0), (lane(3.0), 0.0)]),
            &gt,
            &CostWeights::default(),
        )
        .unwrap();
        assert!(c.at(0, 0) < c.at(0, 1));
        let expect = focal_cost(0.0) + 1.0 / 3.0;
        assert!((c.at(0, 0) - expect).abs() < 1e-12);
        // symmetric configuration
        let gt2 = SceneGraph::new(
            vec![lane(-1.0), lane(1.0)],
            vec![],
            vec![vec![0; 2]; 2],
            vec![vec![]; 2],
        )
        .unwrap();
        let c = lane_cost(
            &preds_from(&[(lane(-2.0), 0.5), (lane(2.0), 0.5)]),
            &gt2,
            &CostWeights::default(),
        )
        .unwrap();
        assert_eq!(c.at(0, 0), c.at(1, 1));
        assert_eq!(c.at(0, 1), c.at(1, 0));
    }

    #[test]
    fn traffic_cost_behaviour() {
        let boxes = [
            BBox2D::new(0.1, 0.1, 0.2, 0.2).unwrap(),
            BBox2D::new(0.5, 0.5, 0.6, 0.7).unwrap(),
        ];
        let gt = SceneGraph::new(
            vec![],
            boxes.iter().map(|&bbox| TrafficElement { bbox, attr: 2 }).collect(),
            vec![],
            vec![],
        )
        .unwrap();
        let mut logits = vec![vec![-5.0; 13]; 3];
        logits[0][2] = 8.0;
        let preds = PredictionValues {
            lane_logits: vec![],
            lane_points: vec![],
            traffic_logits: logits,
            traffic_boxes: vec![boxes[0].to_array(), [0.85, 0.85, 0.95, 0.95], [0.52, 0.5, 0.6, 0.68]],
            topo_ll: vec![],
            topo_lt: vec![],
        };
        let c = traffic_cost(&preds, &gt, &CostWeights::default()).unwrap();
        assert!(c.at(0, 0) < c.at(0, 1) && c.at(0, 0) < c.at(0, 2));
        // the far disjoint box is the worst column for the second element
        assert!(c.at(1, 1) > c.at(1, 0) && c.at(1, 1) > c.at(1, 2));
        let r = hungarian(&c).unwrap();
        assert_eq!(r.total_cost, brute_o2o(&c));
        assert_eq!(r.sigma(), vec![0, 2]);
    }
}
