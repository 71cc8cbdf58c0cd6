use crate::error::Result;
use crate::geometry::{BBox2D, Point3};
use crate::numerics::{nn, Graph, ParamStore, Real, Tensor, Var};

/// Graph handles for one prediction set.
#[derive(Debug, Clone, Copy)]
pub struct Predictions {
    /// `n × 1` lane logits.
    pub lane_logits: Var,
    /// `n × 3P` lane points in metres, point-major.
    pub lane_points: Var,
    /// `n_t × classes` attribute logits.
    pub traffic_logits: Var,
    /// `n_t × 4` box corners `[x_min, y_min, x_max, y_max]`.
    pub traffic_boxes: Var,
    /// `n × n` lane-lane topology logits.
    pub topo_ll: Var,
    /// `n × n_t` lane-traffic topology logits.
    pub topo_lt: Var,
}

/// Plain values of a prediction set; lane points in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionValues {
    pub lane_logits: Vec<f64>,
    pub lane_points: Vec<Vec<Point3>>,
    pub traffic_logits: Vec<Vec<f64>>,
    pub traffic_boxes: Vec<[f64; 4]>,
    pub topo_ll: Vec<Vec<f64>>,
    pub topo_lt: Vec<Vec<f64>>,
}

fn rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.as_f64()).collect())
        .collect()
}

impl Predictions {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> PredictionValues {
        let lane_points = rows(g.value(self.lane_points))
            .into_iter()
            .map(|r| r.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
            .collect();
        PredictionValues {
            lane_logits: g.value(self.lane_logits).to_f64_vec(),
            lane_points,
            traffic_logits: rows(g.value(self.traffic_logits)),
            traffic_boxes: rows(g.value(self.traffic_boxes))
                .into_iter()
                .map(|r| [r[0], r[1], r[2], r[3]])
                .collect(),
            topo_ll: rows(g.value(self.topo_ll)),
            topo_lt: rows(g.value(self.topo_lt)),
        }
    }
}

impl PredictionValues {
    pub fn n_lanes(&self) -> usize {
        self.lane_logits.len()
    }

    pub fn n_traffic(&self) -> usize {
        self.traffic_boxes.len()
    }

    /// Box `t` as a valid [`BBox2D`], widening degenerate extents to a hair.
    pub fn traffic_box(&self, t: usize) -> BBox2D {
        let [x0, y0, x1, y1] = self.traffic_boxes[t];
        BBox2D::new(x0, y0, x1.max(x0 + 1e-9), y1.max(y0 + 1e-9)).expect("finite box")
    }
}

/// `fc2(gelu(fc1(x)))`.
pub fn mlp<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = nn::linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    nn::linear(g, store, &format!("{prefix}.fc2"), h)
}

/// Lane logits `n × 1` and points `n × 3P` in metres.
pub fn lane_heads<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, q: Var) -> Result<(Var, Var)> {
    Ok((mlp(g, store, "head.lane_cls", q)?, mlp(g, store, "head.lane_reg", q)?))
}

/// Attribute logits and corner boxes from sigmoid `(cx, cy, w, h)`.
pub fn traffic_heads<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, t: Var) -> Result<(Var, Var)> {
    let logits = nn::linear(g, store, "head.traffic_cls", t)?;
    let raw = mlp(g, store, "head.traffic_box", t)?;
    let cxcywh = g.sigmoid(raw);
    #[rustfmt::skip]
    let to_corners = Tensor::from_f64(&[4, 4], &[
        1.0, 0.0, 1.0, 0.0,
        0.0, 1.0, 0.0, 1.0,
        -0.5, 0.0, 0.5, 0.0,
        0.0, -0.5, 0.0, 0.5,
    ])?;
    let m = g.constant(to_corners);
    Ok((logits, g.matmul(cxcywh, m)?))
}

/// Pairwise MLP over `[a_r ; b_s]` for every ordered pair, as an `n_a × n_b` logit matrix.
///
/// The first layer is split by input half, so `W₁[a_r; b_s] = W_a a_r + W_b b_s`
/// and each half is projected once per row rather than once per pair.
pub fn topo_head<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, a: Var, b: Var) -> Result<Var> {
    let (na, nb) = (g.shape(a)[0], g.shape(b)[0]);
    if na == 0 || nb == 0 {
        return Ok(g.constant(Tensor::zeros(&[na, nb])));
    }
    let c = g.shape(a)[1];
    let w1 = g.param(store, &format!("{prefix}.fc1.weight"))?;
    let b1 = g.param(store, &format!("{prefix}.fc1.bias"))?;
    let wa = g.slice_rows(w1, 0, c)?;
    let wb = g.slice_rows(w1, c, c)?;
    let pa = g.matmul(a, wa)?;
    let pa = g.add_row(pa, b1)?;
    let pb = g.matmul(b, wb)?;
    let h = g.pair_sum(pa, pb)?;
    let h = g.gelu(h);
    let out = nn::linear(g, store, &format!("{prefix}.fc2"), h)?;
    g.reshape(out, &[na, nb])
}

/// Applies all lane-side heads to `q` against traffic queries `t` whose own
/// heads were already evaluated.
pub fn predict<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    q: Var,
    t: Var,
    traffic: (Var, Var),
) -> Result<Predictions> {
    let (lane_logits, lane_points) = lane_heads(g, store, q)?;
    let topo_ll = topo_head(g, store, "head.topo_ll", q, q)?;
    let topo_lt = topo_head(g, store, "head.topo_lt", q, t)?;
    Ok(Predictions {
        lane_logits,
        lane_points,
        traffic_logits: traffic.0,
        traffic_boxes: traffic.1,
        topo_ll,
        topo_lt,
    })
}
