//! Polyline and box geometry shared by scene generation, matching costs and metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Default number of points per lane centerline.
pub const DEFAULT_POINTS: usize = 11;

pub fn dist(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn lerp(a: &Point3, b: &Point3, t: f64) -> Point3 {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Ordered 3-D points in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point3>", into = "Vec<Point3>")]
pub struct Polyline3D {
    points: Vec<Point3>,
}

impl TryFrom<Vec<Point3>> for Polyline3D {
    type Error = Error;

    fn try_from(points: Vec<Point3>) -> Result<Self> {
        Polyline3D::new(points)
    }
}

impl From<Polyline3D> for Vec<Point3> {
    fn from(p: Polyline3D) -> Self {
        p.points
    }
}

impl Polyline3D {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Geometry(format!(
                "polyline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Geometry("polyline has non-finite coordinates".into()));
        }
        if points.windows(2).all(|w| w[0] == w[1]) {
            return Err(Error::Geometry("polyline points are all coincident".into()));
        }
        Ok(Polyline3D { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> &Point3 {
        &self.points[0]
    }

    pub fn last(&self) -> &Point3 {
        &self.points[self.points.len() - 1]
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(&w[0], &w[1])).sum()
    }

    /// Euclidean distance from `p` to the nearest point on the polyline, and the
    /// index of the segment attaining it.
    pub fn distance_to(&self, p: &Point3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, w) in self.points.windows(2).enumerate() {
            let d = point_segment_distance(p, &w[0], &w[1]);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    pub fn map_points(&self, f: impl Fn(&Point3) -> Point3) -> Result<Self> {
        Polyline3D::new(self.points.iter().map(f).collect())
    }
}

pub fn point_segment_distance(p: &Point3, a: &Point3, b: &Point3) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, &lerp(a, b, t))
}

/// `n` points at equal arc-length spacing; endpoints are copied exactly.
pub fn resample(poly: &Polyline3D, n: usize) -> Result<Polyline3D> {
    if n < 2 {
        return Err(Error::Geometry(format!("resample needs n >= 2, got {n}")));
    }
    let pts = poly.points();
    let mut cum = Vec::with_capacity(pts.len());
    cum.push(0.0);
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + dist(&w[0], &w[1]));
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return Err(Error::Geometry("cannot resample a zero-length polyline".into()));
    }
    let mut out = Vec::with_capacity(n);
    out.push(pts[0]);
    let mut seg = 0;
    for i in 1..n - 1 {
        let s = total * i as f64 / (n - 1) as f64;
        while seg + 1 < pts.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let span = cum[seg + 1] - cum[seg];
        let t = if span > 0.0 { (s - cum[seg]) / span } else { 0.0 };
        out.push(lerp(&pts[seg], &pts[seg + 1], t));
    }
    out.push(*poly.last());
    Polyline3D::new(out)
}

/// Discrete Fréchet distance.
pub fn frechet(a: &Polyline3D, b: &Polyline3D) -> f64 {
    frechet_points(a.points(), b.points())
}

pub fn frechet_points(a: &[Point3], b: &[Point3]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return f64::INFINITY;
    }
    let mut prev = vec![0.0; m];
    let mut cur = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let d = dist(&a[i], &b[j]);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => d.max(cur[j - 1]),
                (_, 0) => d.max(prev[0]),
                _ => d.max(prev[j].min(prev[j - 1]).min(cur[j - 1])),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// Distance from the end of `pred_from` to the start of `succ`.
pub fn endpoint_gap(pred_from: &Polyline3D, succ: &Polyline3D) -> f64 {
    dist(pred_from.last(), succ.first())
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl TryFrom<[f64; 4]> for BBox2D {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox2D::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox2D> for [f64; 4] {
    fn from(b: BBox2D) -> Self {
        b.to_array()
    }
}

impl BBox2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::Geometry(format!(
                "invalid box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(BBox2D {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

struct BoxTerms {
    inter: f64,
    union: f64,
    hull: f64,
}

fn box_terms(a: &[f64; 4], b: &[f64; 4]) -> BoxTerms {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    BoxTerms { inter, union, hull }
}

pub fn iou(a: &BBox2D, b: &BBox2D) -> f64 {
    let t = box_terms(&a.to_array(), &b.to_array());
    t.inter / t.union
}

pub fn giou(a: &BBox2D, b: &BBox2D) -> f64 {
    giou_arrays(&a.to_array(), &b.to_array())
}

pub fn giou_arrays(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let t = box_terms(a, b);
    t.inter / t.union - (t.hull - t.union) / t.hull
}

/// GIoU and its gradient with respect to the corners of `a`.
pub fn giou_with_grad(a: &[f64; 4], b: &[f64; 4]) -> (f64, [f64; 4]) {
    let t = box_terms(a, b);
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    let (wa, ha) = (a[2] - a[0], a[3] - a[1]);
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);

    // partials of each term w.r.t. [x0, y0, x1, y1] of a
    let d_area = [-ha, -wa, ha, wa];
    let mut d_inter = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        let d_iw = [
            if a[0] > b[0] { -1.0 } else { 0.0 },
            0.0,
            if a[2] < b[2] { 1.0 } else { 0.0 },
            0.0,
        ];
        let d_ih = [
            0.0,
            if a[1] > b[1] { -1.0 } else { 0.0 },
            0.0,
            if a[3] < b[3] { 1.0 } else { 0.0 },
        ];
        for k in 0..4 {
            d_inter[k] = ih * d_iw[k] + iw * d_ih[k];
        }
    }
    let d_cw = [
        if a[0] < b[0] { -1.0 } else { 0.0 },
        0.0,
        if a[2] > b[2] { 1.0 } else { 0.0 },
        0.0,
    ];
    let d_ch = [
        0.0,
        if a[1] < b[1] { -1.0 } else { 0.0 },
        0.0,
        if a[3] > b[3] { 1.0 } else { 0.0 },
    ];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_hull = ch * d_cw[k] + cw * d_ch[k];
        // giou = inter/union + union/hull - 1
        grad[k] = (d_inter[k] * t.union - t.inter * d_union) / (t.union * t.union)
            + (d_union * t.hull - t.union * d_hull) / (t.hull * t.hull);
    }
    (t.inter / t.union + t.union / t.hull - 1.0, grad)
}
