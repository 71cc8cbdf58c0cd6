use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SceneGraph, TrafficElement, TRAFFIC_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::{resample, BBox2D, Point3, Polyline3D, DEFAULT_POINTS};

const X_EXTENT: f64 = 24.0;
const Y_EXTENT: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    Fork,
    Merge,
    Intersection,
}

impl Template {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Template::Straight),
            "fork" => Ok(Template::Fork),
            "merge" => Ok(Template::Merge),
            "intersection" | "four_way" | "four-way" => Ok(Template::Intersection),
            other => Err(Error::Config(format!("unknown template `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::Fork => "fork",
            Template::Merge => "merge",
            Template::Intersection => "intersection",
        }
    }

    /// Feasible lane counts of the template.
    fn lane_range(self) -> (usize, usize) {
        match self {
            Template::Straight => (1, 12),
            Template::Fork | Template::Merge => (3, 9),
            // three arms with one connector each, up to four arms fully connected
            Template::Intersection => (9, 20),
        }
    }
}

/// Scene generator settings. Each scene draws one template uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub templates: Vec<Template>,
    pub lanes_min: usize,
    pub lanes_max: usize,
    /// Standard deviation (m) of the jitter applied to interior lane points.
    pub noise_sigma: f64,
    pub traffic_min: usize,
    pub traffic_max: usize,
    pub points: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            templates: vec![Template::Straight, Template::Fork, Template::Merge],
            lanes_min: 2,
            lanes_max: 6,
            noise_sigma: 0.05,
            traffic_min: 1,
            traffic_max: 3,
            points: DEFAULT_POINTS,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("no scene templates configured".into()));
        }
        if self.lanes_min == 0 || self.lanes_min > self.lanes_max {
            return Err(Error::Config(format!(
                "lane bounds [{}, {}] are empty",
                self.lanes_min, self.lanes_max
            )));
        }
        if self.traffic_min > self.traffic_max {
            return Err(Error::Config(format!(
                "traffic bounds [{}, {}] are empty",
                self.traffic_min, self.traffic_max
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be finite and >= 0".into()));
        }
        if self.points < 2 {
            return Err(Error::Config("lanes need at least 2 points".into()));
        }
        for t in &self.templates {
            let (lo, hi) = t.lane_range();
            if lo.max(self.lanes_min) > hi.min(self.lanes_max) {
                return Err(Error::Config(format!(
                    "template {} needs {lo}..={hi} lanes, bounds are {}..={}",
                    t.name(),
                    self.lanes_min,
                    self.lanes_max
                )));
            }
        }
        Ok(())
    }
}

/// Keeps 9 significant digits so the JSON round trip is exact.
pub(crate) fn round_sig(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    format!("{x:.8e}").parse().unwrap()
}

type P2 = [f64; 2];

#[derive(Default)]
struct Builder {
    lanes: Vec<Vec<P2>>,
    edges: Vec<(usize, usize)>,
}

impl Builder {
    fn add(&mut self, pts: Vec<P2>) -> usize {
        self.lanes.push(pts);
        self.lanes.len() - 1
    }

    fn connect(&mut self, from: usize, to: usize) {
        self.edges.push((from, to));
    }

    /// A corridor along x at lateral offset `y`, cut into `segments` chained lanes.
    fn corridor(&mut self, rng: &mut ChaCha8Rng, y: f64, x0: f64, x1: f64, segments: usize) {
        let mut cuts = vec![x0];
        let span = (x1 - x0) / segments as f64;
        for k in 1..segments {
            cuts.push(x0 + span * k as f64 + rng.gen_range(-0.25..0.25) * span);
        }
        cuts.push(x1);
        let mut prev = None;
        for w in cuts.windows(2) {
            let id = self.add(vec![[w[0], y], [w[1], y]]);
            if let Some(p) = prev {
                self.connect(p, id);
            }
            prev = Some(id);
        }
    }
}

fn bezier(p0: P2, c: P2, p2: P2, n: usize) -> Vec<P2> {
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let u = 1.0 - t;
            [
                u * u * p0[0] + 2.0 * u * t * c[0] + t * t * p2[0],
                u * u * p0[1] + 2.0 * u * t * c[1] + t * t * p2[1],
            ]
        })
        .collect()
}

/// Splits `extra` lanes over parallel corridors of 1..=3 segments.
fn parallel_fill(b: &mut Builder, rng: &mut ChaCha8Rng, mut extra: usize, offsets: &[f64]) {
    for &y in offsets {
        if extra == 0 {
            break;
        }
        let segs = rng.gen_range(1..=extra.min(3));
        b.corridor(rng, y, -X_EXTENT, X_EXTENT, segs);
        extra -= segs;
    }
}

fn build_straight(rng: &mut ChaCha8Rng, lanes: usize, width: f64) -> Builder {
    let mut b = Builder::default();
    let min_corridors = lanes.div_ceil(3);
    let corridors = rng.gen_range(min_corridors..=lanes.min(4).max(min_corridors));
    let mut segs = vec![1usize; corridors];
    let mut left = lanes - corridors;
    while left > 0 {
        let i = rng.gen_range(0..corridors);
        if segs[i] < 3 {
            segs[i] += 1;
            left -= 1;
        }
    }
    for (j, &s) in segs.iter().enumerate() {
        let y = (j as f64 - (corridors as f64 - 1.0) / 2.0) * width;
        b.corridor(rng, y, -X_EXTENT, X_EXTENT, s);
    }
    b
}

fn build_fork(rng: &mut ChaCha8Rng, lanes: usize, width: f64, merge: bool) -> Builder {
    let mut b = Builder::default();
    let xj = rng.gen_range(-8.0..8.0);
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let y0 = -side * width * 0.5;
    let spread = width * rng.gen_range(1.0..2.0);
    let bend = rng.gen_range(6.0..12.0);
    if !merge {
        let parent = b.add(vec![[-X_EXTENT, y0], [xj, y0]]);
        let straight = b.add(vec![[xj, y0], [X_EXTENT, y0]]);
        let far = [X_EXTENT, y0 + side * spread];
        let diverge = b.add(bezier([xj, y0], [xj + bend, y0], far, 24));
        b.connect(parent, straight);
        b.connect(parent, diverge);
    } else {
        let near = [-X_EXTENT, y0 + side * spread];
        let side_in = b.add(bezier(near, [xj - bend, y0], [xj, y0], 24));
        let straight = b.add(vec![[-X_EXTENT, y0], [xj, y0]]);
        let child = b.add(vec![[xj, y0], [X_EXTENT, y0]]);
        b.connect(side_in, child);
        b.connect(straight, child);
    }
    let offsets: Vec<f64> = (1..=3).map(|k| y0 - side * width * k as f64).collect();
    parallel_fill(&mut b, rng, lanes - 3, &offsets);
    b
}

fn line_intersection(p: P2, d: P2, q: P2, e: P2) -> Option<P2> {
    let den = d[0] * e[1] - d[1] * e[0];
    if den.abs() < 1e-9 {
        return None;
    }
    let t = ((q[0] - p[0]) * e[1] - (q[1] - p[1]) * e[0]) / den;
    Some([p[0] + t * d[0], p[1] + t * d[1]])
}

fn build_intersection(rng: &mut ChaCha8Rng, lanes: usize, width: f64) -> Builder {
    let mut b = Builder::default();
    let h = width / 2.0;
    let r = rng.gen_range(5.0..7.0);
    // (approach start, approach end, exit start, exit end), right-hand traffic
    let arms: [(P2, P2, P2, P2); 4] = [
        ([-X_EXTENT, -h], [-r, -h], [-r, h], [-X_EXTENT, h]),
        ([X_EXTENT, h], [r, h], [r, -h], [X_EXTENT, -h]),
        ([h, -Y_EXTENT], [h, -r], [-h, -r], [-h, -Y_EXTENT]),
        ([-h, Y_EXTENT], [-h, r], [h, r], [h, Y_EXTENT]),
    ];
    let n_arms = if lanes > 12 || (lanes == 12 && rng.gen_bool(0.5)) {
        4
    } else {
        3
    };
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let mut used: Vec<usize> = order[..n_arms].to_vec();
    used.sort_unstable();

    let approach: Vec<usize> = used.iter().map(|&a| b.add(vec![arms[a].0, arms[a].1])).collect();
    let exits: Vec<usize> = used.iter().map(|&a| b.add(vec![arms[a].2, arms[a].3])).collect();

    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for i in 0..n_arms {
        for j in 0..n_arms {
            if i != j {
                candidates.push((i, j));
            }
        }
    }
    let target = (lanes - 2 * n_arms).clamp(n_arms, candidates.len());
    candidates.shuffle(rng);
    // one connector per approach first, then fill
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for i in 0..n_arms {
        let k = candidates.iter().position(|&(a, _)| a == i).unwrap();
        chosen.push(candidates.remove(k));
    }
    chosen.extend(candidates.into_iter().take(target - n_arms));
    chosen.sort_unstable();

    for (i, j) in chosen {
        let (a0, a1, _, _) = arms[used[i]];
        let (_, _, e0, e1) = arms[used[j]];
        let d = [a1[0] - a0[0], a1[1] - a0[1]];
        let e = [e1[0] - e0[0], e1[1] - e0[1]];
        let ctrl = line_intersection(a1, d, e0, e).unwrap_or([(a1[0] + e0[0]) / 2.0, (a1[1] + e0[1]) / 2.0]);
        let id = b.add(bezier(a1, ctrl, e0, 16));
        b.connect(approach[i], id);
        b.connect(id, exits[j]);
    }
    b
}

/// Generates one scene; deterministic per `(config, seed)`.
pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<SceneGraph> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = *config.templates.choose(&mut rng).unwrap();
    let (lo, hi) = template.lane_range();
    let lanes = rng.gen_range(lo.max(config.lanes_min)..=hi.min(config.lanes_max));
    let width = rng.gen_range(3.0..3.8);

    let builder = match template {
        Template::Straight => build_straight(&mut rng, lanes, width),
        Template::Fork => build_fork(&mut rng, lanes, width, false),
        Template::Merge => build_fork(&mut rng, lanes, width, true),
        Template::Intersection => build_intersection(&mut rng, lanes, width),
    };

    // global pose: mirror, small rotation, gentle slope
    let flip_x = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
    let flip_y = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
    let angle: f64 = if template == Template::Intersection {
        0.0
    } else {
        rng.gen_range(-0.06..0.06)
    };
    let slope = rng.gen_range(-0.02..0.02);
    let (sa, ca) = angle.sin_cos();
    let pose = |p: &P2| -> Point3 {
        let (x, y) = (p[0] * flip_x, p[1] * flip_y);
        let xr = (ca * x - sa * y).clamp(-X_EXTENT, X_EXTENT);
        let yr = (sa * x + ca * y).clamp(-Y_EXTENT, Y_EXTENT);
        [xr, yr, slope * xr]
    };

    let noise = Normal::new(0.0, config.noise_sigma.max(1e-300)).unwrap();
    let mut polylines = Vec::with_capacity(builder.lanes.len());
    for pts in &builder.lanes {
        let raw = Polyline3D::new(pts.iter().map(pose).collect())?;
        let uniform = resample(&raw, config.points)?;
        let n = uniform.len();
        let jittered: Vec<Point3> = uniform
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut q = *p;
                // endpoints stay exact so connected lanes share their junction point
                if i > 0 && i + 1 < n && config.noise_sigma > 0.0 {
                    q[0] = (q[0] + noise.sample(&mut rng)).clamp(-X_EXTENT, X_EXTENT);
                    q[1] = (q[1] + noise.sample(&mut rng)).clamp(-Y_EXTENT, Y_EXTENT);
                }
                [round_sig(q[0]), round_sig(q[1]), round_sig(q[2])]
            })
            .collect();
        polylines.push(Polyline3D::new(jittered)?);
    }

    let nl = polylines.len();
    let mut g_ll = vec![vec![0u8; nl]; nl];
    for &(a, b) in &builder.edges {
        g_ll[a][b] = 1;
    }

    let n_traffic = rng.gen_range(config.traffic_min..=config.traffic_max);
    let approach: Vec<usize> = (0..nl).filter(|&p| g_ll[p].contains(&1)).collect();
    let mut traffic = Vec::with_capacity(n_traffic);
    let mut g_lt = vec![vec![0u8; n_traffic]; nl];
    for t in 0..n_traffic {
        let attr = rng.gen_range(0..TRAFFIC_CLASSES) as u8;
        let bw = rng.gen_range(0.03..0.06);
        let bh = rng.gen_range(0.05..0.09);
        let governed = if !approach.is_empty() && rng.gen_bool(0.85) {
            Some(approach[rng.gen_range(0..approach.len())])
        } else {
            None
        };
        let (cx, cy) = match governed {
            Some(p) => {
                let end = polylines[p].last();
                (0.5 - end[1] / 25.0, 0.5 - 0.3 * (end[0] + 25.0) / 50.0)
            }
            None => (rng.gen_range(0.05..0.95), rng.gen_range(0.15..0.5)),
        };
        let cx = (cx + rng.gen_range(-0.01..0.01)).clamp(bw / 2.0 + 0.01, 1.0 - bw / 2.0 - 0.01);
        let cy = cy.clamp(bh / 2.0 + 0.01, 1.0 - bh / 2.0 - 0.01);
        let bbox = BBox2D::new(
            round_sig(cx - bw / 2.0),
            round_sig(cy - bh / 2.0),
            round_sig(cx + bw / 2.0),
            round_sig(cy + bh / 2.0),
        )?;
        traffic.push(TrafficElement { bbox, attr });
        if let Some(p) = governed {
            let anchor = *polylines[p].last();
            for q in &approach {
                let end = polylines[*q].last();
                if (end[0] - anchor[0]).hypot(end[1] - anchor[1]) < 1.0 {
                    g_lt[*q][t] = 1;
                }
            }
        }
    }

    SceneGraph::new(polylines, traffic, g_ll, g_lt)
}
