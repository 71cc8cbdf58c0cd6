//! BEV rasterization and traffic-element inputs.
//!
//! Grid row `i` covers x (longitudinal) cell `i`, column `j` covers y (lateral)
//! cell `j`; the cell center is `(x_min + (i + 0.5)·dx, y_min + (j + 0.5)·dy)`.
//! Flattened features are indexed `i·W + j`.
//!
//! Channels: 0 occupancy, 1 sin(heading), 2 cos(heading), 3 start marker,
//! 4 end marker, 5 Gaussian noise, 6 x/x_max, 7 y/y_max.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SceneGraph, TRAFFIC_CLASSES};
use crate::error::{Error, Result};
use crate::numerics::{nn, Graph, ParamStore, Real, Tensor, Var};

pub const BEV_CHANNELS: usize = 8;
pub const TRAFFIC_INPUT_DIM: usize = 4 + TRAFFIC_CLASSES;

const MARKER_RADIUS: f64 = 1.5;
const MARKER_SIGMA: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevConfig {
    pub h: usize,
    pub w: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            h: 50,
            w: 25,
            x_range: (-25.0, 25.0),
            y_range: (-12.5, 12.5),
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl BevConfig {
    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.x_range.1 - self.x_range.0) / self.h as f64,
            (self.y_range.1 - self.y_range.0) / self.w as f64,
        )
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let (dx, dy) = self.cell_size();
        (
            self.x_range.0 + (i as f64 + 0.5) * dx,
            self.y_range.0 + (j as f64 + 0.5) * dy,
        )
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

/// H×W×C feature grid over the BEV window.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl BevFeature {
    pub fn at(&self, i: usize, j: usize, ch: usize) -> f64 {
        self.data[(i * self.w + j) * self.c + ch]
    }

    /// `(H·W) × C` matrix of cells.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.h * self.w, self.c], &self.data).expect("grid shape is consistent")
    }
}

pub fn rasterize(scene: &SceneGraph, cfg: &BevConfig) -> Result<BevFeature> {
    for (idx, lane) in scene.lanes.iter().enumerate() {
        for p in lane.points() {
            if p[0] < cfg.x_range.0 || p[0] > cfg.x_range.1 || p[1] < cfg.y_range.0 || p[1] > cfg.y_range.1 {
                return Err(Error::Geometry(format!(
                    "lane {idx} leaves the BEV window at ({:.3}, {:.3})",
                    p[0], p[1]
                )));
            }
        }
    }
    let (dx, dy) = cfg.cell_size();
    let half_diag = 0.5 * dx.hypot(dy);
    let c = BEV_CHANNELS;
    let mut data = vec![0.0f64; cfg.cells() * c];
    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-300)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // planar copies: elevation does not affect the top-down grid
    let flat: Vec<_> = scene
        .lanes
        .iter()
        .map(|l| l.map_points(|q| [q[0], q[1], 0.0]))
        .collect::<Result<_>>()?;

    for i in 0..cfg.h {
        for j in 0..cfg.w {
            let (x, y) = cfg.cell_center(i, j);
            let cell = &mut data[(i * cfg.w + j) * c..(i * cfg.w + j + 1) * c];
            let p = [x, y, 0.0];
            let mut nearest = (f64::INFINITY, 0.0);
            for flat in &flat {
                let (d, seg) = flat.distance_to(&p);
                if d < nearest.0 {
                    let a = flat.points()[seg];
                    let b = flat.points()[seg + 1];
                    nearest = (d, (b[1] - a[1]).atan2(b[0] - a[0]));
                }
                for (ch, q) in [(3, flat.first()), (4, flat.last())] {
                    let dm = (q[0] - x).hypot(q[1] - y);
                    if dm < MARKER_RADIUS {
                        let v = (-dm * dm / (2.0 * MARKER_SIGMA * MARKER_SIGMA)).exp();
                        cell[ch] = cell[ch].max(v);
                    }
                }
            }
            if nearest.0 <= half_diag {
                cell[0] = 1.0;
                cell[1] = nearest.1.sin();
                cell[2] = nearest.1.cos();
            }
            cell[5] = if cfg.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            cell[6] = x / cfg.x_range.1.abs().max(cfg.x_range.0.abs());
            cell[7] = y / cfg.y_range.1.abs().max(cfg.y_range.0.abs());
        }
    }
    Ok(BevFeature {
        h: cfg.h,
        w: cfg.w,
        c,
        data,
    })
}

/// Raw per-element inputs: box corners followed by a one-hot attribute.
pub fn traffic_inputs<T: Real>(scene: &SceneGraph) -> Tensor<T> {
    let mut data = Vec::with_capacity(scene.n_traffic() * TRAFFIC_INPUT_DIM);
    for e in &scene.traffic {
        data.extend(e.bbox.to_array());
        for k in 0..TRAFFIC_CLASSES {
            data.push(if k == e.attr as usize { 1.0 } else { 0.0 });
        }
    }
    Tensor::from_f64(&[scene.n_traffic(), TRAFFIC_INPUT_DIM], &data).unwrap()
}

/// Embeds every traffic element through the learned linear stem `{prefix}`.
pub fn encode_traffic<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    scene: &SceneGraph,
) -> Result<Var> {
    let x = g.constant(traffic_inputs(scene));
    nn::linear(g, store, prefix, x)
}
