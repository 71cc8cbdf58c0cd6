//! Synthetic driving scenes: procedural generation, JSON serialization and the
//! feature front-end that stands in for the camera/BEV perception stack.

mod generate;
mod io;
mod raster;

pub use generate::{generate, GeneratorConfig, Template};
pub use io::{load, load_file, save, save_file, SCHEMA_VERSION};
pub use raster::{encode_traffic, rasterize, traffic_inputs, BevConfig, BevFeature, BEV_CHANNELS, TRAFFIC_INPUT_DIM};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{endpoint_gap, BBox2D, Polyline3D};

/// Number of traffic-element attribute classes.
pub const TRAFFIC_CLASSES: usize = 13;

/// Maximum end-to-start gap (meters) between connected lanes.
pub const CONNECT_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficElement {
    #[serde(rename = "box")]
    pub bbox: BBox2D,
    pub attr: u8,
}

/// Ground-truth lanes, traffic elements and their topology.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub lanes: Vec<Polyline3D>,
    pub traffic: Vec<TrafficElement>,
    /// `g_ll[p][q] == 1` iff lane `p` ends where lane `q` starts.
    pub g_ll: Vec<Vec<u8>>,
    /// `g_lt[p][t] == 1` iff traffic element `t` governs lane `p`.
    pub g_lt: Vec<Vec<u8>>,
}

impl SceneGraph {
    pub fn new(
        lanes: Vec<Polyline3D>,
        traffic: Vec<TrafficElement>,
        g_ll: Vec<Vec<u8>>,
        g_lt: Vec<Vec<u8>>,
    ) -> Result<Self> {
        let s = SceneGraph {
            lanes,
            traffic,
            g_ll,
            g_lt,
        };
        s.validate().map_err(|(path, message)| Error::Parse { path, message })?;
        Ok(s)
    }

    pub fn empty() -> Self {
        SceneGraph {
            lanes: Vec::new(),
            traffic: Vec::new(),
            g_ll: Vec::new(),
            g_lt: Vec::new(),
        }
    }

    pub fn n_lanes(&self) -> usize {
        self.lanes.len()
    }

    pub fn n_traffic(&self) -> usize {
        self.traffic.len()
    }

    pub fn ll_edges(&self) -> usize {
        self.g_ll.iter().flatten().filter(|&&v| v == 1).count()
    }

    /// Checks every structural invariant; on failure returns the offending path.
    pub(crate) fn validate(&self) -> std::result::Result<(), (String, String)> {
        let nl = self.lanes.len();
        let nt = self.traffic.len();
        if self.g_ll.len() != nl {
            return Err(("g_ll".into(), format!("expected {nl} rows, found {}", self.g_ll.len())));
        }
        if self.g_lt.len() != nl {
            return Err(("g_lt".into(), format!("expected {nl} rows, found {}", self.g_lt.len())));
        }
        for (p, row) in self.g_ll.iter().enumerate() {
            if row.len() != nl {
                return Err((
                    format!("g_ll[{p}]"),
                    format!("expected {nl} columns, found {}", row.len()),
                ));
            }
            for (q, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err((format!("g_ll[{p}][{q}]"), format!("entry {v} is not binary")));
                }
                if p == q && v == 1 {
                    return Err((format!("g_ll[{p}][{q}]"), "self-connection".into()));
                }
                if v == 1 {
                    let gap = endpoint_gap(&self.lanes[p], &self.lanes[q]);
                    if gap >= CONNECT_TOLERANCE {
                        return Err((
                            format!("g_ll[{p}][{q}]"),
                            format!("connected lanes are {gap:.3} m apart"),
                        ));
                    }
                }
            }
        }
        for (p, row) in self.g_lt.iter().enumerate() {
            if row.len() != nt {
                return Err((
                    format!("g_lt[{p}]"),
                    format!("expected {nt} columns, found {}", row.len()),
                ));
            }
            if let Some(q) = row.iter().position(|&v| v > 1) {
                return Err((format!("g_lt[{p}][{q}]"), format!("entry {} is not binary", row[q])));
            }
        }
        for (t, e) in self.traffic.iter().enumerate() {
            if e.attr as usize >= TRAFFIC_CLASSES {
                return Err((
                    format!("traffic[{t}].attr"),
                    format!("attribute {} out of range", e.attr),
                ));
            }
        }
        Ok(())
    }
}
