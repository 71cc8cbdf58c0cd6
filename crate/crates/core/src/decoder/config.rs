use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DEFAULT_POINTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// SA → CA → FFN with one-to-one supervision only.
    Standard,
    /// Parallel CA blocks → fusion → SA → FFN; CA outputs are exposed as taps.
    Reordered,
    /// Standard order; one-to-many topology supervision on the layer outputs.
    NaiveO2m,
    /// Standard order over `G` independently matched query groups.
    GroupO2m,
}

impl DecoderMode {
    pub const ALL: [DecoderMode; 4] = [
        DecoderMode::Standard,
        DecoderMode::Reordered,
        DecoderMode::NaiveO2m,
        DecoderMode::GroupO2m,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderMode::Standard => "standard",
            DecoderMode::Reordered => "reordered",
            DecoderMode::NaiveO2m => "naive_o2m",
            DecoderMode::GroupO2m => "group_o2m",
        }
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub mode: DecoderMode,
    /// Decoder layers `N`.
    pub layers: usize,
    /// Lane queries `N̄_L` (all groups together in group mode).
    pub lane_queries: usize,
    pub traffic_queries: usize,
    pub channels: usize,
    pub heads: usize,
    /// Parallel cross-attention blocks `M` (reordered mode).
    pub parallel_blocks: usize,
    /// Query groups `G` (group mode).
    pub groups: usize,
    pub points: usize,
    pub ffn_hidden: usize,
    pub topo_hidden: usize,
    pub traffic_layers: usize,
    pub bev_h: usize,
    pub bev_w: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            mode: DecoderMode::Reordered,
            layers: 3,
            lane_queries: 60,
            traffic_queries: 20,
            channels: 64,
            heads: 4,
            parallel_blocks: 4,
            groups: 3,
            points: DEFAULT_POINTS,
            ffn_hidden: 128,
            topo_hidden: 64,
            traffic_layers: 2,
            bev_h: 50,
            bev_w: 25,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.parallel_blocks == 0 {
            return fail("parallel_blocks must be at least 1".into());
        }
        if self.lane_queries == 0 || self.traffic_queries == 0 {
            return fail("query counts must be positive".into());
        }
        if self.points < 2 {
            return fail(format!("a lane needs at least 2 points, got {}", self.points));
        }
        if self.channels == 0 || self.ffn_hidden == 0 || self.topo_hidden == 0 {
            return fail("channel widths must be positive".into());
        }
        if self.bev_h == 0 || self.bev_w == 0 {
            return fail("BEV grid must be non-empty".into());
        }
        if self.mode == DecoderMode::GroupO2m && (self.groups == 0 || !self.lane_queries.is_multiple_of(self.groups)) {
            return fail(format!(
                "{} lane queries cannot be split into {} equal groups",
                self.lane_queries, self.groups
            ));
        }
        Ok(())
    }

    /// Query groups actually used by the configured mode.
    pub fn group_count(&self) -> usize {
        if self.mode == DecoderMode::GroupO2m {
            self.groups
        } else {
            1
        }
    }

    pub fn group_size(&self) -> usize {
        self.lane_queries / self.group_count()
    }

    /// Cross-attention blocks per lane layer.
    pub fn ca_blocks(&self) -> usize {
        if self.mode == DecoderMode::Reordered {
            self.parallel_blocks
        } else {
            1
        }
    }

    pub fn tap_count(&self) -> usize {
        if self.mode == DecoderMode::Reordered {
            self.layers * self.parallel_blocks
        } else {
            0
        }
    }
}
