//! Run configuration and its flat `key = value` text form.
//!
//! Blank lines and `#` comments are ignored; every other line is `key = value`.
//! Unknown or repeated keys are errors. Recognized keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `mode` | `standard`/`baseline_o2o`, `reordered`/`ratopo`, `naive_o2m`, `group_o2m` | `reordered` |
//! | `k` | positives per lane in one-to-many matching | 3 |
//! | `m` | parallel cross-attention blocks | 4 |
//! | `layers`, `channels`, `heads` | decoder depth and width | 3, 64, 4 |
//! | `lane_queries`, `traffic_queries` | query counts | 60, 20 |
//! | `groups` | query groups in `group_o2m` | 3 |
//! | `ffn_hidden`, `topo_hidden`, `traffic_layers` | head and branch sizes | 128, 64, 2 |
//! | `points` | points per lane | 11 |
//! | `bev_h`, `bev_w`, `bev_noise` | raster grid and feature noise | 50, 25, 0.1 |
//! | `lr`, `weight_decay`, `grad_clip` | AdamW settings; `grad_clip = 0` disables clipping | 2e-4, 0.01, 0 |
//! | `steps`, `batch`, `seed` | schedule and master seed | 2000, 4, 0 |
//! | `pool`, `eval_scenes` | training pool and held-out evaluation sizes | 100, 50 |
//! | `templates` | comma list of `straight`, `fork`, `merge`, `intersection` | `straight,fork,merge` |
//! | `lanes_min`, `lanes_max`, `scene_noise`, `traffic_min`, `traffic_max` | generator bounds | 2, 6, 0.05, 1, 3 |
//! | `w_lane`, `w_traffic`, `w_ll`, `w_lt`, `w_o2m` | loss weights | 1, 1, 5, 5, 2 |
//! | `focal_alpha`, `focal_gamma` | focal parameters | 0.25, 2 |
//! | `tap_reduction` | `sum` or `mean` over taps | `sum` |
//! | `regime` | main topology mask, `valid_only` or `full` | `valid_only` |
//! | `out` | output directory | `runs` |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderMode};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, TapReduction};
use crate::scene::{BevConfig, GeneratorConfig, Template};
use crate::supervision::Regime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub decoder: DecoderConfig,
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub pool: usize,
    pub eval_scenes: usize,
    pub generator: GeneratorConfig,
    pub bev_noise: f64,
    pub weights: LossWeights,
    pub tap_reduction: TapReduction,
    pub regime: Regime,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            decoder: DecoderConfig::default(),
            k: 3,
            lr: 2e-4,
            weight_decay: 0.01,
            grad_clip: 0.0,
            steps: 2000,
            batch: 4,
            seed: 0,
            pool: 100,
            eval_scenes: 50,
            generator: GeneratorConfig::default(),
            bev_noise: 0.1,
            weights: LossWeights::default(),
            tap_reduction: TapReduction::Sum,
            regime: Regime::ValidOnly,
            out: PathBuf::from("runs"),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

pub fn parse_mode(v: &str) -> Result<DecoderMode> {
    match v {
        "baseline_o2o" | "baseline" => Ok(DecoderMode::Standard),
        "ratopo" => Ok(DecoderMode::Reordered),
        other => other.parse(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.generator.validate()?;
        self.weights.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.steps == 0 || self.batch == 0 || self.pool == 0 {
            return Err(Error::Config("steps, batch and pool must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0 && self.bev_noise >= 0.0) {
            return Err(Error::Config(
                "weight_decay, grad_clip and bev_noise must be >= 0".into(),
            ));
        }
        if self.generator.points != self.decoder.points {
            return Err(Error::Config(
                "generator and decoder disagree on points per lane".into(),
            ));
        }
        Ok(())
    }

    /// Raster settings for a scene drawn with `scene_seed`.
    pub fn bev(&self, scene_seed: u64) -> BevConfig {
        BevConfig {
            h: self.decoder.bev_h,
            w: self.decoder.bev_w,
            noise_sigma: self.bev_noise,
            seed: scene_seed,
            ..BevConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.decoder;
        match key {
            "mode" => d.mode = parse_mode(v)?,
            "k" => self.k = parse_num(key, v)?,
            "m" => d.parallel_blocks = parse_num(key, v)?,
            "layers" => d.layers = parse_num(key, v)?,
            "channels" => d.channels = parse_num(key, v)?,
            "heads" => d.heads = parse_num(key, v)?,
            "lane_queries" => d.lane_queries = parse_num(key, v)?,
            "traffic_queries" => d.traffic_queries = parse_num(key, v)?,
            "groups" => d.groups = parse_num(key, v)?,
            "ffn_hidden" => d.ffn_hidden = parse_num(key, v)?,
            "topo_hidden" => d.topo_hidden = parse_num(key, v)?,
            "traffic_layers" => d.traffic_layers = parse_num(key, v)?,
            "points" => {
                d.points = parse_num(key, v)?;
                self.generator.points = d.points;
            }
            "bev_h" => d.bev_h = parse_num(key, v)?,
            "bev_w" => d.bev_w = parse_num(key, v)?,
            "bev_noise" => self.bev_noise = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "pool" => self.pool = parse_num(key, v)?,
            "eval_scenes" => self.eval_scenes = parse_num(key, v)?,
            "templates" => {
                self.generator.templates = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(Template::parse)
                    .collect::<Result<_>>()?
            }
            "lanes_min" => self.generator.lanes_min = parse_num(key, v)?,
            "lanes_max" => self.generator.lanes_max = parse_num(key, v)?,
            "scene_noise" => self.generator.noise_sigma = parse_num(key, v)?,
            "traffic_min" => self.generator.traffic_min = parse_num(key, v)?,
            "traffic_max" => self.generator.traffic_max = parse_num(key, v)?,
            "w_lane" => self.weights.lane = parse_num(key, v)?,
            "w_traffic" => self.weights.traffic = parse_num(key, v)?,
            "w_ll" => self.weights.ll = parse_num(key, v)?,
            "w_lt" => self.weights.lt = parse_num(key, v)?,
            "w_o2m" => self.weights.o2m = parse_num(key, v)?,
            "focal_alpha" => self.weights.alpha = parse_num(key, v)?,
            "focal_gamma" => self.weights.gamma = parse_num(key, v)?,
            "tap_reduction" => {
                self.tap_reduction = match v {
                    "sum" => TapReduction::Sum,
                    "mean" => TapReduction::Mean,
                    _ => {
                        return Err(Error::Config(format!(
                            "`tap_reduction`: expected sum or mean, got `{v}`"
                        )))
                    }
                }
            }
            "regime" => {
                self.regime = match v {
                    "valid_only" => Regime::ValidOnly,
                    "full" => Regime::Full,
                    _ => {
                        return Err(Error::Config(format!(
                            "`regime`: expected valid_only or full, got `{v}`"
                        )))
                    }
                }
            }
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self` without validating.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key `{key}` given twice", n + 1)));
            }
            self.set(key, value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Every key in canonical form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let d = &self.decoder;
        let g = &self.generator;
        let w = &self.weights;
        let templates: Vec<&str> = g.templates.iter().map(|t| t.name()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", d.mode.to_string());
        kv("k", self.k.to_string());
        kv("m", d.parallel_blocks.to_string());
        kv("layers", d.layers.to_string());
        kv("channels", d.channels.to_string());
        kv("heads", d.heads.to_string());
        kv("lane_queries", d.lane_queries.to_string());
        kv("traffic_queries", d.traffic_queries.to_string());
        kv("groups", d.groups.to_string());
        kv("ffn_hidden", d.ffn_hidden.to_string());
        kv("topo_hidden", d.topo_hidden.to_string());
        kv("traffic_layers", d.traffic_layers.to_string());
        kv("points", d.points.to_string());
        kv("bev_h", d.bev_h.to_string());
        kv("bev_w", d.bev_w.to_string());
        kv("bev_noise", self.bev_noise.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("seed", self.seed.to_string());
        kv("pool", self.pool.to_string());
        kv("eval_scenes", self.eval_scenes.to_string());
        kv("templates", templates.join(","));
        kv("lanes_min", g.lanes_min.to_string());
        kv("lanes_max", g.lanes_max.to_string());
        kv("scene_noise", g.noise_sigma.to_string());
        kv("traffic_min", g.traffic_min.to_string());
        kv("traffic_max", g.traffic_max.to_string());
        kv("w_lane", w.lane.to_string());
        kv("w_traffic", w.traffic.to_string());
        kv("w_ll", w.ll.to_string());
        kv("w_lt", w.lt.to_string());
        kv("w_o2m", w.o2m.to_string());
        kv("focal_alpha", w.alpha.to_string());
        kv("focal_gamma", w.gamma.to_string());
        kv(
            "tap_reduction",
            match self.tap_reduction {
                TapReduction::Sum => "sum",
                TapReduction::Mean => "mean",
            }
            .into(),
        );
        kv(
            "regime",
            match self.regime {
                Regime::ValidOnly => "valid_only",
                Regime::Full => "full",
            }
            .into(),
        );
        kv("out", self.out.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_lossless() {
        let mut c = RunConfig::default();
        c.lr = 3.3e-4;
        c.bev_noise = 0.123456789012345;
        c.decoder.mode = DecoderMode::GroupO2m;
        c.generator.templates = vec![Template::Fork, Template::Intersection];
        c.generator.lanes_max = 12;
        c.tap_reduction = TapReduction::Mean;
        c.regime = Regime::Full;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let e = RunConfig::parse("lr = 1e-3\nlearning_rate = 2").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(
            e.to_string().contains("line 2") && e.to_string().contains("learning_rate"),
            "{e}"
        );
        assert!(RunConfig::parse("k = three").is_err());
        assert!(RunConfig::parse("k = 1\nk = 2").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("k = 0").is_err());
        assert!(RunConfig::parse("channels = 30\nheads = 4").is_err());
    }

    #[test]
    fn aliases_and_comments() {
        let c = RunConfig::parse("# ablation arm\nmode = baseline_o2o  # plain\n\nm = 2").unwrap();
        assert_eq!(c.decoder.mode, DecoderMode::Standard);
        assert_eq!(c.decoder.parallel_blocks, 2);
        assert_eq!(parse_mode("ratopo").unwrap(), DecoderMode::Reordered);
    }
}
