use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{train, RunRecord, RECORD_FILE};
use super::{parse_mode, RunConfig};
use crate::decoder::DecoderMode;
use crate::error::{Error, Result};
use crate::metrics::Scores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Mode,
    K,
    M,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Mode => "mode",
            Axis::K => "k",
            Axis::M => "m",
        }
    }

    /// Sweep values in plotting order.
    pub fn values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Mode => &["baseline_o2o", "naive_o2m", "group_o2m", "ratopo"],
            Axis::K => &["1", "2", "3", "4", "5"],
            Axis::M => &["1", "2", "4", "6"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// The run configuration of one cell. The `k` and `m` sweeps run the
    /// reordered decoder; group mode keeps its deployed query count by giving
    /// every group `lane_queries` queries.
    pub fn arm(self, base: &RunConfig, value: &str, seed: u64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        cfg.seed = seed;
        match self {
            Axis::Mode => {
                cfg.decoder.mode = parse_mode(value)?;
                if cfg.decoder.mode == DecoderMode::GroupO2m {
                    cfg.decoder.lane_queries *= cfg.decoder.groups;
                }
            }
            Axis::K => {
                cfg.decoder.mode = DecoderMode::Reordered;
                cfg.set("k", value)?;
            }
            Axis::M => {
                cfg.decoder.mode = DecoderMode::Reordered;
                cfg.set("m", value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mode" => Ok(Axis::Mode),
            "k" | "K" => Ok(Axis::K),
            "m" | "M" => Ok(Axis::M),
            _ => Err(Error::Usage(format!(
                "unknown ablation axis `{s}` (expected mode, k or m)"
            ))),
        }
    }
}

/// One trained cell of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub seed: u64,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl AblationTable {
    /// Median scores per axis value, in sweep order.
    pub fn medians(&self) -> Vec<(String, Scores)> {
        let mut values: Vec<String> = Vec::new();
        for r in &self.rows {
            if !values.contains(&r.value) {
                values.push(r.value.clone());
            }
        }
        values
            .into_iter()
            .map(|v| {
                let cell: Vec<&Scores> = self.rows.iter().filter(|r| r.value == v).map(|r| &r.scores).collect();
                let m = |f: fn(&Scores) -> f64| median(&cell.iter().map(|s| f(s)).collect::<Vec<_>>());
                let s = Scores {
                    det_l: m(|s| s.det_l),
                    det_t: m(|s| s.det_t),
                    top_ll: m(|s| s.top_ll),
                    top_lt: m(|s| s.top_lt),
                    ols: m(|s| s.ols),
                };
                (v, s)
            })
            .collect()
    }

    pub fn median_of(&self, value: &str) -> Option<Scores> {
        self.medians().into_iter().find(|(v, _)| v == value).map(|(_, s)| s)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},seed,top_ll,top_lt,det_l,det_t,ols\n", self.axis.name());
        for r in &self.rows {
            let c = &r.scores;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.value, r.seed, c.top_ll, c.top_lt, c.det_l, c.det_t, c.ols
            );
        }
        s
    }

    pub fn medians_csv(&self) -> String {
        let mut s = format!("{},top_ll,top_lt,det_l,det_t,ols\n", self.axis.name());
        for (v, c) in self.medians() {
            let _ = writeln!(s, "{v},{},{},{},{},{}", c.top_ll, c.top_lt, c.det_l, c.det_t, c.ols);
        }
        s
    }

    /// Line plot of median TOP_ll and TOP_lt (in points) against the axis value.
    pub fn to_svg(&self) -> String {
        let med = self.medians();
        let (w, h, pad) = (480.0, 300.0, 48.0);
        let ys: Vec<f64> = med
            .iter()
            .flat_map(|(_, s)| [s.top_ll * 100.0, s.top_lt * 100.0])
            .collect();
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1.0);
        let n = med.len().max(2) as f64;
        let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
        let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
            b = h - pad,
            r = w - pad
        );
        let _ = writeln!(
            s,
            r#"<text x="{pad}" y="{}" >{hi:.1}</text><text x="4" y="{}">{lo:.1}</text>"#,
            pad - 6.0,
            h - pad
        );
        for (i, (v, _)) in med.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{v}</text>"#,
                x(i),
                h - pad + 16.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            w / 2.0,
            h - 8.0,
            self.axis.name()
        );
        for (label, color, f) in [
            ("TOP_ll", "#1f77b4", (|s: &Scores| s.top_ll) as fn(&Scores) -> f64),
            ("TOP_lt", "#d62728", |s: &Scores| s.top_lt),
        ] {
            let pts: Vec<String> = med
                .iter()
                .enumerate()
                .map(|(i, (_, sc))| format!("{:.1},{:.1}", x(i), y(f(sc) * 100.0)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
            let ly = if label == "TOP_ll" { 16.0 } else { 30.0 };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly}" fill="{color}">median {label}</text>"#,
                w - pad - 90.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Directory name of a run: a digest of its configuration, so identical
/// cells in different sweeps share one run.
pub fn run_key(cfg: &RunConfig) -> String {
    let canonical = RunConfig {
        out: PathBuf::new(),
        ..cfg.clone()
    };
    hex::encode(&Sha256::digest(canonical.to_text().as_bytes())[..8])
}

/// Trains (or reuses) one run per axis value and seed under `out/runs/`, then
/// writes `{axis}.csv`, `{axis}_medians.csv` and, with `svg`, `{axis}.svg`
/// into `out`.
///
/// A run whose record already exists with an identical configuration is not
/// retrained, so an interrupted sweep resumes where it stopped.
pub fn ablate(base: &RunConfig, axis: Axis, seeds: &[u64], out: &Path, svg: bool) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for value in axis.values() {
        for &seed in seeds {
            let mut cfg = axis.arm(base, &value, seed)?;
            cfg.out = out.join("runs").join(run_key(&cfg));
            let record = match RunRecord::load(cfg.out.join(RECORD_FILE)) {
                // the output location is not part of a run's identity
                Ok(r)
                    if RunConfig {
                        out: cfg.out.clone(),
                        ..r.config.clone()
                    } == cfg =>
                {
                    log::info!("{}={value} seed {seed}: reusing {}", axis.name(), cfg.out.display());
                    r
                }
                _ => {
                    log::info!(
                        "{}={value} seed {seed}: training into {}",
                        axis.name(),
                        cfg.out.display()
                    );
                    train(&cfg)?
                }
            };
            rows.push(AblationRow {
                value: value.clone(),
                seed,
                scores: record.metrics.scores(),
            });
        }
    }
    let table = AblationTable { axis, rows };
    let write = |name: String, text: String| -> Result<()> {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(format!("{}.csv", axis.name()), table.to_csv())?;
    write(format!("{}_medians.csv", axis.name()), table.medians_csv())?;
    if svg {
        write(format!("{}.svg", axis.name()), table.to_svg())?;
    }
    Ok(table)
}
