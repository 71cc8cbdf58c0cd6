//! Scene JSON, schema v1:
//!
//! ```json
//! { "version": 1,
//!   "lanes":   [[[x, y, z], ...], ...],
//!   "traffic": [{"box": [x_min, y_min, x_max, y_max], "attr": 0}],
//!   "g_ll":    [[0, 1], [0, 0]],
//!   "g_lt":    [[1], [0]] }
//! ```
//!
//! Coordinates carry at most 9 significant digits, so `load(save(s)) == s`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SceneGraph, TrafficElement};
use crate::error::{Error, Result};
use crate::geometry::Polyline3D;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    version: u32,
    lanes: Vec<Polyline3D>,
    traffic: Vec<TrafficElement>,
    g_ll: Vec<Vec<u8>>,
    g_lt: Vec<Vec<u8>>,
}

pub fn save(scene: &SceneGraph) -> String {
    let doc = SceneDoc {
        version: SCHEMA_VERSION,
        lanes: scene.lanes.clone(),
        traffic: scene.traffic.clone(),
        g_ll: scene.g_ll.clone(),
        g_lt: scene.g_lt.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("scene serialization is infallible")
}

pub fn load(doc: &str) -> Result<SceneGraph> {
    let value: serde_json::Value = serde_json::from_str(doc).map_err(|e| Error::Parse {
        path: "$".into(),
        message: e.to_string(),
    })?;
    match value.get("version") {
        None => {
            return Err(Error::Parse {
                path: "version".into(),
                message: "missing field `version`".into(),
            })
        }
        Some(v) if v.as_u64() != Some(SCHEMA_VERSION as u64) => {
            return Err(Error::UnsupportedVersion {
                found: v.to_string(),
                expected: SCHEMA_VERSION.to_string(),
            })
        }
        Some(_) => {}
    }
    let doc: SceneDoc = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Parse {
            path,
            message: e.into_inner().to_string(),
        }
    })?;
    let scene = SceneGraph {
        lanes: doc.lanes,
        traffic: doc.traffic,
        g_ll: doc.g_ll,
        g_lt: doc.g_lt,
    };
    scene
        .validate()
        .map_err(|(path, message)| Error::Parse { path, message })?;
    Ok(scene)
}

pub fn save_file(scene: &SceneGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), save(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_file(path: impl AsRef<Path>) -> Result<SceneGraph> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    load(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate, GeneratorConfig, Template};

    #[test]
    fn round_trip_is_exact() {
        let c = GeneratorConfig {
            templates: vec![
                Template::Straight,
                Template::Fork,
                Template::Merge,
                Template::Intersection,
            ],
            lanes_min: 1,
            lanes_max: 20,
            noise_sigma: 0.2,
            traffic_min: 0,
            traffic_max: 5,
            ..GeneratorConfig::default()
        };
        for seed in 0..100 {
            let s = generate(&c, seed).unwrap();
            assert_eq!(load(&save(&s)).unwrap(), s, "seed {seed}");
        }
    }

    #[test]
    fn missing_key_names_path() {
        let s = generate(&GeneratorConfig::default(), 1).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&save(&s)).unwrap();
        v.as_object_mut().unwrap().remove("g_ll");
        let err = load(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("g_ll"), "{err}");
    }

    #[test]
    fn nested_schema_error_has_path() {
        let s = generate(&GeneratorConfig::default(), 1).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&save(&s)).unwrap();
        v["traffic"] = serde_json::json!([{"box": [0.1, 0.1, 0.2], "attr": 1}]);
        let err = load(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("traffic[0].box"), "{err}");
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let s = generate(&GeneratorConfig::default(), 1).unwrap();
        let text = save(&s).replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(load(&text), Err(Error::UnsupportedVersion { .. })));
    }

    #[test]
    fn invariant_violation_is_rejected() {
        let s = generate(&GeneratorConfig::default(), 3).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&save(&s)).unwrap();
        v["g_ll"][0][0] = serde_json::json!(1);
        let err = load(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("g_ll[0][0]"), "{err}");
    }
}
