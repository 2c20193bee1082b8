//! Experiment presets and the human-editable run configuration format.
//!
//! Configs are flat `key = value` text files; every run directory receives a
//! frozen copy of the exact configuration it ran with. CLI flags override
//! file values, and `parse(serialize(cfg)) == cfg` holds exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::geometry::{Manifold, SurfaceDensity};

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    UnknownPreset { got: String },
    BadValue { key: String, got: String },
    MissingKey { key: String },
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::UnknownPreset { got } => write!(
                f,
                "unknown preset '{got}'; valid presets: {}",
                PRESET_NAMES.join(", ")
            ),
            ConfigError::BadValue { key, got } => write!(f, "bad value '{got}' for key '{key}'"),
            ConfigError::MissingKey { key } => write!(f, "missing key '{key}'"),
        }
    }
}

impl std::error::Error for ConfigError {}

pub const PRESET_NAMES: [&str; 6] =
    ["deep_memo", "fast_memo", "std_small", "std_med", "rob_med", "gen"];

/// One hyperparameter preset row (unscaled values).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub n_train: usize,
    pub hidden: usize,
    pub layers: usize,
    pub weight_decay: f64,
    pub steps: usize,
    pub lr: f64,
    pub beta_max: f64,
    pub t_min: f64,
}

/// The six presets spanning strong memorization to generalization.
pub fn preset(name: &str) -> Result<Preset, ConfigError> {
    Ok(match name {
        "deep_memo" => Preset {
            name: "deep_memo",
            n_train: 50,
            hidden: 2048,
            layers: 8,
            weight_decay: 1e-8,
            steps: 20_000,
            lr: 1e-3,
            beta_max: 20.0,
            t_min: 1e-5,
        },
        "fast_memo" => Preset {
            name: "fast_memo",
            n_train: 100,
            hidden: 1024,
            layers: 6,
            weight_decay: 1e-8,
            steps: 20_000,
            lr: 1e-3,
            beta_max: 20.0,
            t_min: 1e-4,
        },
        "std_small" => Preset {
            name: "std_small",
            n_train: 100,
            hidden: 512,
            layers: 4,
            weight_decay: 1e-6,
            steps: 10_000,
            lr: 5e-4,
            beta_max: 10.0,
            t_min: 1e-4,
        },
        "std_med" => Preset {
            name: "std_med",
            n_train: 200,
            hidden: 512,
            layers: 4,
            weight_decay: 1e-6,
            steps: 10_000,
            lr: 2e-4,
            beta_max: 10.0,
            t_min: 1e-3,
        },
        "rob_med" => Preset {
            name: "rob_med",
            n_train: 200,
            hidden: 512,
            layers: 3,
            weight_decay: 1e-2,
            steps: 10_000,
            lr: 2e-4,
            beta_max: 5.0,
            t_min: 1e-3,
        },
        "gen" => Preset {
            name: "gen",
            n_train: 1000,
            hidden: 512,
            layers: 3,
            weight_decay: 1e-6,
            steps: 5_000,
            lr: 2e-4,
            beta_max: 5.0,
            t_min: 1e-3,
        },
        other => return Err(ConfigError::UnknownPreset { got: other.to_string() }),
    })
}

/// Manifold selector for config files.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum ManifoldSpec {
    Circle { radius: f64, ambient: usize },
    Sphere { k: usize, radius: f64, ambient: usize },
    Torus { r1: f64, r2: f64, ambient: usize },
    So { d: usize },
}

impl ManifoldSpec {
    pub fn build(&self) -> Manifold {
        match *self {
            ManifoldSpec::Circle { radius, ambient } => Manifold::circle(radius, ambient),
            ManifoldSpec::Sphere { k, radius, ambient } => Manifold::sphere(k, radius, ambient),
            ManifoldSpec::Torus { r1, r2, ambient } => Manifold::clifford_torus(r1, r2, ambient),
            ManifoldSpec::So { d } => Manifold::special_orthogonal(d),
        }
    }

    fn tag(&self) -> String {
        match self {
            ManifoldSpec::Circle { radius, ambient } => format!("circle:{radius}:{ambient}"),
            ManifoldSpec::Sphere { k, radius, ambient } => format!("sphere:{k}:{radius}:{ambient}"),
            ManifoldSpec::Torus { r1, r2, ambient } => format!("torus:{r1}:{r2}:{ambient}"),
            ManifoldSpec::So { d } => format!("so:{d}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || ConfigError::BadValue { key: "manifold".into(), got: s.to_string() };
        match parts.as_slice() {
            ["circle", r, d] => Ok(ManifoldSpec::Circle {
                radius: r.parse().map_err(|_| bad())?,
                ambient: d.parse().map_err(|_| bad())?,
            }),
            ["sphere", k, r, d] => Ok(ManifoldSpec::Sphere {
                k: k.parse().map_err(|_| bad())?,
                radius: r.parse().map_err(|_| bad())?,
                ambient: d.parse().map_err(|_| bad())?,
            }),
            ["torus", r1, r2, d] => Ok(ManifoldSpec::Torus {
                r1: r1.parse().map_err(|_| bad())?,
                r2: r2.parse().map_err(|_| bad())?,
                ambient: d.parse().map_err(|_| bad())?,
            }),
            ["so", d] => Ok(ManifoldSpec::So { d: d.parse().map_err(|_| bad())? }),
            _ => Err(bad()),
        }
    }
}

/// Data distribution selector.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum DataDist {
    Uniform,
    VonMises { kappa: f64, mean: f64 },
    ProjectedNormal { sigma: f64 },
}

impl DataDist {
    pub fn to_density(&self) -> SurfaceDensity {
        match *self {
            DataDist::Uniform => SurfaceDensity::Uniform,
            DataDist::VonMises { kappa, mean } => {
                SurfaceDensity::VonMises { kappa, mean_angle: mean }
            }
            DataDist::ProjectedNormal { sigma } => SurfaceDensity::ProjectedNormal { sigma },
        }
    }

    fn tag(&self) -> String {
        match self {
            DataDist::Uniform => "uniform".into(),
            DataDist::VonMises { kappa, mean } => format!("vonmises:{kappa}:{mean}"),
            DataDist::ProjectedNormal { sigma } => format!("projnormal:{sigma}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || ConfigError::BadValue { key: "data".into(), got: s.to_string() };
        match parts.as_slice() {
            ["uniform"] => Ok(DataDist::Uniform),
            ["vonmises", k, m] => Ok(DataDist::VonMises {
                kappa: k.parse().map_err(|_| bad())?,
                mean: m.parse().map_err(|_| bad())?,
            }),
            ["projnormal", s] => {
                Ok(DataDist::ProjectedNormal { sigma: s.parse().map_err(|_| bad())? })
            }
            _ => Err(bad()),
        }
    }
}

/// A full training-run configuration: preset plus desk-scale knobs.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunConfig {
    pub preset: String,
    pub scale: f64,
    pub seed: u64,
    pub manifold: ManifoldSpec,
    pub data: DataDist,
    /// Batch size; scaled quadratically with `scale` by default so per-step
    /// compute tracks the hidden-width reduction.
    pub batch: usize,
    pub eval_interval: usize,
    /// Langevin sample count for intermediate trace rows.
    pub eval_points: usize,
    /// Langevin sample count for the final metrics row.
    pub final_eval_points: usize,
    pub beta_min: f64,
}

impl RunConfig {
    pub fn for_preset(name: &str, scale: f64, seed: u64) -> Result<Self, ConfigError> {
        preset(name)?;
        Ok(Self {
            preset: name.to_string(),
            scale,
            seed,
            manifold: ManifoldSpec::So { d: 3 },
            data: DataDist::Uniform,
            batch: ((512.0 * scale * scale).round() as usize).max(16),
            eval_interval: 50,
            eval_points: 64,
            final_eval_points: 256,
            beta_min: 0.1,
        })
    }

    /// Scaled preset values: steps, hidden and n_train scale uniformly.
    pub fn scaled(&self) -> Result<ScaledPreset, ConfigError> {
        let p = preset(&self.preset)?;
        let s = self.scale;
        Ok(ScaledPreset {
            base: p,
            n_train: ((p.n_train as f64 * s).round() as usize).max(2),
            hidden: ((p.hidden as f64 * s).round() as usize).max(8),
            steps: (p.steps as f64 * s).round() as usize,
        })
    }

    /// Serialize as `key = value` lines (sorted keys).
    pub fn serialize(&self) -> String {
        let mut kv = BTreeMap::new();
        kv.insert("preset", self.preset.clone());
        kv.insert("scale", fmt_f64(self.scale));
        kv.insert("seed", self.seed.to_string());
        kv.insert("manifold", self.manifold.tag());
        kv.insert("data", self.data.tag());
        kv.insert("batch", self.batch.to_string());
        kv.insert("eval_interval", self.eval_interval.to_string());
        kv.insert("eval_points", self.eval_points.to_string());
        kv.insert("final_eval_points", self.final_eval_points.to_string());
        kv.insert("beta_min", fmt_f64(self.beta_min));
        let mut out = String::new();
        for (k, v) in kv {
            writeln!(out, "{k} = {v}").expect("write to string");
        }
        out
    }

    /// Parse a `key = value` config; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::BadValue {
                key: "<line>".into(),
                got: line.to_string(),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| {
            kv.get(key).cloned().ok_or(ConfigError::MissingKey { key: key.to_string() })
        };
        let parse_num = |key: &str, v: &str| -> Result<f64, ConfigError> {
            v.parse().map_err(|_| ConfigError::BadValue { key: key.into(), got: v.into() })
        };
        let preset_name = get("preset")?;
        preset(&preset_name)?;
        Ok(Self {
            preset: preset_name,
            scale: parse_num("scale", &get("scale")?)?,
            seed: get("seed")?.parse().map_err(|_| ConfigError::BadValue {
                key: "seed".into(),
                got: get("seed").unwrap_or_default(),
            })?,
            manifold: ManifoldSpec::parse(&get("manifold")?)?,
            data: DataDist::parse(&get("data")?)?,
            batch: parse_num("batch", &get("batch")?)? as usize,
            eval_interval: parse_num("eval_interval", &get("eval_interval")?)? as usize,
            eval_points: parse_num("eval_points", &get("eval_points")?)? as usize,
            final_eval_points: parse_num("final_eval_points", &get("final_eval_points")?)? as usize,
            beta_min: parse_num("beta_min", &get("beta_min")?)?,
        })
    }
}

fn fmt_f64(v: f64) -> String {
    // round-trippable float formatting
    let s = format!("{v}");
    if s.parse::<f64>() == Ok(v) {
        s
    } else {
        format!("{v:e}")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScaledPreset {
    pub base: Preset,
    pub n_train: usize,
    pub hidden: usize,
    pub steps: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values_are_exact() {
        let p = preset("deep_memo").unwrap();
        assert_eq!(
            (p.n_train, p.hidden, p.layers, p.steps),
            (50, 2048, 8, 20_000)
        );
        assert_eq!((p.weight_decay, p.lr, p.beta_max, p.t_min), (1e-8, 1e-3, 20.0, 1e-5));
        let g = preset("gen").unwrap();
        assert_eq!(
            (g.n_train, g.hidden, g.layers, g.steps),
            (1000, 512, 3, 5_000)
        );
        assert_eq!((g.weight_decay, g.lr, g.beta_max, g.t_min), (1e-6, 2e-4, 5.0, 1e-3));
        let r = preset("rob_med").unwrap();
        assert_eq!((r.hidden, r.layers, r.weight_decay), (512, 3, 1e-2));
        let f = preset("fast_memo").unwrap();
        assert_eq!((f.n_train, f.hidden, f.layers, f.t_min), (100, 1024, 6, 1e-4));
        let s1 = preset("std_small").unwrap();
        assert_eq!((s1.n_train, s1.lr, s1.beta_max), (100, 5e-4, 10.0));
        let s2 = preset("std_med").unwrap();
        assert_eq!((s2.n_train, s2.lr, s2.t_min), (200, 2e-4, 1e-3));
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let err = preset("bogus").unwrap_err();
        let msg = format!("{err}");
        for name in PRESET_NAMES {
            assert!(msg.contains(name));
        }
    }

    #[test]
    fn scale_factor_multiplies_uniformly() {
        let cfg = RunConfig::for_preset("deep_memo", 0.25, 7).unwrap();
        let s = cfg.scaled().unwrap();
        assert_eq!(s.hidden, 512);
        assert_eq!(s.steps, 5_000);
        assert_eq!(s.n_train, 13); // round(12.5)
        assert_eq!(cfg.batch, 32); // 512 * 0.25^2
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = RunConfig::for_preset("rob_med", 0.1, 99).unwrap();
        cfg.manifold = ManifoldSpec::Circle { radius: 1.5, ambient: 3 };
        cfg.data = DataDist::VonMises { kappa: 2.0, mean: 0.25 };
        cfg.batch = 17;
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        // comments and blank lines are tolerated
        let noisy = format!("# run config\n\n{text}\n# end\n");
        assert_eq!(RunConfig::parse(&noisy).unwrap(), cfg);
    }
}
