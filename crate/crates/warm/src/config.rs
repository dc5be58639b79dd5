//! Experiment configuration files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use warm_core::episode::GeneratorConfig;
use warm_core::trainer::TrainConfig;
use warm_core::warm::Variant;

use crate::error::{AppError, AppResult};

/// Prototype generator under evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Trained attention module of the given variant.
    Learned(Variant),
    /// Farthest point sampling with nearest-prototype labelling.
    FpsMinDist,
}

impl Method {
    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Learned(v) => Some(v),
            Method::FpsMinDist => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Learned(v) if *v == Variant::WARM => f.write_str("warm"),
            Method::Learned(v) if *v == Variant::NAIVE => f.write_str("naive"),
            Method::Learned(v) => write!(f, "ablation:{}", v.name().replace('+', ",")),
            Method::FpsMinDist => f.write_str("fps-min-dist"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "warm" => Ok(Method::Learned(Variant::WARM)),
            "naive" => Ok(Method::Learned(Variant::NAIVE)),
            "fps-min-dist" => Ok(Method::FpsMinDist),
            _ => {
                let spec = s
                    .strip_prefix("ablation:")
                    .ok_or_else(|| format!("unknown method `{s}` (expected warm, naive, fps-min-dist or ablation:<mode>[,restore])"))?;
                Variant::parse(&spec.replace(',', "+"))
                    .map(Method::Learned)
                    .ok_or_else(|| format!("unknown ablation variant `{spec}`"))
            }
        }
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub method: Method,
    pub out_dir: PathBuf,
    /// Training seeds for ablations and token sweeps, FPS seeds for the sweep.
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// FPS samples per class and support cloud.
    pub fps_samples: usize,
    pub token_counts: Vec<usize>,
    /// Fill `wall_ms` in training logs; off keeps logs byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            method: Method::Learned(Variant::WARM),
            out_dir: PathBuf::from("out"),
            seeds: (0..5).collect(),
            eval_episodes: 100,
            eval_seed: 0,
            fps_samples: 100,
            token_counts: vec![1, 10, 50, 100],
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> AppResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| AppError::config(path, e.to_string()))?;
        cfg.validate().map_err(|m| AppError::config(path, m))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.generator.validate().map_err(|e| format!("generator: {e}"))?;
        self.train.validate().map_err(|e| format!("train: {e}"))?;
        if self.generator.n_way != self.train.n_way || self.generator.k_shot != self.train.k_shot {
            return Err("generator and train must agree on n_way and k_shot".into());
        }
        if self.eval_episodes == 0 || self.fps_samples == 0 {
            return Err("eval_episodes and fps_samples must be positive".into());
        }
        if self.token_counts.contains(&0) {
            return Err("token counts must be positive".into());
        }
        Ok(())
    }
}
