//! JSON checkpoints of trained parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use warm_core::warm::{Variant, WarmParams};
use warm_core::Matrix;

use crate::error::{AppError, AppResult};
use crate::sidecar::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "M")]
    pub tokens_per_class: usize,
    pub n_way: usize,
    pub seed: u64,
    pub variant: Variant,
    pub scale_logits: bool,
    #[serde(rename = "P_0")]
    pub tokens: Vec<Vec<f64>>,
    #[serde(rename = "W_q")]
    pub wq: Vec<Vec<f64>>,
    #[serde(rename = "W_k")]
    pub wk: Vec<Vec<f64>>,
    #[serde(rename = "W_v")]
    pub wv: Vec<Vec<f64>>,
    /// Query, key and value biases when the projections carry them.
    pub biases: Option<[Vec<f64>; 3]>,
    pub config_sha256: String,
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

fn matrix(name: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<Matrix, String> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(format!("{name} must be {}x{}", shape.0, shape.1));
    }
    Matrix::from_vec(shape.0, shape.1, rows.concat()).map_err(|e| format!("{name}: {e}"))
}

impl Checkpoint {
    pub fn new(params: &WarmParams, variant: Variant, seed: u64, config_sha256: String) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            dim: params.dim(),
            tokens_per_class: params.tokens_per_class,
            n_way: params.n_way(),
            seed,
            variant,
            scale_logits: params.scale_logits,
            tokens: rows(&params.tokens),
            wq: rows(&params.wq),
            wk: rows(&params.wk),
            wv: rows(&params.wv),
            biases: params.biases.clone(),
            config_sha256,
        }
    }

    pub fn params(&self) -> Result<WarmParams, String> {
        if self.version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {}", self.version));
        }
        let (d, m) = (self.dim, self.tokens_per_class);
        let pools = self.n_way + 1;
        let p = WarmParams {
            tokens: matrix("P_0", &self.tokens, (m * pools, d))?,
            wq: matrix("W_q", &self.wq, (d, d))?,
            wk: matrix("W_k", &self.wk, (d, d))?,
            wv: matrix("W_v", &self.wv, (d, d))?,
            biases: self.biases.clone(),
            tokens_per_class: m,
            scale_logits: self.scale_logits,
        };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        let mut text = serde_json::to_string(self).expect("checkpoints always serialize");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AppError::checkpoint(path, e.to_string()))
    }

    /// Loads parameters, insisting on feature dimension `dim`.
    pub fn load_params(path: &Path, dim: usize) -> AppResult<(Self, WarmParams)> {
        let ck = Self::load(path)?;
        if ck.dim != dim {
            return Err(AppError::checkpoint(path, format!("checkpoint has D={}, episodes have D={dim}", ck.dim)));
        }
        let p = ck.params().map_err(|m| AppError::checkpoint(path, m))?;
        Ok((ck, p))
    }
}
