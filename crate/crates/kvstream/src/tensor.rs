//! Minimal dense math kernel shared by every other module: row softmax,
//! scaled dot-product attention scores, rotary position embedding (apply
//! and exact inverse), and cosine similarity.
//!
//! Everything here is pure and operates on plain `f32` buffers; no GPU,
//! no fused kernels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("NonFiniteInput: matrix contains NaN or infinity")]
    NonFiniteInput,
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("OddHeadDim: head dimension {0} must be even for rotary pairing")]
    OddHeadDim(usize),
}

/// Static shape of the (hypothetical) model a stream was exported from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
}

fn default_rope_theta() -> f32 {
    10_000.0
}

impl ModelShape {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.head_dim % 2 != 0 {
            return Err(TensorError::OddHeadDim(self.head_dim));
        }
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(TensorError::ShapeMismatch(
                "all shape counts must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Scalars per token for one tensor (key or value) across all heads.
    pub fn token_width(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// Row-major dense matrix of `rows x dim` f32 entries for a single head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl HeadMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * dim, "data length must equal rows * dim");
        Self { rows, dim, data }
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { rows, dim, data: vec![0.0; rows * dim] }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Numerically stabilized softmax applied independently to each row.
pub fn softmax_rows(logits: &HeadMatrix) -> Result<HeadMatrix, TensorError> {
    if !logits.is_finite() {
        return Err(TensorError::NonFiniteInput);
    }
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(out)
}

/// `softmax(Q . K^T)`, optionally scaled by `1/sqrt(d)` before the softmax.
///
/// Returns a `queries.rows x keys.rows` matrix whose rows each sum to 1.
pub fn attention_scores(
    queries: &HeadMatrix,
    keys: &HeadMatrix,
    scale: bool,
) -> Result<HeadMatrix, TensorError> {
    if queries.dim != keys.dim {
        return Err(TensorError::ShapeMismatch(format!(
            "query dim {} != key dim {}",
            queries.dim, keys.dim
        )));
    }
    let inv_sqrt_d = 1.0 / (queries.dim as f32).sqrt();
    let mut logits = HeadMatrix::zeros(queries.rows, keys.rows);
    for qi in 0..queries.rows {
        let q = queries.row(qi);
        let out = logits.row_mut(qi);
        for ki in 0..keys.rows {
            let k = keys.row(ki);
            let mut dot = 0.0f32;
            for j in 0..q.len() {
                dot += q[j] * k[j];
            }
            out[ki] = if scale { dot * inv_sqrt_d } else { dot };
        }
    }
    softmax_rows(&logits)
}

/// Multiply-accumulate count of `attention_scores` for the given shapes.
/// Used by the engine's cost accounting.
pub fn attention_flops(query_rows: usize, key_rows: usize, dim: usize) -> u64 {
    query_rows as u64 * key_rows as u64 * dim as u64
}

fn rope_rotate(
    keys: &HeadMatrix,
    positions: &[u64],
    theta: f32,
    inverse: bool,
) -> Result<HeadMatrix, TensorError> {
    if keys.dim % 2 != 0 {
        return Err(TensorError::OddHeadDim(keys.dim));
    }
    if positions.len() != keys.rows {
        return Err(TensorError::ShapeMismatch(format!(
            "{} positions for {} rows",
            positions.len(),
            keys.rows
        )));
    }
    let half = keys.dim / 2;
    // Per-pair frequencies theta^(-2i/d), i in [0, d/2).
    let freqs: Vec<f64> = (0..half)
        .map(|i| (theta as f64).powf(-2.0 * i as f64 / keys.dim as f64))
        .collect();
    let mut out = keys.clone();
    for r in 0..out.rows {
        let pos = positions[r] as f64;
        let row = out.row_mut(r);
        for i in 0..half {
            let mut angle = pos * freqs[i];
            if inverse {
                angle = -angle;
            }
            let (sin, cos) = angle.sin_cos();
            let (sin, cos) = (sin as f32, cos as f32);
            // rotate-half pairing: (i, i + d/2)
            let a = row[i];
            let b = row[i + half];
            row[i] = a * cos - b * sin;
            row[i + half] = a * sin + b * cos;
        }
    }
    Ok(out)
}

/// Rotate each key row by its position using the rotate-half rotary
/// convention. Norm-preserving.
pub fn rope_apply(
    keys: &HeadMatrix,
    positions: &[u64],
    theta: f32,
) -> Result<HeadMatrix, TensorError> {
    rope_rotate(keys, positions, theta, false)
}

/// Exact inverse of [`rope_apply`]: `rope_remove(rope_apply(k, p), p) = k`.
pub fn rope_remove(
    keys: &HeadMatrix,
    positions: &[u64],
    theta: f32,
) -> Result<HeadMatrix, TensorError> {
    rope_rotate(keys, positions, theta, true)
}

/// `a . b / (|a| |b|)`; 0.0 when either vector is all-zero.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32, TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "vector lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += (a[i] as f64).powi(2);
        nb += (b[i] as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())) as f32)
}
