//! Shared input types for streamed chunks and question queries.

use crate::tensor::{HeadMatrix, ModelShape};

/// One layer's Q/K/V for a chunk of `n` tokens, flattened row-major with
/// head-major token layout (`n x (num_heads * head_dim)`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerChunk {
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// Per-layer Q/K/V matrices for `n` new stream tokens plus their
/// positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkInput {
    pub positions: Vec<u64>,
    pub layers: Vec<LayerChunk>,
}

impl ChunkInput {
    pub fn num_tokens(&self) -> usize {
        self.positions.len()
    }

    /// Extract one head's rows from a flattened per-layer tensor.
    pub fn head_matrix(flat: &[f32], n: usize, head: usize, shape: &ModelShape) -> HeadMatrix {
        let d = shape.head_dim;
        let width = shape.token_width();
        let mut data = Vec::with_capacity(n * d);
        for t in 0..n {
            let row = &flat[t * width + head * d..t * width + (head + 1) * d];
            data.extend_from_slice(row);
        }
        HeadMatrix::new(n, d, data)
    }
}

/// Per-layer per-head question query tensors (`t` rows each).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryInput {
    pub layers: Vec<Vec<HeadMatrix>>,
}

impl QueryInput {
    /// Broadcast one raw head-major query row to every layer.
    pub fn broadcast(row: &[f32], shape: &ModelShape) -> Self {
        let d = shape.head_dim;
        let heads: Vec<HeadMatrix> = (0..shape.num_heads)
            .map(|h| HeadMatrix::new(1, d, row[h * d..(h + 1) * d].to_vec()))
            .collect();
        Self { layers: vec![heads; shape.num_layers] }
    }

    pub fn num_rows(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, |m| m.rows)
    }
}
