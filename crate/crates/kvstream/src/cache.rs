//! Per-layer ordered store of cached token key/value records.
//!
//! Records keep their original stream positions (used for rotary math even
//! after eviction makes positions discontinuous) and the last pooled
//! importance score. Eviction is uniform across heads: one retained index
//! set per layer keeps the cache rectangular.

use crate::tensor::{HeadMatrix, ModelShape};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("PositionOrderViolation: position {new} does not increase past {max}")]
    PositionOrderViolation { new: u64, max: u64 },
    #[error("IndexOutOfRange: index {index} >= cache length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("EmptyCache")]
    EmptyCache,
}

/// One cached token. Keys and values are stored head-major
/// (`num_heads * head_dim` scalars), keys in roped form as a model emits
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    pub stream_position: u64,
    pub score: f32,
}

impl TokenRecord {
    pub fn new(key: Vec<f32>, value: Vec<f32>, stream_position: u64) -> Self {
        Self { key, value, stream_position, score: 0.0 }
    }

    /// Slice of this token's key for one head.
    pub fn key_head(&self, head: usize, head_dim: usize) -> &[f32] {
        &self.key[head * head_dim..(head + 1) * head_dim]
    }
}

/// Ordered token records for one layer under budget `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    records: Vec<TokenRecord>,
    pub budget_m: usize,
}

impl LayerCache {
    pub fn new(budget_m: usize) -> Self {
        Self { records: Vec::new(), budget_m }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TokenRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &TokenRecord {
        &self.records[index]
    }

    pub fn max_position(&self) -> Option<u64> {
        self.records.last().map(|r| r.stream_position)
    }

    /// Append new records. Positions must strictly continue the stream;
    /// length may exceed the budget until the next compression round.
    pub fn append_tokens(&mut self, new: Vec<TokenRecord>) -> Result<(), CacheError> {
        let mut max = self.max_position();
        for rec in &new {
            if let Some(m) = max {
                if rec.stream_position <= m {
                    return Err(CacheError::PositionOrderViolation {
                        new: rec.stream_position,
                        max: m,
                    });
                }
            }
            max = Some(rec.stream_position);
        }
        self.records.extend(new);
        debug_assert!(self.positions_strictly_increasing());
        Ok(())
    }

    /// Keep only the records at the given indices; survivors stay in
    /// original position order. Discarded records are gone for good.
    pub fn retain_indices(&mut self, keep: &[usize]) -> Result<(), CacheError> {
        let len = self.records.len();
        for &i in keep {
            if i >= len {
                return Err(CacheError::IndexOutOfRange { index: i, len });
            }
        }
        let mut sorted: Vec<usize> = keep.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut kept = Vec::with_capacity(sorted.len());
        for &i in &sorted {
            kept.push(self.records[i].clone());
        }
        self.records = kept;
        debug_assert!(self.positions_strictly_increasing());
        Ok(())
    }

    pub fn set_scores(&mut self, scores: &[f32]) {
        debug_assert_eq!(scores.len(), self.records.len());
        for (rec, &s) in self.records.iter_mut().zip(scores) {
            rec.score = s;
        }
    }

    /// All stream positions in cache order.
    pub fn positions(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.stream_position).collect()
    }

    /// Stack one head's keys into an `L x d` matrix in cache order.
    pub fn keys_for_head(&self, head: usize, shape: &ModelShape) -> HeadMatrix {
        let d = shape.head_dim;
        let mut data = Vec::with_capacity(self.records.len() * d);
        for rec in &self.records {
            data.extend_from_slice(rec.key_head(head, d));
        }
        HeadMatrix::new(self.records.len(), d, data)
    }

    fn positions_strictly_increasing(&self) -> bool {
        self.records.windows(2).all(|w| w[0].stream_position < w[1].stream_position)
    }
}
