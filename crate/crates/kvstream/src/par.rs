//! Position-agnostic page retrieval over a compressed cache.
//!
//! The cache is partitioned into contiguous pages of `C` tokens. Each
//! page is represented by the mean of its de-roped keys, so page
//! similarity reflects semantics rather than the discontinuous positions
//! left behind by eviction. Question queries score all mean keys with one
//! small attention pass; the top pages plus a sliding window of recent
//! tokens form the response context. Retrieved keys keep their stored
//! roped form, which is exactly the re-roped result since de-roping is
//! the exact inverse rotation.

use crate::cache::{CacheError, LayerCache};
use crate::tensor::{
    attention_flops, attention_scores, rope_remove, HeadMatrix, ModelShape, TensorError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParError {
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub retrieval_ratio: f64,
    pub sliding_window_tokens: usize,
    pub page_size_c: usize,
    /// Score pages with the stored roped mean keys instead of de-roped
    /// ones (ablation path).
    #[serde(default)]
    pub roped_mean_keys: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            retrieval_ratio: 0.4,
            sliding_window_tokens: 196,
            page_size_c: 16,
            roped_mean_keys: false,
        }
    }
}

/// One contiguous page of cache tokens with its representative mean key
/// per head (head-major, `num_heads * head_dim` scalars).
#[derive(Debug, Clone, PartialEq)]
pub struct Page {
    pub page_id: usize,
    /// Cache index range `[start, start + len)`.
    pub start: usize,
    pub len: usize,
    pub mean_key: Vec<f32>,
    pub first_position: u64,
    pub last_position: u64,
}

impl Page {
    pub fn token_indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageIndex {
    pub pages: Vec<Page>,
    pub page_size_c: usize,
}

impl PageIndex {
    pub fn num_pages(&self) -> usize {
        self.pages.len()
    }
}

/// Partition the cache into `ceil(L/C)` pages; each mean key is the
/// per-head mean of `rope_remove(key, stream_position)` over the page's
/// tokens (or of the stored roped keys when `roped_mean_keys` is set).
pub fn build_page_index(
    cache: &LayerCache,
    c: usize,
    shape: &ModelShape,
    roped_mean_keys: bool,
) -> Result<PageIndex, ParError> {
    assert!(c >= 1, "page size must be >= 1");
    if cache.is_empty() {
        return Err(ParError::Cache(CacheError::EmptyCache));
    }
    let l = cache.len();
    let d = shape.head_dim;
    let width = shape.token_width();
    let positions = cache.positions();

    // De-rope all keys once, per head.
    let mut dekeys: Vec<HeadMatrix> = Vec::with_capacity(shape.num_heads);
    for h in 0..shape.num_heads {
        let roped = cache.keys_for_head(h, shape);
        let keys = if roped_mean_keys {
            roped
        } else {
            rope_remove(&roped, &positions, shape.rope_theta)?
        };
        dekeys.push(keys);
    }

    let mut pages = Vec::with_capacity(l.div_ceil(c));
    let mut start = 0usize;
    while start < l {
        let len = c.min(l - start);
        let mut mean_key = vec![0.0f32; width];
        for h in 0..shape.num_heads {
            for t in start..start + len {
                let row = dekeys[h].row(t);
                for j in 0..d {
                    mean_key[h * d + j] += row[j] / len as f32;
                }
            }
        }
        pages.push(Page {
            page_id: pages.len(),
            start,
            len,
            mean_key,
            first_position: positions[start],
            last_position: positions[start + len - 1],
        });
        start += len;
    }
    Ok(PageIndex { pages, page_size_c: c })
}

/// One relevance score per page: attention of the question queries over
/// the stacked mean keys, mean-pooled over query rows and heads. Scores
/// sum to 1. Also returns the MAC count spent.
pub fn score_pages(
    question_queries: &[HeadMatrix],
    index: &PageIndex,
    shape: &ModelShape,
    scale: bool,
) -> Result<(Vec<f32>, u64), ParError> {
    assert!(!question_queries.is_empty() && question_queries[0].rows > 0);
    let d = shape.head_dim;
    let num_pages = index.num_pages();
    let mut pooled = vec![0.0f64; num_pages];
    let mut flops = 0u64;
    for (h, queries) in question_queries.iter().enumerate() {
        if queries.dim != d {
            return Err(ParError::Tensor(TensorError::ShapeMismatch(format!(
                "query dim {} != head dim {}",
                queries.dim, d
            ))));
        }
        let mut data = Vec::with_capacity(num_pages * d);
        for page in &index.pages {
            data.extend_from_slice(&page.mean_key[h * d..(h + 1) * d]);
        }
        let mean_keys = HeadMatrix::new(num_pages, d, data);
        let w = attention_scores(queries, &mean_keys, scale)?;
        flops += attention_flops(queries.rows, num_pages, d);
        for qi in 0..w.rows {
            for (acc, &x) in pooled.iter_mut().zip(w.row(qi)) {
                *acc += x as f64;
            }
        }
    }
    let denom = (question_queries.len() * question_queries[0].rows) as f64;
    Ok((pooled.iter().map(|&x| (x / denom) as f32).collect(), flops))
}

/// Number of pages retrieved at a given ratio: `max(1, floor(ratio * P))`.
pub fn pages_to_retrieve(num_pages: usize, ratio: f64) -> usize {
    ((ratio * num_pages as f64).floor() as usize).clamp(1, num_pages)
}

/// Top pages by score (ties to the earlier page), re-sorted ascending by
/// page id for temporal assembly.
pub fn retrieve(index: &PageIndex, scores: &[f32], ratio: f64) -> Vec<Page> {
    assert_eq!(scores.len(), index.num_pages());
    let k = pages_to_retrieve(index.num_pages(), ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut selected: Vec<usize> = order.into_iter().take(k).collect();
    selected.sort_unstable();
    selected.into_iter().map(|i| index.pages[i].clone()).collect()
}

/// Cache indices forming the response context: union of selected-page
/// tokens and the last `window` tokens, deduplicated, ascending by
/// stream position.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseContext {
    pub cache_indices: Vec<usize>,
}

impl ResponseContext {
    pub fn len(&self) -> usize {
        self.cache_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache_indices.is_empty()
    }

    pub fn positions(&self, cache: &LayerCache) -> Vec<u64> {
        self.cache_indices.iter().map(|&i| cache.record(i).stream_position).collect()
    }
}

pub fn assemble_context(
    selected: &[Page],
    cache: &LayerCache,
    window: usize,
) -> ResponseContext {
    let l = cache.len();
    let mut keep = vec![false; l];
    for page in selected {
        for i in page.token_indices() {
            keep[i] = true;
        }
    }
    for i in l.saturating_sub(window)..l {
        keep[i] = true;
    }
    // Cache order is stream-position order, so this is already sorted.
    let cache_indices = (0..l).filter(|&i| keep[i]).collect();
    ResponseContext { cache_indices }
}
