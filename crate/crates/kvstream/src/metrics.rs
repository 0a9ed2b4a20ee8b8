//! Brute-force oracles and evaluation metrics: oracle answer-token
//! retrieval over the full uncompressed stream, retention ratio, exact
//! page relevance, recall@k, and bucket coverage.
//!
//! Oracles only ever read the full trace; they never look at compressed
//! state. Pooling mirrors the engine (mean over query rows, then heads)
//! so comparisons are apples-to-apples.

use crate::cache::LayerCache;
use crate::engine_types::QueryInput;
use crate::par::{build_page_index, PageIndex};
use crate::tensor::{attention_scores, rope_remove, ModelShape, TensorError};
use crate::trace::Trace;
use crate::vsb::bucket_of;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("KTooLarge: k ({k}) exceeds total tokens ({total})")]
    KTooLarge { k: usize, total: usize },
    #[error("KZero")]
    KZero,
    #[error("EmptyAnswerSet")]
    EmptyAnswerSet,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Full attention of the question queries over every stream token's
/// de-roped key, pooled over query rows and heads; top-k token ids per
/// layer. Runs offline over the whole trace.
pub fn oracle_answer_tokens(
    trace: &Trace,
    query: &QueryInput,
    k: usize,
    scale: bool,
) -> Result<Vec<Vec<u64>>, MetricsError> {
    let total = trace.total_tokens();
    if k > total {
        return Err(MetricsError::KTooLarge { k, total });
    }
    let shape = &trace.shape;
    let positions = trace.all_positions();
    let mut per_layer = Vec::with_capacity(shape.num_layers);
    for layer in 0..shape.num_layers {
        let mut pooled = vec![0.0f64; total];
        let mut denom = 0usize;
        for head in 0..shape.num_heads {
            let roped = trace.full_keys(layer, head);
            let keys = rope_remove(&roped, &positions, shape.rope_theta)?;
            let queries = &query.layers[layer][head];
            let w = attention_scores(queries, &keys, scale)?;
            for qi in 0..w.rows {
                for (acc, &x) in pooled.iter_mut().zip(w.row(qi)) {
                    *acc += x as f64;
                }
                denom += 1;
            }
        }
        let _ = denom; // pooling denominator does not affect top-k order
        let mut order: Vec<usize> = (0..total).collect();
        order.sort_by(|&a, &b| pooled[b].partial_cmp(&pooled[a]).unwrap().then(a.cmp(&b)));
        let mut ids: Vec<u64> = order.into_iter().take(k).map(|i| positions[i]).collect();
        ids.sort_unstable();
        per_layer.push(ids);
    }
    Ok(per_layer)
}

/// `|retained ∩ answers| / |answers|`.
pub fn retention_ratio(retained: &BTreeSet<u64>, answers: &BTreeSet<u64>) -> Result<f64, MetricsError> {
    if answers.is_empty() {
        return Err(MetricsError::EmptyAnswerSet);
    }
    let hit = answers.intersection(retained).count();
    Ok(hit as f64 / answers.len() as f64)
}

/// Exact page relevance: pooled attention of the query over the cache's
/// stored (roped) keys at their true positions, summed within each page.
/// The ground-truth target that mean-key scoring approximates.
pub fn oracle_page_scores(
    query: &QueryInput,
    cache: &LayerCache,
    layer: usize,
    c: usize,
    shape: &ModelShape,
    scale: bool,
) -> Result<Vec<f64>, MetricsError> {
    let index: PageIndex = build_page_index(cache, c, shape, true).map_err(|e| match e {
        crate::par::ParError::Tensor(t) => MetricsError::Tensor(t),
        crate::par::ParError::Cache(_) => MetricsError::EmptyAnswerSet,
    })?;
    let l = cache.len();
    let mut pooled = vec![0.0f64; l];
    let mut denom = 0usize;
    for head in 0..shape.num_heads {
        let keys = cache.keys_for_head(head, shape);
        let queries = &query.layers[layer][head];
        let w = attention_scores(queries, &keys, scale)?;
        for qi in 0..w.rows {
            for (acc, &x) in pooled.iter_mut().zip(w.row(qi)) {
                *acc += x as f64;
            }
            denom += 1;
        }
    }
    let mut page_scores = Vec::with_capacity(index.num_pages());
    for page in &index.pages {
        let s: f64 = page.token_indices().map(|i| pooled[i]).sum();
        page_scores.push(s / denom as f64);
    }
    Ok(page_scores)
}

/// Top-k page ids from a score vector, ties to the earlier page.
pub fn top_k_pages(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// `|approx ∩ oracle| / k` for equally sized top-k sets.
pub fn recall_at_k(approx_topk: &[usize], oracle_topk: &[usize]) -> Result<f64, MetricsError> {
    assert_eq!(approx_topk.len(), oracle_topk.len(), "recall requires equal k");
    let k = oracle_topk.len();
    if k == 0 {
        return Err(MetricsError::KZero);
    }
    let oracle: BTreeSet<usize> = oracle_topk.iter().copied().collect();
    let hit = approx_topk.iter().filter(|i| oracle.contains(i)).count();
    Ok(hit as f64 / k as f64)
}

/// Number of distinct buckets touched by the retained cache indices.
pub fn coverage(retained: &[usize], l: usize, n: usize) -> usize {
    retained
        .iter()
        .map(|&i| bucket_of(i, l, n))
        .collect::<BTreeSet<usize>>()
        .len()
}
