//! Sink-aware bucketed cache compression.
//!
//! Importance comes from an observation window: the attention of the last
//! `r` token queries against all cached keys, mean-pooled over window rows
//! and heads. Selection then runs in two phases over `N` equal-width
//! buckets of capacity `B` (with `N * B = M`): phase 1 retains the top
//! `round(R * M)` tokens unconditionally, phase 2 walks the rest in
//! descending score order and retains a token only while its bucket has
//! room, stopping at `M`. The plain score-only top-M selector is kept as
//! the baseline.

use crate::cache::LayerCache;
use crate::tensor::{attention_flops, attention_scores, HeadMatrix, ModelShape, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VsbError {
    #[error("ConfigInconsistent: N ({n}) x B ({b}) must equal M ({m})")]
    ConfigInconsistent { n: usize, b: usize, m: usize },
    #[error("WindowTooLarge: window rows {r} exceed cache length {l}")]
    WindowTooLarge { r: usize, l: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VsbConfig {
    pub budget_m: usize,
    pub num_buckets_n: usize,
    pub bucket_capacity_b: usize,
    pub window_r: usize,
    pub phase1_ratio_r: f64,
    /// Apply 1/sqrt(d) before the softmax when scoring (default on).
    #[serde(default = "default_true")]
    pub scale_scores: bool,
}

fn default_true() -> bool {
    true
}

impl Default for VsbConfig {
    fn default() -> Self {
        Self {
            budget_m: 12_000,
            num_buckets_n: 12_000,
            bucket_capacity_b: 1,
            window_r: 64,
            phase1_ratio_r: 0.5,
            scale_scores: true,
        }
    }
}

impl VsbConfig {
    pub fn validate(&self) -> Result<(), VsbError> {
        if self.num_buckets_n * self.bucket_capacity_b != self.budget_m {
            return Err(VsbError::ConfigInconsistent {
                n: self.num_buckets_n,
                b: self.bucket_capacity_b,
                m: self.budget_m,
            });
        }
        Ok(())
    }

    /// Number of unconditional phase-1 slots, round-half-up.
    pub fn phase1_count(&self) -> usize {
        (self.phase1_ratio_r * self.budget_m as f64 + 0.5).floor() as usize
    }
}

/// Pooled per-token importance for the current cache order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores(pub Vec<f32>);

impl ImportanceScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mean-pooled attention of the last `r` window queries over all `L`
/// cached keys, averaged over window rows and heads. Cost is O(r*L*d)
/// per head, never O(L^2).
///
/// Returns the scores and the multiply-accumulate count spent.
pub fn window_importance(
    cache_keys: &[HeadMatrix],
    window_queries: &[HeadMatrix],
    scale: bool,
) -> Result<(ImportanceScores, u64), VsbError> {
    assert_eq!(cache_keys.len(), window_queries.len(), "per-head inputs must align");
    let l = cache_keys[0].rows;
    let r = window_queries[0].rows;
    if r > l {
        return Err(VsbError::WindowTooLarge { r, l });
    }
    let num_heads = cache_keys.len();
    let mut pooled = vec![0.0f64; l];
    let mut flops = 0u64;
    for (keys, queries) in cache_keys.iter().zip(window_queries) {
        let w = attention_scores(queries, keys, scale)?;
        flops += attention_flops(queries.rows, keys.rows, keys.dim);
        for qi in 0..w.rows {
            let row = w.row(qi);
            for (acc, &x) in pooled.iter_mut().zip(row) {
                *acc += x as f64;
            }
        }
    }
    let denom = (r * num_heads) as f64;
    let scores = pooled.iter().map(|&x| (x / denom) as f32).collect();
    Ok((ImportanceScores(scores), flops))
}

/// Equal-width bucket of a cache index: `floor(i * N / L)`.
pub fn bucket_of(cache_index: usize, l: usize, n: usize) -> usize {
    debug_assert!(cache_index < l);
    cache_index * n / l
}

/// Indices sorted by descending score, ties broken by ascending index
/// (older token first).
fn rank_by_score(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    order
}

/// Two-phase bucketed selection. Returns exactly `min(L, M)` indices in
/// ascending order.
pub fn vsb_select(scores: &ImportanceScores, config: &VsbConfig) -> Result<Vec<usize>, VsbError> {
    config.validate()?;
    let l = scores.len();
    let m = config.budget_m;
    if l <= m {
        return Ok((0..l).collect());
    }
    let n = config.num_buckets_n;
    let b = config.bucket_capacity_b;
    let order = rank_by_score(&scores.0);
    let phase1 = config.phase1_count().min(m);

    let mut occupancy = vec![0usize; n];
    let mut retained: Vec<usize> = Vec::with_capacity(m);

    // Phase 1: unconditional retention; buckets may overfill.
    for &i in order.iter().take(phase1) {
        occupancy[bucket_of(i, l, n)] += 1;
        retained.push(i);
    }
    // Phase 2: capacity-gated retention, stop at M.
    for &i in order.iter().skip(phase1) {
        if retained.len() >= m {
            break;
        }
        let bucket = bucket_of(i, l, n);
        if occupancy[bucket] < b {
            occupancy[bucket] += 1;
            retained.push(i);
        }
    }
    retained.sort_unstable();
    Ok(retained)
}

/// Baseline: indices of the `M` largest scores, ties broken by earlier
/// position. Ascending order.
pub fn topk_select(scores: &ImportanceScores, m: usize) -> Vec<usize> {
    let l = scores.len();
    if l <= m {
        return (0..l).collect();
    }
    let mut retained: Vec<usize> = rank_by_score(&scores.0).into_iter().take(m).collect();
    retained.sort_unstable();
    retained
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressMode {
    Vsb,
    Topk,
}

/// One compression round: score from the window, select, retain.
/// No-op when the cache is within budget. Returns MAC count spent.
pub fn compress(
    cache: &mut LayerCache,
    window_queries: &[HeadMatrix],
    config: &VsbConfig,
    mode: CompressMode,
    shape: &ModelShape,
) -> Result<u64, VsbError> {
    if cache.len() <= config.budget_m {
        return Ok(0);
    }
    let cache_keys: Vec<HeadMatrix> =
        (0..shape.num_heads).map(|h| cache.keys_for_head(h, shape)).collect();
    let (scores, flops) = window_importance(&cache_keys, window_queries, config.scale_scores)?;
    cache.set_scores(&scores.0);
    let retained = match mode {
        CompressMode::Vsb => vsb_select(&scores, config)?,
        CompressMode::Topk => topk_select(&scores, config.budget_m),
    };
    cache.retain_indices(&retained).expect("selection indices are in range");
    Ok(flops)
}
