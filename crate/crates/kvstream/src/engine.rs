//! Two-phase streaming orchestration: chunk ingest with per-layer
//! compression during the encoding phase, then page retrieval and
//! context assembly when a question arrives.

use crate::cache::{CacheError, LayerCache};
use crate::engine_types::{ChunkInput, QueryInput};
use crate::par::{
    assemble_context, build_page_index, retrieve, score_pages, PageIndex, ParError,
    ResponseContext, RetrievalConfig,
};
use crate::tensor::{attention_flops, rope_remove, HeadMatrix, ModelShape, TensorError};
use crate::vsb::{self, CompressMode, VsbConfig, VsbError};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Vsb(#[from] VsbError),
    #[error(transparent)]
    Par(#[from] ParError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressTrigger {
    AfterEachChunk,
    OnBudgetExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub shape: ModelShape,
    pub vsb: VsbConfig,
    pub retrieval: RetrievalConfig,
    pub compress_trigger: CompressTrigger,
    pub compress_mode: CompressMode,
    /// Rope the question queries at the current stream position instead
    /// of using them raw (ablation path).
    #[serde(default)]
    pub roped_queries: bool,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            shape: ModelShape { num_layers: 4, num_heads: 4, head_dim: 64, rope_theta: 10_000.0 },
            vsb: VsbConfig::default(),
            retrieval: RetrievalConfig::default(),
            compress_trigger: CompressTrigger::OnBudgetExceeded,
            compress_mode: CompressMode::Vsb,
            roped_queries: false,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        self.shape.validate()?;
        self.vsb.validate()?;
        if !(0.0 < self.retrieval.retrieval_ratio && self.retrieval.retrieval_ratio <= 1.0) {
            return Err(EngineError::Config("retrieval_ratio must be in (0, 1]".into()));
        }
        if self.retrieval.page_size_c == 0 {
            return Err(EngineError::Config("page_size_c must be >= 1".into()));
        }
        Ok(())
    }
}

/// Multiply-accumulate counters split by phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub scoring_flops: u64,
    pub response_flops: u64,
}

/// Per-layer stats from one answered query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResponseStats {
    pub cache_len: usize,
    pub num_pages: usize,
    pub pages_retrieved: usize,
    pub context_len: usize,
    pub response_flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryAnswer {
    pub contexts: Vec<ResponseContext>,
    pub page_scores: Vec<Vec<f32>>,
    pub stats: Vec<LayerResponseStats>,
}

struct LayerState {
    cache: LayerCache,
    /// Last `window_r` query rows (head-major, one row per token).
    window_queries: VecDeque<Vec<f32>>,
    page_index: Option<PageIndex>,
}

pub struct StreamState {
    config: EngineConfig,
    layers: Vec<LayerState>,
    pub total_tokens_seen: u64,
    pub compression_rounds: u64,
    pub counters: OpCounters,
    /// Per-layer cache length after every ingest, for memory audits.
    pub length_timeline: Vec<usize>,
}

impl StreamState {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let layers = (0..config.shape.num_layers)
            .map(|_| LayerState {
                cache: LayerCache::new(config.vsb.budget_m),
                window_queries: VecDeque::new(),
                page_index: None,
            })
            .collect();
        Ok(Self {
            config,
            layers,
            total_tokens_seen: 0,
            compression_rounds: 0,
            counters: OpCounters::default(),
            length_timeline: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn layer_cache(&self, layer: usize) -> &LayerCache {
        &self.layers[layer].cache
    }

    pub fn cache_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cache.len())
    }

    fn window_query_matrices(&self, layer: usize) -> Vec<HeadMatrix> {
        let shape = &self.config.shape;
        let d = shape.head_dim;
        let rows = self.layers[layer].window_queries.len();
        (0..shape.num_heads)
            .map(|h| {
                let mut data = Vec::with_capacity(rows * d);
                for row in &self.layers[layer].window_queries {
                    data.extend_from_slice(&row[h * d..(h + 1) * d]);
                }
                HeadMatrix::new(rows, d, data)
            })
            .collect()
    }

    /// Encoding phase step: append the chunk to every layer, refresh the
    /// observation window, and compress when the trigger fires.
    pub fn ingest_chunk(&mut self, chunk: &ChunkInput) -> Result<(), EngineError> {
        let shape = self.config.shape;
        let width = shape.token_width();
        let n = chunk.num_tokens();
        if chunk.layers.len() != shape.num_layers {
            return Err(EngineError::Config(format!(
                "chunk has {} layers, engine expects {}",
                chunk.layers.len(),
                shape.num_layers
            )));
        }
        if chunk.positions.first().copied().unwrap_or(u64::MAX) < self.total_tokens_seen {
            return Err(EngineError::Cache(CacheError::PositionOrderViolation {
                new: chunk.positions[0],
                max: self.total_tokens_seen.saturating_sub(1),
            }));
        }

        for (layer_idx, layer_chunk) in chunk.layers.iter().enumerate() {
            let records = (0..n)
                .map(|t| {
                    crate::cache::TokenRecord::new(
                        layer_chunk.k[t * width..(t + 1) * width].to_vec(),
                        layer_chunk.v[t * width..(t + 1) * width].to_vec(),
                        chunk.positions[t],
                    )
                })
                .collect();
            let layer = &mut self.layers[layer_idx];
            layer.cache.append_tokens(records)?;
            for t in 0..n {
                layer.window_queries.push_back(layer_chunk.q[t * width..(t + 1) * width].to_vec());
                while layer.window_queries.len() > self.config.vsb.window_r {
                    layer.window_queries.pop_front();
                }
            }
        }
        self.total_tokens_seen = chunk.positions.last().copied().map_or(self.total_tokens_seen, |p| p + 1);

        let over_budget = self.cache_len() > self.config.vsb.budget_m;
        let fire = match self.config.compress_trigger {
            CompressTrigger::AfterEachChunk => true,
            CompressTrigger::OnBudgetExceeded => over_budget,
        };
        if fire {
            self.compress_round()?;
        }
        self.length_timeline.push(self.cache_len());
        Ok(())
    }

    fn compress_round(&mut self) -> Result<(), EngineError> {
        let shape = self.config.shape;
        for layer_idx in 0..self.layers.len() {
            let queries = self.window_query_matrices(layer_idx);
            let layer = &mut self.layers[layer_idx];
            let flops = vsb::compress(
                &mut layer.cache,
                &queries,
                &self.config.vsb,
                self.config.compress_mode,
                &shape,
            )?;
            self.counters.scoring_flops += flops;
            layer.page_index = None; // stale after any eviction
        }
        self.compression_rounds += 1;
        debug_assert!(self
            .layers
            .iter()
            .all(|l| l.cache.len() == self.layers[0].cache.len()));
        Ok(())
    }

    /// Response phase: per layer, (re)build the page index, score pages,
    /// retrieve at the configured ratio, and assemble the context with
    /// the sliding window. Never mutates cache contents.
    pub fn answer_query(&mut self, query: &QueryInput) -> Result<QueryAnswer, EngineError> {
        if self.cache_len() == 0 {
            return Err(EngineError::Cache(CacheError::EmptyCache));
        }
        let shape = self.config.shape;
        let retrieval = self.config.retrieval;
        let mut contexts = Vec::with_capacity(self.layers.len());
        let mut all_scores = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());

        for (layer_idx, layer) in self.layers.iter_mut().enumerate() {
            if layer.page_index.is_none() {
                layer.page_index = Some(build_page_index(
                    &layer.cache,
                    retrieval.page_size_c,
                    &shape,
                    retrieval.roped_mean_keys,
                )?);
            }
            let index = layer.page_index.as_ref().unwrap();

            let queries: Vec<HeadMatrix> = if self.config.roped_queries {
                let pos = vec![self.total_tokens_seen; query.layers[layer_idx][0].rows];
                query.layers[layer_idx]
                    .iter()
                    .map(|m| crate::tensor::rope_apply(m, &pos, shape.rope_theta))
                    .collect::<Result<_, _>>()?
            } else {
                query.layers[layer_idx].clone()
            };

            let (scores, score_flops) =
                score_pages(&queries, index, &shape, self.config.vsb.scale_scores)?;
            let selected = retrieve(index, &scores, retrieval.retrieval_ratio);
            let context = assemble_context(&selected, &layer.cache, retrieval.sliding_window_tokens);

            // Response attention cost: t query rows against the m
            // assembled tokens, per head, plus the page-scoring pass.
            let t = queries[0].rows;
            let m = context.len();
            let response_flops = score_flops
                + shape.num_heads as u64 * attention_flops(t, m, shape.head_dim);
            self.counters.response_flops += response_flops;

            stats.push(LayerResponseStats {
                cache_len: layer.cache.len(),
                num_pages: index.num_pages(),
                pages_retrieved: selected.len(),
                context_len: m,
                response_flops,
            });
            all_scores.push(scores);
            contexts.push(context);
        }
        Ok(QueryAnswer { contexts, page_scores: all_scores, stats })
    }

    /// De-roped question queries helper for symmetric scoring of roped
    /// inputs: removes rotation at the given position.
    pub fn derope_query(
        query: &HeadMatrix,
        position: u64,
        shape: &ModelShape,
    ) -> Result<HeadMatrix, EngineError> {
        let positions = vec![position; query.rows];
        Ok(rope_remove(query, &positions, shape.rope_theta)?)
    }

    /// Exact per-layer token counts and a byte estimate
    /// (`tokens * heads * head_dim * 2 tensors * 4 bytes`).
    pub fn memory_report(&self) -> Vec<MemoryReportEntry> {
        let width = self.config.shape.token_width();
        self.layers
            .iter()
            .enumerate()
            .map(|(layer, l)| MemoryReportEntry {
                layer,
                tokens: l.cache.len(),
                bytes: l.cache.len() * width * 2 * 4,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReportEntry {
    pub layer: usize,
    pub tokens: usize,
    pub bytes: usize,
}
