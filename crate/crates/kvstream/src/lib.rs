//! Model-agnostic streaming KV-cache engine: sink-aware bucketed
//! compression of an unbounded token stream under a fixed budget, plus
//! position-agnostic page retrieval for query answering. Ships with a
//! synthetic trace generator, brute-force oracles, and a CLI harness.

pub mod cache;
pub mod engine;
pub mod engine_types;
pub mod metrics;
pub mod par;
pub mod report;
pub mod tensor;
pub mod trace;
pub mod vsb;

pub use cache::{CacheError, LayerCache, TokenRecord};
pub use engine::{CompressTrigger, EngineConfig, EngineError, StreamState};
pub use engine_types::{ChunkInput, LayerChunk, QueryInput};
pub use par::{PageIndex, ResponseContext, RetrievalConfig};
pub use tensor::{HeadMatrix, ModelShape, TensorError};
pub use trace::{Trace, TraceError, TraceSpec};
pub use vsb::{CompressMode, ImportanceScores, VsbConfig};
