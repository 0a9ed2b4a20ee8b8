//! Synthetic stream generation with planted token classes, and the
//! binary trace file format (magic `KVTR`, version 1, little-endian).
//!
//! Planted classes: sink tokens share one per-head stream direction that
//! every query contains, so full-attention importance ranks them highest.
//! Local tokens are clustered; cluster coherence scales with `noise_std`,
//! so a zero-noise trace with no sinks and no answers degenerates to
//! uniform attention. A seeded subset of clusters is "hot": their keys
//! carry a persistent (weaker-than-sink) stream-direction component, so
//! score-only eviction concentrates on those contiguous regions round
//! after round. Answer tokens align with a per-head answer direction,
//! orthogonal to the stream direction, that only the question query
//! contains. Keys and stream queries are emitted roped at their
//! positions; the ground-truth question query is raw.

use crate::engine_types::{ChunkInput, LayerChunk, QueryInput};
use crate::tensor::{rope_apply, HeadMatrix, ModelShape};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"KVTR";
const FORMAT_VERSION: u32 = 1;
const FLAG_GROUND_TRUTH: u32 = 1;

/// Weight of the per-head stream direction inside every query.
const STREAM_QUERY_WEIGHT: f32 = 2.4;
/// Cluster coherence multiplier; effective amplitude is this times
/// `noise_std`.
const LOCAL_GAIN: f32 = 44.0;
/// Stream-direction amplitude of hot-cluster keys, times `noise_std`.
/// Kept well below `sink_gain` so sinks still dominate.
const HOT_GAIN: f32 = 50.0;
/// Fraction of local clusters drawn hot.
const HOT_PROB: f64 = 0.3;
/// Answer key amplitude. Modest, so answers carry no outsized weight in
/// stream-side importance scores.
const ANSWER_GAIN: f32 = 10.0;
/// Per-head norm of the generated question query; sharpens response-phase
/// attention onto the planted answers.
const ANSWER_QUERY_GAIN: f32 = 4.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
    #[error("NotATrace: bad magic bytes")]
    NotATrace,
    #[error("UnsupportedVersion: {0}")]
    UnsupportedVersion(u32),
    #[error("CorruptTrace: {0}")]
    CorruptTrace(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub shape: ModelShape,
    pub total_tokens: usize,
    pub chunk_size: usize,
    pub num_sinks: usize,
    pub sink_gain: f32,
    pub local_cluster_size: usize,
    pub num_answer_tokens: usize,
    /// Raw (pre-rotary) head-major question query; generated from the
    /// seed when absent.
    #[serde(default)]
    pub answer_query: Option<Vec<f32>>,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            shape: ModelShape { num_layers: 4, num_heads: 4, head_dim: 64, rope_theta: 10_000.0 },
            total_tokens: 2048,
            chunk_size: 196,
            num_sinks: 8,
            sink_gain: 10.0,
            local_cluster_size: 32,
            num_answer_tokens: 16,
            answer_query: None,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl TraceSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        self.shape
            .validate()
            .map_err(|e| TraceError::InvalidSpec(e.to_string()))?;
        if self.total_tokens == 0 || self.chunk_size == 0 {
            return Err(TraceError::InvalidSpec(
                "total_tokens and chunk_size must be >= 1".into(),
            ));
        }
        if self.num_sinks + self.num_answer_tokens > self.total_tokens {
            return Err(TraceError::InvalidSpec(format!(
                "num_sinks ({}) + num_answer_tokens ({}) exceed total_tokens ({})",
                self.num_sinks, self.num_answer_tokens, self.total_tokens
            )));
        }
        if self.local_cluster_size == 0 {
            return Err(TraceError::InvalidSpec("local_cluster_size must be >= 1".into()));
        }
        if self.num_sinks > 0 && self.sink_gain <= 1.0 {
            return Err(TraceError::InvalidSpec("sink_gain must be > 1".into()));
        }
        if self.noise_std < 0.0 {
            return Err(TraceError::InvalidSpec("noise_std must be >= 0".into()));
        }
        if let Some(q) = &self.answer_query {
            if q.len() != self.shape.token_width() {
                return Err(TraceError::InvalidSpec(format!(
                    "answer_query length {} != num_heads * head_dim ({})",
                    q.len(),
                    self.shape.token_width()
                )));
            }
        }
        Ok(())
    }
}

/// Planted token ids and the question query that targets the answers.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub sink_ids: Vec<u64>,
    pub local_ids: Vec<u64>,
    pub answer_ids: Vec<u64>,
    /// Raw head-major question query row.
    pub answer_query: Vec<f32>,
}

impl GroundTruth {
    pub fn query_input(&self, shape: &ModelShape) -> QueryInput {
        QueryInput::broadcast(&self.answer_query, shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub shape: ModelShape,
    pub chunk_size: usize,
    pub chunks: Vec<ChunkInput>,
    pub ground_truth: Option<GroundTruth>,
}

impl Trace {
    pub fn total_tokens(&self) -> usize {
        self.chunks.iter().map(ChunkInput::num_tokens).sum()
    }

    /// Roped keys for one (layer, head) across the whole stream, in
    /// stream order. Oracle-side helper; the engine never sees this.
    pub fn full_keys(&self, layer: usize, head: usize) -> HeadMatrix {
        let d = self.shape.head_dim;
        let mut data = Vec::new();
        let mut rows = 0;
        for chunk in &self.chunks {
            let m = ChunkInput::head_matrix(&chunk.layers[layer].k, chunk.num_tokens(), head, &self.shape);
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        HeadMatrix::new(rows, d, data)
    }

    pub fn all_positions(&self) -> Vec<u64> {
        self.chunks.iter().flat_map(|c| c.positions.iter().copied()).collect()
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..dim).map(|_| gaussian(rng)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f32]) {
    let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Project `base` out of `v` and renormalize.
fn orthonormal_to(v: &mut [f32], base: &[f32]) {
    let dot: f32 = v.iter().zip(base).map(|(a, b)| a * b).sum();
    let b2: f32 = base.iter().map(|x| x * x).sum();
    if b2 > 0.0 {
        for (x, b) in v.iter_mut().zip(base) {
            *x -= dot / b2 * b;
        }
    }
    normalize(v);
}

// Box-Muller; two uniforms per normal keeps the draw count position
// independent.
fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TokenClass {
    Sink,
    Local,
    Answer,
}

/// Generate a trace deterministically from the spec. Noise streams are
/// seed-split per (layer, head).
pub fn generate(spec: &TraceSpec) -> Result<Trace, TraceError> {
    spec.validate()?;
    let shape = spec.shape;
    let d = shape.head_dim;
    let width = shape.token_width();
    let total = spec.total_tokens;
    let sigma = spec.noise_std;

    // Class layout: sinks at the head of the stream, answers scattered
    // over the remainder, everything else local.
    let mut class = vec![TokenClass::Local; total];
    for c in class.iter_mut().take(spec.num_sinks) {
        *c = TokenClass::Sink;
    }
    let mut layout_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let candidates: Vec<usize> = (spec.num_sinks..total).collect();
    let answer_picks =
        rand::seq::index::sample(&mut layout_rng, candidates.len(), spec.num_answer_tokens);
    for pick in answer_picks.iter() {
        class[candidates[pick]] = TokenClass::Answer;
    }

    // Hot clusters are global (shared across layers and heads) so that
    // persistent salience is spatially consistent through the stream.
    let num_clusters = total.div_ceil(spec.local_cluster_size);
    let hot_cluster: Vec<bool> = (0..num_clusters).map(|_| layout_rng.gen_bool(HOT_PROB)).collect();

    // Stream direction is per head, shared across layers; sinks and hot
    // clusters project onto it and every query contains it.
    let stream_dirs: Vec<Vec<f32>> = (0..shape.num_heads)
        .map(|h| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5151_0000 ^ (h as u64).wrapping_mul(0x0bad_cafe));
            unit_direction(&mut rng, d)
        })
        .collect();

    // Answer direction is per head, shared across layers, so one question
    // query targets every layer's planted answers. Kept orthogonal to the
    // stream direction so answers carry no stream salience.
    let answer_dirs: Vec<Vec<f32>> = match &spec.answer_query {
        Some(q) => (0..shape.num_heads)
            .map(|h| {
                let mut dir = q[h * d..(h + 1) * d].to_vec();
                normalize(&mut dir);
                dir
            })
            .collect(),
        None => (0..shape.num_heads)
            .map(|h| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(spec.seed ^ 0xa5a5_0000 ^ (h as u64).wrapping_mul(0x1234_5677));
                let mut dir = unit_direction(&mut rng, d);
                orthonormal_to(&mut dir, &stream_dirs[h]);
                dir
            })
            .collect(),
    };
    let positions: Vec<u64> = (0..total as u64).collect();

    // Per-layer flattened roped Q/K and raw V, token rows head-major.
    let mut layer_q = vec![vec![0.0f32; total * width]; shape.num_layers];
    let mut layer_k = vec![vec![0.0f32; total * width]; shape.num_layers];
    let mut layer_v = vec![vec![0.0f32; total * width]; shape.num_layers];

    for layer in 0..shape.num_layers {
        for head in 0..shape.num_heads {
            let stream_id = (layer * shape.num_heads + head) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed ^ stream_id.wrapping_mul(0x517c_c1b7_2722_0a95).wrapping_add(1),
            );
            let stream_dir = &stream_dirs[head];
            let cluster_dirs: Vec<Vec<f32>> =
                (0..num_clusters).map(|_| unit_direction(&mut rng, d)).collect();
            let answer_dir = &answer_dirs[head];

            let mut keys_raw = HeadMatrix::zeros(total, d);
            let mut queries_raw = HeadMatrix::zeros(total, d);
            for t in 0..total {
                let cid = t / spec.local_cluster_size;
                let cluster = &cluster_dirs[cid];
                let krow = keys_raw.row_mut(t);
                for j in 0..d {
                    krow[j] = sigma * gaussian(&mut rng);
                }
                match class[t] {
                    TokenClass::Sink => {
                        for j in 0..d {
                            krow[j] += spec.sink_gain * stream_dir[j];
                        }
                    }
                    TokenClass::Answer => {
                        for j in 0..d {
                            krow[j] += ANSWER_GAIN * answer_dir[j];
                        }
                    }
                    TokenClass::Local => {
                        let hot = if hot_cluster[cid] { sigma * HOT_GAIN } else { 0.0 };
                        for j in 0..d {
                            krow[j] += sigma * LOCAL_GAIN * cluster[j] + hot * stream_dir[j];
                        }
                    }
                }
                let qrow = queries_raw.row_mut(t);
                for j in 0..d {
                    qrow[j] = sigma * gaussian(&mut rng)
                        + sigma * LOCAL_GAIN * cluster[j]
                        + STREAM_QUERY_WEIGHT * stream_dir[j];
                }
            }

            let keys = rope_apply(&keys_raw, &positions, shape.rope_theta)
                .map_err(|e| TraceError::InvalidSpec(e.to_string()))?;
            let queries = rope_apply(&queries_raw, &positions, shape.rope_theta)
                .map_err(|e| TraceError::InvalidSpec(e.to_string()))?;

            for t in 0..total {
                let base = t * width + head * d;
                layer_k[layer][base..base + d].copy_from_slice(keys.row(t));
                layer_q[layer][base..base + d].copy_from_slice(queries.row(t));
                let vrow = &mut layer_v[layer][base..base + d];
                for x in vrow.iter_mut() {
                    *x = sigma * gaussian(&mut rng);
                }
            }
        }
    }

    // Slice the stream into chunks.
    let mut chunks = Vec::with_capacity(total.div_ceil(spec.chunk_size));
    let mut start = 0usize;
    while start < total {
        let n = spec.chunk_size.min(total - start);
        let mut layers = Vec::with_capacity(shape.num_layers);
        for layer in 0..shape.num_layers {
            let range = start * width..(start + n) * width;
            layers.push(LayerChunk {
                q: layer_q[layer][range.clone()].to_vec(),
                k: layer_k[layer][range.clone()].to_vec(),
                v: layer_v[layer][range].to_vec(),
            });
        }
        chunks.push(ChunkInput {
            positions: positions[start..start + n].to_vec(),
            layers,
        });
        start += n;
    }

    // Echo a user-supplied question query verbatim; otherwise scale the
    // generated per-head directions.
    let answer_query = match &spec.answer_query {
        Some(q) => q.clone(),
        None => {
            let mut q = Vec::with_capacity(width);
            for dir in &answer_dirs {
                q.extend(dir.iter().map(|x| ANSWER_QUERY_GAIN * x));
            }
            q
        }
    };
    let ground_truth = GroundTruth {
        sink_ids: (0..spec.num_sinks as u64).collect(),
        local_ids: (0..total as u64).filter(|&t| class[t as usize] == TokenClass::Local).collect(),
        answer_ids: (0..total as u64).filter(|&t| class[t as usize] == TokenClass::Answer).collect(),
        answer_query,
    };

    Ok(Trace {
        shape,
        chunk_size: spec.chunk_size,
        chunks,
        ground_truth: Some(ground_truth),
    })
}

fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> std::io::Result<()> {
    for &x in xs {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, TraceError> {
    let mut out = vec![0.0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(|_| TraceError::CorruptTrace("truncated f32 payload".into()))?;
    Ok(out)
}

fn read_u64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<u64>, TraceError> {
    let mut out = vec![0u64; n];
    r.read_u64_into::<LittleEndian>(&mut out)
        .map_err(|_| TraceError::CorruptTrace("truncated u64 payload".into()))?;
    Ok(out)
}

pub fn write_trace(trace: &Trace, path: &Path) -> Result<(), TraceError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(trace.shape.num_layers as u32)?;
    w.write_u32::<LittleEndian>(trace.shape.num_heads as u32)?;
    w.write_u32::<LittleEndian>(trace.shape.head_dim as u32)?;
    w.write_f32::<LittleEndian>(trace.shape.rope_theta)?;
    w.write_u64::<LittleEndian>(trace.total_tokens() as u64)?;
    w.write_u32::<LittleEndian>(trace.chunk_size as u32)?;
    let flags = if trace.ground_truth.is_some() { FLAG_GROUND_TRUTH } else { 0 };
    w.write_u32::<LittleEndian>(flags)?;
    w.write_u32::<LittleEndian>(trace.chunks.len() as u32)?;
    for chunk in &trace.chunks {
        w.write_u32::<LittleEndian>(chunk.num_tokens() as u32)?;
        for &p in &chunk.positions {
            w.write_u64::<LittleEndian>(p)?;
        }
        for layer in &chunk.layers {
            write_f32s(&mut w, &layer.q)?;
            write_f32s(&mut w, &layer.k)?;
            write_f32s(&mut w, &layer.v)?;
        }
    }
    if let Some(gt) = &trace.ground_truth {
        for ids in [&gt.sink_ids, &gt.local_ids, &gt.answer_ids] {
            w.write_u32::<LittleEndian>(ids.len() as u32)?;
            for &id in ids.iter() {
                w.write_u64::<LittleEndian>(id)?;
            }
        }
        w.write_u32::<LittleEndian>(gt.answer_query.len() as u32)?;
        write_f32s(&mut w, &gt.answer_query)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Trace, TraceError> {
    let bytes = std::fs::read(path)?;
    let mut r = std::io::Cursor::new(&bytes);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| TraceError::NotATrace)?;
    if &magic != MAGIC {
        return Err(TraceError::NotATrace);
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| TraceError::CorruptTrace("missing version".into()))?;
    if version != FORMAT_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let header_err = |_| TraceError::CorruptTrace("truncated header".into());
    let shape = ModelShape {
        num_layers: r.read_u32::<LittleEndian>().map_err(header_err)? as usize,
        num_heads: r.read_u32::<LittleEndian>().map_err(header_err)? as usize,
        head_dim: r.read_u32::<LittleEndian>().map_err(header_err)? as usize,
        rope_theta: r.read_f32::<LittleEndian>().map_err(header_err)?,
    };
    shape.validate().map_err(|e| TraceError::CorruptTrace(e.to_string()))?;
    let declared_tokens = r.read_u64::<LittleEndian>().map_err(header_err)? as usize;
    let chunk_size = r.read_u32::<LittleEndian>().map_err(header_err)? as usize;
    let flags = r.read_u32::<LittleEndian>().map_err(header_err)?;
    let num_chunks = r.read_u32::<LittleEndian>().map_err(header_err)? as usize;

    let width = shape.token_width();
    let mut chunks = Vec::with_capacity(num_chunks);
    let mut seen_tokens = 0usize;
    for _ in 0..num_chunks {
        let n = r
            .read_u32::<LittleEndian>()
            .map_err(|_| TraceError::CorruptTrace("truncated chunk header".into()))?
            as usize;
        let positions = read_u64s(&mut r, n)?;
        let mut layers = Vec::with_capacity(shape.num_layers);
        for _ in 0..shape.num_layers {
            layers.push(LayerChunk {
                q: read_f32s(&mut r, n * width)?,
                k: read_f32s(&mut r, n * width)?,
                v: read_f32s(&mut r, n * width)?,
            });
        }
        seen_tokens += n;
        chunks.push(ChunkInput { positions, layers });
    }
    if seen_tokens != declared_tokens {
        return Err(TraceError::CorruptTrace(format!(
            "header declares {declared_tokens} tokens but payload holds {seen_tokens}"
        )));
    }

    let ground_truth = if flags & FLAG_GROUND_TRUTH != 0 {
        let mut id_sections = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r
                .read_u32::<LittleEndian>()
                .map_err(|_| TraceError::CorruptTrace("truncated ground truth".into()))?
                as usize;
            id_sections.push(read_u64s(&mut r, n)?);
        }
        let qlen = r
            .read_u32::<LittleEndian>()
            .map_err(|_| TraceError::CorruptTrace("truncated ground truth".into()))?
            as usize;
        let answer_query = read_f32s(&mut r, qlen)?;
        let mut it = id_sections.into_iter();
        Some(GroundTruth {
            sink_ids: it.next().unwrap(),
            local_ids: it.next().unwrap(),
            answer_ids: it.next().unwrap(),
            answer_query,
        })
    } else {
        None
    };

    if r.position() != bytes.len() as u64 {
        return Err(TraceError::CorruptTrace(format!(
            "{} trailing bytes after payload",
            bytes.len() as u64 - r.position()
        )));
    }

    Ok(Trace { shape, chunk_size, chunks, ground_truth })
}

/// JSON provenance sidecar written next to the binary trace.
pub fn write_spec_sidecar(spec: &TraceSpec, trace_path: &Path) -> Result<std::path::PathBuf, TraceError> {
    let sidecar = trace_path.with_extension("json");
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(&sidecar, json)?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TraceSpec {
        TraceSpec {
            shape: ModelShape { num_layers: 2, num_heads: 2, head_dim: 8, rope_theta: 10_000.0 },
            total_tokens: 64,
            chunk_size: 16,
            num_sinks: 2,
            sink_gain: 10.0,
            local_cluster_size: 8,
            num_answer_tokens: 4,
            answer_query: None,
            noise_std: 0.05,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn class_counts_partition_tokens() {
        let t = generate(&small_spec()).unwrap();
        let gt = t.ground_truth.as_ref().unwrap();
        assert_eq!(gt.sink_ids.len(), 2);
        assert_eq!(gt.answer_ids.len(), 4);
        assert_eq!(gt.sink_ids.len() + gt.local_ids.len() + gt.answer_ids.len(), 64);
        assert_eq!(t.total_tokens(), 64);
    }

    #[test]
    fn zero_signal_trace_has_zero_keys_and_uniform_importance() {
        let spec = TraceSpec {
            num_sinks: 0,
            num_answer_tokens: 0,
            noise_std: 0.0,
            ..small_spec()
        };
        let t = generate(&spec).unwrap();
        for chunk in &t.chunks {
            for layer in &chunk.layers {
                assert!(layer.k.iter().all(|&x| x == 0.0));
                assert!(layer.v.iter().all(|&x| x == 0.0));
            }
        }
        // Zero keys mean every query attends uniformly.
        let keys = t.full_keys(0, 0);
        let chunk = &t.chunks[0];
        let queries = ChunkInput::head_matrix(&chunk.layers[0].q, chunk.num_tokens(), 0, &t.shape);
        let (scores, _) =
            crate::vsb::window_importance(std::slice::from_ref(&keys), std::slice::from_ref(&queries), true)
                .unwrap();
        let expect = 1.0 / keys.rows as f32;
        for &s in &scores.0 {
            assert!((s - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = TraceSpec { num_sinks: 100, ..small_spec() };
        assert!(matches!(generate(&spec).unwrap_err(), TraceError::InvalidSpec(_)));
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kvtr");
        let t = generate(&small_spec()).unwrap();
        write_trace(&t, &path).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.kvtr");
        std::fs::write(&path, b"NOPE and then some").unwrap();
        assert!(matches!(read_trace(&path).unwrap_err(), TraceError::NotATrace));
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.kvtr");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_trace(&path).unwrap_err(), TraceError::UnsupportedVersion(9)));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kvtr");
        let t = generate(&small_spec()).unwrap();
        write_trace(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_trace(&path).unwrap_err(), TraceError::CorruptTrace(_)));
    }

    #[test]
    fn token_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kvtr");
        let t = generate(&small_spec()).unwrap();
        write_trace(&t, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // total_tokens u64 lives right after magic+version+shape (4+4+16).
        bytes[24..32].copy_from_slice(&100u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_trace(&path).unwrap_err(), TraceError::CorruptTrace(_)));
    }
}
