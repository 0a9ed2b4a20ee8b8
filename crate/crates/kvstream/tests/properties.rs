//! Property tests for the numeric core plus the statistical invariants
//! (bucket coverage direction, locality, separability, response cost)
//! that run over seeded batches rather than single fixtures.

use kvstream::engine::{CompressTrigger, EngineConfig, StreamState};
use kvstream::engine_types::ChunkInput;
use kvstream::par::RetrievalConfig;
use kvstream::tensor::{
    attention_flops, attention_scores, rope_apply, rope_remove, softmax_rows, HeadMatrix,
    ModelShape,
};
use kvstream::trace::{generate, read_trace, write_trace, Trace, TraceSpec};
use kvstream::vsb::{
    bucket_of, topk_select, vsb_select, window_importance, CompressMode, ImportanceScores,
    VsbConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix_strategy(max_rows: usize, max_dim: usize) -> impl Strategy<Value = HeadMatrix> {
    (1..=max_rows, 1..=max_dim).prop_flat_map(|(rows, dim)| {
        proptest::collection::vec(-50.0f32..50.0, rows * dim)
            .prop_map(move |data| HeadMatrix::new(rows, dim, data))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(m in matrix_strategy(8, 16)) {
        let s = softmax_rows(&m).unwrap();
        for r in 0..s.rows {
            let sum: f32 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_round_trips(
        half in prop_oneof![Just(1usize), Just(2), Just(32), Just(64)],
        rows in 1usize..6,
        pos_base in 0u64..1_000_000,
        seed in 0u64..1_000,
    ) {
        let d = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * d).map(|_| rng.gen_range(-4.0f32..4.0)).collect();
        let m = HeadMatrix::new(rows, d, data);
        let positions: Vec<u64> = (0..rows as u64).map(|i| pos_base.saturating_sub(i)).collect();
        let roped = rope_apply(&m, &positions, 10_000.0).unwrap();
        let back = rope_remove(&roped, &positions, 10_000.0).unwrap();
        for (a, b) in m.data.iter().zip(&back.data) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn rope_preserves_row_norms(
        half in prop_oneof![Just(1usize), Just(2), Just(32), Just(64)],
        pos in 0u64..1_000_000,
        seed in 0u64..1_000,
    ) {
        let d = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..d).map(|_| rng.gen_range(-4.0f32..4.0)).collect();
        let m = HeadMatrix::new(1, d, data);
        let roped = rope_apply(&m, &[pos], 10_000.0).unwrap();
        let n0: f32 = m.row(0).iter().map(|x| x * x).sum::<f32>().sqrt();
        let n1: f32 = roped.row(0).iter().map(|x| x * x).sum::<f32>().sqrt();
        prop_assert!((n0 - n1).abs() < 1e-5);
    }

    #[test]
    fn attention_is_key_permutation_equivariant(
        dim in 1usize..8,
        qrows in 1usize..4,
        krows in 2usize..8,
        rot in 1usize..8,
        seed in 0u64..1_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = HeadMatrix::new(qrows, dim, (0..qrows * dim).map(|_| rng.gen_range(-3.0f32..3.0)).collect());
        let k = HeadMatrix::new(krows, dim, (0..krows * dim).map(|_| rng.gen_range(-3.0f32..3.0)).collect());
        let rot = rot % krows;
        let mut permuted = HeadMatrix::zeros(krows, dim);
        for r in 0..krows {
            permuted.row_mut((r + rot) % krows).copy_from_slice(k.row(r));
        }
        let base = attention_scores(&q, &k, true).unwrap();
        let moved = attention_scores(&q, &permuted, true).unwrap();
        // Softmax denominators accumulate in permuted order, so allow
        // one float ulp's worth of drift.
        for r in 0..qrows {
            for c in 0..krows {
                prop_assert!((base.row(r)[c] - moved.row(r)[(c + rot) % krows]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn vsb_select_size_order_and_determinism(
        l in 1usize..256,
        b in 1usize..4,
        n in 1usize..32,
        seed in 0u64..1_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = ImportanceScores((0..l).map(|_| rng.gen_range(0.0f32..1.0)).collect());
        let config = VsbConfig {
            budget_m: n * b,
            num_buckets_n: n,
            bucket_capacity_b: b,
            window_r: 1,
            phase1_ratio_r: 0.5,
            scale_scores: true,
        };
        let kept = vsb_select(&scores, &config).unwrap();
        prop_assert_eq!(kept.len(), l.min(n * b));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(kept.iter().all(|&i| i < l));
        prop_assert_eq!(&kept, &vsb_select(&scores, &config).unwrap());
    }

    #[test]
    fn trace_round_trips(
        layers in 1usize..3,
        heads in 1usize..3,
        half in 1usize..5,
        tokens in 1usize..48,
        chunk in 1usize..24,
        sinks in 0usize..4,
        answers in 0usize..4,
        cluster in 1usize..12,
        seed in 0u64..1_000,
    ) {
        prop_assume!(sinks + answers <= tokens);
        let spec = TraceSpec {
            shape: ModelShape { num_layers: layers, num_heads: heads, head_dim: 2 * half, rope_theta: 10_000.0 },
            total_tokens: tokens,
            chunk_size: chunk,
            num_sinks: sinks,
            sink_gain: 10.0,
            local_cluster_size: cluster,
            num_answer_tokens: answers,
            answer_query: None,
            noise_std: 0.1,
            seed,
        };
        let trace = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kvtr");
        write_trace(&trace, &path).unwrap();
        prop_assert_eq!(trace, read_trace(&path).unwrap());
    }
}

/// Mean distinct-bucket coverage of VSB never trails TopK when high
/// scores come in contiguous clusters.
#[test]
fn clustered_scores_vsb_covers_more_buckets_than_topk() {
    let l = 400;
    let n = 100;
    let config = VsbConfig {
        budget_m: n,
        num_buckets_n: n,
        bucket_capacity_b: 1,
        window_r: 1,
        phase1_ratio_r: 0.5,
        scale_scores: true,
    };
    let coverage = |kept: &[usize]| {
        let mut buckets: Vec<usize> = kept.iter().map(|&i| bucket_of(i, l, n)).collect();
        buckets.sort_unstable();
        buckets.dedup();
        buckets.len()
    };
    let mut vsb_total = 0usize;
    let mut topk_total = 0usize;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s: Vec<f32> = (0..l).map(|_| rng.gen_range(0.0f32..0.01)).collect();
        for _ in 0..3 {
            let start = rng.gen_range(0..l - 40);
            for x in &mut s[start..start + 40] {
                *x = rng.gen_range(1.0f32..2.0);
            }
        }
        let scores = ImportanceScores(s);
        vsb_total += coverage(&vsb_select(&scores, &config).unwrap());
        topk_total += coverage(&topk_select(&scores, config.budget_m));
    }
    assert!(
        vsb_total > topk_total,
        "mean coverage: vsb {} vs topk {}",
        vsb_total as f64 / 200.0,
        topk_total as f64 / 200.0
    );
}

fn full_queries(trace: &Trace, layer: usize, head: usize) -> HeadMatrix {
    let d = trace.shape.head_dim;
    let mut data = Vec::new();
    let mut rows = 0;
    for chunk in &trace.chunks {
        let m = ChunkInput::head_matrix(&chunk.layers[layer].q, chunk.num_tokens(), head, &trace.shape);
        rows += m.rows;
        data.extend_from_slice(&m.data);
    }
    HeadMatrix::new(rows, d, data)
}

fn rows_slice(m: &HeadMatrix, start: usize, len: usize) -> HeadMatrix {
    HeadMatrix::new(len, m.dim, m.data[start * m.dim..(start + len) * m.dim].to_vec())
}

/// A local token scores higher under a window inside its own cluster
/// than under one placed two clusters later.
#[test]
fn locality_window_placement_controls_importance() {
    let cluster = 32usize;
    let spec = |seed| TraceSpec {
        shape: ModelShape { num_layers: 1, num_heads: 4, head_dim: 64, rope_theta: 10_000.0 },
        total_tokens: 512,
        chunk_size: 128,
        num_sinks: 0,
        sink_gain: 10.0,
        local_cluster_size: cluster,
        num_answer_tokens: 0,
        answer_query: None,
        noise_std: 0.1,
        seed,
    };
    for seed in 0..10u64 {
        let trace = generate(&spec(seed)).unwrap();
        let keys: Vec<HeadMatrix> = (0..4).map(|h| trace.full_keys(0, h)).collect();
        let queries: Vec<HeadMatrix> = (0..4).map(|h| full_queries(&trace, 0, h)).collect();
        // Cluster 4 occupies [128, 160); the far window sits in cluster 6.
        let near: Vec<HeadMatrix> = queries.iter().map(|q| rows_slice(q, 4 * cluster, cluster)).collect();
        let far: Vec<HeadMatrix> = queries.iter().map(|q| rows_slice(q, 6 * cluster, cluster)).collect();
        let (s_near, _) = window_importance(&keys, &near, true).unwrap();
        let (s_far, _) = window_importance(&keys, &far, true).unwrap();
        let mean = |s: &[f32]| {
            s[4 * cluster..5 * cluster].iter().map(|&x| x as f64).sum::<f64>() / cluster as f64
        };
        assert!(
            mean(&s_near.0) > mean(&s_far.0),
            "seed {seed}: near {} !> far {}",
            mean(&s_near.0),
            mean(&s_far.0)
        );
    }
}

/// At low noise every sink outranks every local token under
/// full-attention importance.
#[test]
fn separability_sinks_outrank_noise_at_low_noise() {
    let spec = |seed| TraceSpec {
        shape: ModelShape { num_layers: 2, num_heads: 2, head_dim: 16, rope_theta: 10_000.0 },
        total_tokens: 256,
        chunk_size: 64,
        num_sinks: 4,
        sink_gain: 10.0,
        local_cluster_size: 16,
        num_answer_tokens: 0,
        answer_query: None,
        noise_std: 0.01,
        seed,
    };
    for seed in 0..20u64 {
        let trace = generate(&spec(seed)).unwrap();
        for layer in 0..2 {
            let keys: Vec<HeadMatrix> = (0..2).map(|h| trace.full_keys(layer, h)).collect();
            let queries: Vec<HeadMatrix> = (0..2).map(|h| full_queries(&trace, layer, h)).collect();
            let (scores, _) = window_importance(&keys, &queries, true).unwrap();
            let min_sink = scores.0[..4].iter().cloned().fold(f32::INFINITY, f32::min);
            let max_other = scores.0[4..].iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(
                min_sink > max_other,
                "seed {seed} layer {layer}: sink {min_sink} !> local {max_other}"
            );
        }
    }
}

/// Response-phase attention work is linear in context length, never
/// quadratic in cache plus question length.
#[test]
fn response_cost_is_linear_in_context() {
    let shape = ModelShape { num_layers: 2, num_heads: 2, head_dim: 32, rope_theta: 10_000.0 };
    let spec = TraceSpec {
        shape,
        total_tokens: 1024,
        chunk_size: 128,
        num_sinks: 4,
        sink_gain: 10.0,
        local_cluster_size: 32,
        num_answer_tokens: 8,
        answer_query: None,
        noise_std: 0.1,
        seed: 11,
    };
    let trace = generate(&spec).unwrap();
    let config = EngineConfig {
        shape,
        vsb: VsbConfig {
            budget_m: 256,
            num_buckets_n: 256,
            bucket_capacity_b: 1,
            window_r: 32,
            phase1_ratio_r: 0.5,
            scale_scores: true,
        },
        retrieval: RetrievalConfig {
            retrieval_ratio: 0.4,
            sliding_window_tokens: 64,
            page_size_c: 16,
            roped_mean_keys: false,
        },
        compress_trigger: CompressTrigger::OnBudgetExceeded,
        compress_mode: CompressMode::Vsb,
        roped_queries: false,
        seed: 0,
    };
    let mut state = StreamState::new(config).unwrap();
    for chunk in &trace.chunks {
        state.ingest_chunk(chunk).unwrap();
    }
    let gt = trace.ground_truth.as_ref().unwrap();
    let answer = state.answer_query(&gt.query_input(&shape)).unwrap();
    let t = 1u64; // one question row
    for stats in &answer.stats {
        let expected = shape.num_heads as u64
            * (attention_flops(t as usize, stats.num_pages, shape.head_dim)
                + attention_flops(t as usize, stats.context_len, shape.head_dim));
        assert_eq!(stats.response_flops, expected);
        let quadratic =
            attention_flops(stats.cache_len + t as usize, stats.cache_len + t as usize, shape.head_dim);
        assert!(stats.response_flops < quadratic);
    }
}
