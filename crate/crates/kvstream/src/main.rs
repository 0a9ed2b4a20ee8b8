//! CLI front door: synthetic trace generation, streaming runs with JSON
//! reports, and retrieval-ratio sweeps with CSV output.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Diagnostics go to
//! stderr; JSON/CSV streams stay clean.

use clap::{Args, Parser, Subcommand};
use kvstream::engine::{CompressTrigger, EngineConfig};
use kvstream::engine_types::QueryInput;
use kvstream::report::{run_trace, sweep_csv_header, SweepRow};
use kvstream::tensor::ModelShape;
use kvstream::trace::{generate, read_trace, write_spec_sidecar, write_trace, TraceSpec};
use kvstream::vsb::CompressMode;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

#[derive(Parser)]
#[command(name = "kvstream", version, about = "Streaming KV-cache engine harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace file with planted token classes.
    GenTrace(GenTraceArgs),
    /// Stream a trace through the engine and emit a JSON run report.
    Run(RunArgs),
    /// Sweep retrieval ratios across seeds and emit CSV rows.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ShapeArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, default_value_t = 10_000.0)]
    rope_theta: f32,
}

impl ShapeArgs {
    fn shape(&self) -> ModelShape {
        ModelShape {
            num_layers: self.layers,
            num_heads: self.heads,
            head_dim: self.head_dim,
            rope_theta: self.rope_theta,
        }
    }
}

#[derive(Args)]
struct TraceSpecArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long, default_value_t = 2048)]
    tokens: usize,
    #[arg(long, default_value_t = 196)]
    chunk_size: usize,
    #[arg(long, default_value_t = 8)]
    sinks: usize,
    #[arg(long, default_value_t = 10.0)]
    sink_gain: f32,
    #[arg(long, default_value_t = 32)]
    cluster_size: usize,
    #[arg(long, default_value_t = 16)]
    answer_tokens: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f32,
}

impl TraceSpecArgs {
    fn spec(&self, seed: u64) -> TraceSpec {
        TraceSpec {
            shape: self.shape.shape(),
            total_tokens: self.tokens,
            chunk_size: self.chunk_size,
            num_sinks: self.sinks,
            sink_gain: self.sink_gain,
            local_cluster_size: self.cluster_size,
            num_answer_tokens: self.answer_tokens,
            answer_query: None,
            noise_std: self.noise_std,
            seed,
        }
    }
}

#[derive(Args)]
struct GenTraceArgs {
    #[command(flatten)]
    spec: TraceSpecArgs,
    #[arg(long)]
    seed: u64,
    /// Output trace path; a .json spec sidecar is written next to it.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Per-layer cache budget M [default: 256].
    #[arg(long)]
    budget_m: Option<usize>,
    /// Bucket count N; defaults to M / bucket capacity.
    #[arg(long)]
    buckets_n: Option<usize>,
    /// Bucket capacity B [default: 1].
    #[arg(long)]
    bucket_capacity_b: Option<usize>,
    /// Observation window r [default: 64].
    #[arg(long)]
    window_r: Option<usize>,
    /// Phase-1 retention ratio R [default: 0.5].
    #[arg(long)]
    phase1_ratio: Option<f64>,
    /// Page size C [default: 16].
    #[arg(long)]
    page_size_c: Option<usize>,
    /// Fraction of pages retrieved per query [default: 0.4].
    #[arg(long)]
    retrieval_ratio: Option<f64>,
    /// Sliding window of recent tokens added to every response context
    /// [default: 196].
    #[arg(long)]
    window: Option<usize>,
    /// [default: vsb]
    #[arg(long, value_enum)]
    compress_mode: Option<CompressModeArg>,
    /// [default: on-budget-exceeded]
    #[arg(long, value_enum)]
    compress_trigger: Option<TriggerArg>,
    /// Disable the 1/sqrt(d) attention scale when scoring.
    #[arg(long)]
    no_scale: bool,
    /// Score pages with roped mean keys (ablation).
    #[arg(long)]
    roped_mean_keys: bool,
    /// Rope question queries at the stream tip before scoring (ablation).
    #[arg(long)]
    roped_queries: bool,
    /// Engine config file (TOML mirroring the config fields); CLI flags
    /// override its values only where explicitly given.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CompressModeArg {
    Vsb,
    Topk,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum TriggerArg {
    AfterEachChunk,
    OnBudgetExceeded,
}

impl EngineArgs {
    fn config(&self, shape: ModelShape, seed: u64) -> Result<EngineConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
                toml::from_str::<EngineConfig>(&text)
                    .map_err(|e| format!("bad config {}: {e}", path.display()))?
            }
            None => EngineConfig::default(),
        };
        cfg.shape = shape;
        cfg.seed = seed;
        if let Some(m) = self.budget_m {
            cfg.vsb.budget_m = m;
        }
        if let Some(b) = self.bucket_capacity_b {
            cfg.vsb.bucket_capacity_b = b;
        }
        // Keep N * B = M coherent when the budget or capacity moves
        // without an explicit bucket count.
        match self.buckets_n {
            Some(n) => cfg.vsb.num_buckets_n = n,
            None if self.budget_m.is_some() || self.bucket_capacity_b.is_some() => {
                cfg.vsb.num_buckets_n = cfg.vsb.budget_m / cfg.vsb.bucket_capacity_b.max(1);
            }
            None => {}
        }
        if let Some(r) = self.window_r {
            cfg.vsb.window_r = r;
        }
        if let Some(r) = self.phase1_ratio {
            cfg.vsb.phase1_ratio_r = r;
        }
        if self.no_scale {
            cfg.vsb.scale_scores = false;
        }
        if let Some(c) = self.page_size_c {
            cfg.retrieval.page_size_c = c;
        }
        if let Some(r) = self.retrieval_ratio {
            cfg.retrieval.retrieval_ratio = r;
        }
        if let Some(w) = self.window {
            cfg.retrieval.sliding_window_tokens = w;
        }
        if self.roped_mean_keys {
            cfg.retrieval.roped_mean_keys = true;
        }
        if self.roped_queries {
            cfg.roped_queries = true;
        }
        if let Some(mode) = self.compress_mode {
            cfg.compress_mode = match mode {
                CompressModeArg::Vsb => CompressMode::Vsb,
                CompressModeArg::Topk => CompressMode::Topk,
            };
        }
        if let Some(trigger) = self.compress_trigger {
            cfg.compress_trigger = match trigger {
                TriggerArg::AfterEachChunk => CompressTrigger::AfterEachChunk,
                TriggerArg::OnBudgetExceeded => CompressTrigger::OnBudgetExceeded,
            };
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Input trace file.
    trace: PathBuf,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Oracle answer-set size; defaults to the planted answer count.
    #[arg(long)]
    answer_k: Option<usize>,
    /// JSON file with a raw head-major query row; overrides the trace's
    /// embedded question.
    #[arg(long)]
    query_json: Option<PathBuf>,
    /// Report output path (default: stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    spec: TraceSpecArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Comma-separated retrieval ratios.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.4, 0.6, 0.8, 1.0])]
    ratios: Vec<f64>,
    /// Comma-separated trace seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// CSV output path (default: stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn emit(output: &Option<PathBuf>, contents: &str) -> Result<(), String> {
    match output {
        Some(path) => {
            let path = resolve_output(path);
            std::fs::write(&path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
        }
        None => {
            println!("{contents}");
            Ok(())
        }
    }
}

/// Relative outputs land under KVSTREAM_OUT_DIR when it is set.
fn resolve_output(path: &PathBuf) -> PathBuf {
    match std::env::var_os("KVSTREAM_OUT_DIR") {
        Some(dir) if path.is_relative() => PathBuf::from(dir).join(path),
        _ => path.clone(),
    }
}

fn cmd_gen_trace(args: &GenTraceArgs) -> Result<(), (u8, String)> {
    let spec = args.spec.spec(args.seed);
    let trace = generate(&spec).map_err(|e| (EXIT_USAGE, e.to_string()))?;
    let out = resolve_output(&args.output);
    write_trace(&trace, &out).map_err(|e| (EXIT_DATA, e.to_string()))?;
    let sidecar = write_spec_sidecar(&spec, &out).map_err(|e| (EXIT_DATA, e.to_string()))?;
    eprintln!(
        "wrote {} ({} tokens) and {}",
        out.display(),
        trace.total_tokens(),
        sidecar.display()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<(), (u8, String)> {
    let trace = read_trace(&args.trace).map_err(|e| (EXIT_DATA, e.to_string()))?;
    let config = args
        .engine
        .config(trace.shape, args.seed)
        .map_err(|e| (EXIT_USAGE, e))?;
    let query = match &args.query_json {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| (EXIT_DATA, format!("cannot read {}: {e}", path.display())))?;
            let row: Vec<f32> = serde_json::from_str(&text)
                .map_err(|e| (EXIT_DATA, format!("bad query json: {e}")))?;
            if row.len() != trace.shape.token_width() {
                return Err((
                    EXIT_DATA,
                    format!(
                        "query row length {} != num_heads * head_dim ({})",
                        row.len(),
                        trace.shape.token_width()
                    ),
                ));
            }
            Some(QueryInput::broadcast(&row, &trace.shape))
        }
        None => None,
    };
    let started = Instant::now();
    let report = run_trace(&trace, config, query, args.answer_k)
        .map_err(|e| (EXIT_DATA, e.to_string()))?;
    eprintln!("run completed in {:.3}s", started.elapsed().as_secs_f64());
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(&args.output, &json).map_err(|e| (EXIT_DATA, e))
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), (u8, String)> {
    if args.ratios.is_empty() {
        return Err((EXIT_USAGE, "empty ratio grid".into()));
    }
    if args.seeds.is_empty() {
        return Err((EXIT_USAGE, "at least one --seeds value is required".into()));
    }
    let started = Instant::now();
    let mut lines = vec![sweep_csv_header()];
    for &ratio in &args.ratios {
        for &seed in &args.seeds {
            let spec = args.spec.spec(seed);
            let trace = generate(&spec).map_err(|e| (EXIT_USAGE, e.to_string()))?;
            let mut config = args
                .engine
                .config(trace.shape, seed)
                .map_err(|e| (EXIT_USAGE, e))?;
            config.retrieval.retrieval_ratio = ratio;
            let report =
                run_trace(&trace, config, None, None).map_err(|e| (EXIT_DATA, e.to_string()))?;
            lines.push(SweepRow::from_report(&report).to_csv());
        }
    }
    eprintln!(
        "sweep of {} grid points finished in {:.3}s",
        (lines.len() - 1),
        started.elapsed().as_secs_f64()
    );
    emit(&args.output, &lines.join("\n")).map_err(|e| (EXIT_DATA, e))
}

fn main() -> ExitCode {
    // clap exits 2 on bad usage by default; the contract reserves 2 for
    // data errors, so map usage failures to 1 here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenTrace(args) => cmd_gen_trace(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
