//! `stac`: generate synthetic attention traces, replay them through a cache
//! policy, and compare policies.
//!
//! Exit codes: 0 success, 1 usage, 2 trace or I/O error, 3 invalid
//! configuration, 4 invariant violation or nondeterminism.

mod policy_arg;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use stac_core::stats::StatsLine;
use stac_core::{
    collect_outputs, compare_outputs, load_trace, read_trace, run_stream, run_stream_with,
    write_text_trace, write_trace, CacheConfig, ChunkStats, Error, Motion, Policy, PolicyKind,
    ReplayOptions, SynthParams, SyntheticTrace, TraceError,
};

#[derive(Parser)]
#[command(
    name = "stac",
    version,
    about = "Spatio-temporal KV cache trace replay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic trace.
    Synth(SynthArgs),
    /// Replay a trace under one policy and stream per-chunk stats.
    Replay(ReplayArgs),
    /// Replay a trace under two policies and report output divergence.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    dh: usize,
    /// random_walk, orbit or revisit
    #[arg(long, default_value = "revisit")]
    motion: Motion,
    #[arg(long, default_value_t = 0.3)]
    spread: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write the JSON-lines text format instead of binary.
    #[arg(long)]
    text: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
    /// full, window or stac
    #[arg(long, default_value = "stac")]
    policy: PolicyKind,
    /// Window length in frames.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    g_cap: Option<usize>,
    #[arg(long)]
    e_cap: Option<usize>,
    #[arg(long)]
    knn_mult: Option<f64>,
    #[arg(long)]
    budget_mult: Option<f64>,
    #[arg(long)]
    chunk: Option<usize>,
    /// Window, anchor and retrieval fractions, e.g. 0.5,0.25,0.25
    #[arg(long, value_parser = policy_arg::parse_split)]
    split: Option<(f64, f64, f64)>,
    /// Round cached keys and values through float16.
    #[arg(long)]
    half: bool,
    /// Write the stats stream here instead of stdout.
    #[arg(long)]
    stats_out: Option<PathBuf>,
    /// Also write per-chunk rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Replay twice and fail if the stats differ.
    #[arg(long, conflicts_with = "timing")]
    seed_check: bool,
    #[arg(long)]
    no_audit: bool,
    /// Worker threads for per-channel parallelism (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Record wall-clock time per chunk (makes stats nondeterministic).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Reference policy, e.g. `full`
    #[arg(long, value_parser = policy_arg::parse_policy)]
    a: Policy,
    /// Candidate policy, e.g. `window-8` or `stac:budget=20,split=0.2/0.8/0`
    #[arg(long, value_parser = policy_arg::parse_policy)]
    b: Policy,
    /// Write the full report (per frame and per channel) as JSON.
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[arg(long)]
    no_audit: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Trace(String),
    Config(String),
    Invariant(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Trace(_) => 2,
            Self::Config(_) => 3,
            Self::Invariant(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Trace(m) | Self::Config(m) | Self::Invariant(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidConfig(_) | Error::ConfigMismatch(_) => Self::Config(msg),
            Error::InvariantViolation(_) => Self::Invariant(msg),
            _ => Self::Trace(msg),
        }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        Self::Trace(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::Trace(format!("i/o error: {e}"))
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Replay(a) => replay(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("stac: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn set_threads(threads: Option<usize>) -> Outcome {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Outcome {
    if a.tokens == 0 || a.layers == 0 || a.heads == 0 || a.dh == 0 {
        return Err(Failure::Config(
            "--tokens, --layers, --heads and --dh must be at least 1".into(),
        ));
    }
    if !(a.spread >= 0.0 && a.spread.is_finite()) {
        return Err(Failure::Config(format!(
            "--spread must be non-negative, got {}",
            a.spread
        )));
    }
    let gen = SyntheticTrace::new(SynthParams {
        seed: a.seed,
        frames: a.frames,
        tokens: a.tokens,
        layers: a.layers,
        heads: a.heads,
        d_h: a.dh,
        motion: a.motion,
        cluster_spread: a.spread,
    });
    let header = gen.header().clone();
    let records: Vec<_> = gen.collect();
    if a.text {
        write_text_trace(&a.out, &header, &records)?;
    } else {
        write_trace(&a.out, &header, &records)?;
    }
    Ok(())
}

fn replay_policy(a: &ReplayArgs) -> Policy {
    let mut cfg = CacheConfig::default();
    if let Some(v) = a.window {
        cfg.window_frames = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.voxel_size {
        cfg.voxel_size = v;
    }
    if let Some(v) = a.g_cap {
        cfg.g_cap = v;
    }
    if let Some(v) = a.e_cap {
        cfg.e_cap = v;
    }
    if let Some(v) = a.knn_mult {
        cfg.knn_radius_mult = v;
    }
    if let Some(v) = a.budget_mult {
        cfg.budget_multiplier = v;
    }
    if let Some(v) = a.chunk {
        cfg.chunk_size = v;
    }
    if let Some((w, an, r)) = a.split {
        (cfg.window_frac, cfg.anchor_frac, cfg.retrieve_frac) = (w, an, r);
    }
    cfg.half_precision = a.half;
    Policy {
        kind: a.policy,
        config: cfg,
    }
}

/// Flat per-chunk row for `--csv`.
#[derive(Serialize)]
struct CsvRow {
    chunk: usize,
    frame_start: u64,
    frame_end: u64,
    temporal_tokens: usize,
    spatial_tokens: usize,
    total_tokens: usize,
    attended_tokens: usize,
    active_cells: usize,
    bytes: u64,
    fused: u64,
    buffered: u64,
    aggregated: u64,
    re_merged: u64,
    dropped: u64,
    evicted: u64,
    discarded: u64,
    retrieval_requested: u64,
    returned_long_term: u64,
    returned_buffered: u64,
    spatial_mass_fraction: f64,
    half_saturations: u64,
    wall_ms: Option<f64>,
}

impl From<&ChunkStats> for CsvRow {
    fn from(c: &ChunkStats) -> Self {
        Self {
            chunk: c.chunk,
            frame_start: c.frame_start,
            frame_end: c.frame_end,
            temporal_tokens: c.temporal_tokens,
            spatial_tokens: c.spatial_tokens,
            total_tokens: c.total_tokens,
            attended_tokens: c.attended_tokens,
            active_cells: c.active_cells,
            bytes: c.bytes,
            fused: c.events.fused,
            buffered: c.events.buffered,
            aggregated: c.events.aggregated,
            re_merged: c.events.re_merged,
            dropped: c.events.dropped,
            evicted: c.events.evicted,
            discarded: c.events.discarded,
            retrieval_requested: c.retrieval.requested,
            returned_long_term: c.retrieval.returned_long_term,
            returned_buffered: c.retrieval.returned_buffered,
            spatial_mass_fraction: c.spatial_mass_fraction,
            half_saturations: c.half_saturations,
            wall_ms: c.wall_ms,
        }
    }
}

fn json_line(out: &mut dyn Write, line: &StatsLine) -> io::Result<String> {
    let s = serde_json::to_string(line).map_err(io::Error::other)?;
    writeln!(out, "{s}")?;
    out.flush()?;
    Ok(s)
}

fn replay(a: ReplayArgs) -> Outcome {
    set_threads(a.threads)?;
    let policy = replay_policy(&a);
    policy
        .validate()
        .map_err(|v| Failure::from(Error::InvalidConfig(v)))?;
    let options = ReplayOptions {
        audit: !a.no_audit,
        timing: a.timing,
    };

    let mut out: Box<dyn Write> = match &a.stats_out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut csv = match &a.csv {
        Some(p) => Some(csv::Writer::from_path(p).map_err(|e| Failure::Trace(e.to_string()))?),
        None => None,
    };

    let reader = read_trace(&a.trace)?;
    let header = reader.header().clone();
    let mut streamed = String::new();
    let stats = run_stream_with(&header, reader, policy.clone(), options, |report| {
        let line = json_line(&mut out, &StatsLine::Chunk(report.stats.clone()))
            .map_err(|e| Error::Trace(TraceError::Io(e)))?;
        streamed.push_str(&line);
        streamed.push('\n');
        if let Some(w) = csv.as_mut() {
            w.serialize(CsvRow::from(&report.stats))
                .and_then(|_| w.flush().map_err(Into::into))
                .map_err(|e| Error::Trace(TraceError::Io(io::Error::other(e))))?;
        }
        Ok(())
    })?;
    let summary = json_line(&mut out, &StatsLine::Summary(stats.summary.clone()))?;
    streamed.push_str(&summary);
    streamed.push('\n');

    if a.seed_check {
        let reader = read_trace(&a.trace)?;
        let again = run_stream(&header, reader, policy, options)?;
        if again.to_ndjson() != streamed {
            return Err(Failure::Invariant(
                "seed check: two replays produced different stats".into(),
            ));
        }
    }
    Ok(())
}

/// One-line overview printed to stdout by `compare`.
#[derive(Serialize)]
struct CompareSummary<'a> {
    policy_a: &'a str,
    policy_b: &'a str,
    frames: usize,
    mean_cosine: f64,
    mean_rel_l2: f64,
    max_rel_l2: f64,
    peak_total_tokens_a: usize,
    peak_total_tokens_b: usize,
}

fn compare(a: CompareArgs) -> Outcome {
    set_threads(a.threads)?;
    for p in [&a.a, &a.b] {
        p.validate()
            .map_err(|v| Failure::from(Error::InvalidConfig(v)))?;
    }
    let options = ReplayOptions {
        audit: !a.no_audit,
        timing: false,
    };
    let (header, records) = load_trace(&a.trace)?;
    let oa = collect_outputs(&header, &records, a.a.clone(), options)?;
    let ob = collect_outputs(&header, &records, a.b.clone(), options)?;
    let report = compare_outputs(&header, &oa, &ob)?;

    if let Some(path) = &a.report_out {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &report).map_err(io::Error::other)?;
        writeln!(w)?;
        w.flush()?;
    }
    let summary = CompareSummary {
        policy_a: &report.policy_a,
        policy_b: &report.policy_b,
        frames: report.per_frame.len(),
        mean_cosine: report.mean_cosine,
        mean_rel_l2: report.mean_rel_l2,
        max_rel_l2: report.max_rel_l2,
        peak_total_tokens_a: report.summary_a.peak_total_tokens,
        peak_total_tokens_b: report.summary_b.peak_total_tokens,
    };
    let mut stdout = io::stdout().lock();
    writeln!(
        stdout,
        "{}",
        serde_json::to_string(&summary).map_err(io::Error::other)?
    )?;
    Ok(())
}
