//! Chunked streaming replay over every (layer, head) channel of a trace.
//!
//! The first frame is processed alone and becomes the reference set; later
//! frames are grouped into chunks of `chunk_size`. For each chunk and channel
//! the keys are assembled as `[temporal cache ∥ spatial retrieval ∥ chunk]`,
//! attended bidirectionally within the chunk, and then scores, window,
//! anchors and the voxel store are updated. Channels are independent and run
//! in parallel; chunk boundaries are barriers.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, build_chunk_mask};
use crate::error::{Error, Result};
use crate::spatial::{SpatialParams, VoxelStore};
use crate::stats::{
    score_bucket, token_bytes, ChunkStats, EventCounts, ReplayStats, ReplaySummary,
    RetrievalCounts, ScoreHistograms,
};
use crate::temporal::TemporalCache;
use crate::token::{validate_config, CacheConfig, ConfigViolation, FrameTokens, Origin, Point3};
use crate::trace::{TraceError, TraceHeader, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Keep every key and value.
    Full,
    /// Reference frame plus the last `window_frames` frames.
    Window,
    Stac,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Window => "window",
            Self::Stac => "stac",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            "window" => Ok(Self::Window),
            "stac" => Ok(Self::Stac),
            other => Err(format!("unknown policy '{other}' (full, window, stac)")),
        }
    }
}

/// A cache policy. `Full` only reads `chunk_size` and `half_precision` from
/// the config; `Window` additionally reads `window_frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    pub config: CacheConfig,
}

impl Policy {
    pub fn full() -> Self {
        Self {
            kind: PolicyKind::Full,
            config: CacheConfig::default(),
        }
    }

    pub fn window(frames: usize) -> Self {
        Self {
            kind: PolicyKind::Window,
            config: CacheConfig {
                window_frames: frames,
                ..CacheConfig::default()
            },
        }
    }

    pub fn stac(config: CacheConfig) -> Self {
        Self {
            kind: PolicyKind::Stac,
            config,
        }
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.config.chunk_size = chunk_size;
        self
    }

    pub fn chunk_size(&self) -> usize {
        self.config.chunk_size
    }

    pub fn label(&self) -> String {
        match self.kind {
            PolicyKind::Window => format!("window-{}", self.config.window_frames),
            k => k.to_string(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<ConfigViolation>> {
        match self.kind {
            PolicyKind::Stac => validate_config(&self.config),
            kind => {
                let mut v = Vec::new();
                if self.config.chunk_size < 1 {
                    v.push(ConfigViolation::ChunkSize);
                }
                if kind == PolicyKind::Window && self.config.window_frames < 1 {
                    v.push(ConfigViolation::WindowFrames);
                }
                if v.is_empty() {
                    Ok(())
                } else {
                    Err(v)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub window_tokens: usize,
    pub anchor_tokens: usize,
    pub retrieve_tokens: usize,
}

/// Splits `budget_multiplier · N` tokens (on top of the reference frame)
/// between the window, the anchors and spatial retrieval.
pub fn allocate_budget(cfg: &CacheConfig, tokens_per_frame: usize) -> Result<Budget> {
    validate_config(cfg).map_err(Error::InvalidConfig)?;
    let total = cfg.budget_multiplier * tokens_per_frame as f64;
    let share = |f: f64| (f * total + 1e-9).floor() as usize;
    let budget = Budget {
        window_tokens: share(cfg.window_frac),
        anchor_tokens: share(cfg.anchor_frac),
        retrieve_tokens: share(cfg.retrieve_frac),
    };
    if cfg.window_frames * tokens_per_frame > budget.window_tokens {
        return Err(Error::InvalidConfig(vec![
            ConfigViolation::WindowExceedsShare {
                window_frames: cfg.window_frames,
                share: budget.window_tokens as f64 / tokens_per_frame as f64,
            },
        ]));
    }
    Ok(budget)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Run the invariant audits after every chunk.
    pub audit: bool,
    /// Record wall-clock time per chunk. Makes stats nondeterministic.
    pub timing: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            audit: true,
            timing: false,
        }
    }
}

#[derive(Debug, Clone)]
struct Channel {
    temporal: TemporalCache,
    spatial: Option<VoxelStore>,
    produced: u64,
    discarded: u64,
}

#[derive(Debug, Default)]
struct ChannelStep {
    outputs: Vec<Vec<f64>>,
    attended: usize,
    retrieved_long_term: u64,
    retrieved_buffered: u64,
    spatial_mass: f64,
    total_mass: f64,
    events: EventCounts,
}

/// Result of processing one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkReport {
    pub frames: Vec<u64>,
    /// `outputs[channel][query]`, queries in frame-then-token order.
    pub outputs: Vec<Vec<Vec<f64>>>,
    pub stats: ChunkStats,
}

pub struct Pipeline {
    policy: Policy,
    header: TraceHeader,
    budget: Option<Budget>,
    options: ReplayOptions,
    channels: Vec<Channel>,
    chunks_done: usize,
    last_frame: Option<u64>,
}

impl Pipeline {
    pub fn new(header: &TraceHeader, policy: Policy, options: ReplayOptions) -> Result<Self> {
        header.validate()?;
        policy.validate().map_err(Error::InvalidConfig)?;
        let cfg = &policy.config;
        let n = header.tokens_per_frame;
        let budget = match policy.kind {
            PolicyKind::Stac => Some(allocate_budget(cfg, n)?),
            _ => None,
        };
        let channel = match policy.kind {
            PolicyKind::Full => Channel {
                temporal: TemporalCache::new(cfg.gamma, usize::MAX, 0),
                spatial: None,
                produced: 0,
                discarded: 0,
            },
            PolicyKind::Window => Channel {
                temporal: TemporalCache::new(cfg.gamma, cfg.window_frames, 0),
                spatial: None,
                produced: 0,
                discarded: 0,
            },
            PolicyKind::Stac => Channel {
                temporal: TemporalCache::new(
                    cfg.gamma,
                    cfg.window_frames,
                    budget.expect("stac has a budget").anchor_tokens,
                ),
                spatial: Some(VoxelStore::new(SpatialParams::from(cfg))),
                produced: 0,
                discarded: 0,
            },
        };
        let channel = Channel {
            temporal: channel.temporal.with_half_precision(cfg.half_precision),
            ..channel
        };
        Ok(Self {
            channels: vec![channel; header.channels()],
            policy,
            header: header.clone(),
            budget,
            options,
            chunks_done: 0,
            last_frame: None,
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn budget(&self) -> Option<Budget> {
        self.budget
    }

    pub fn temporal(&self, channel: usize) -> &TemporalCache {
        &self.channels[channel].temporal
    }

    pub fn spatial(&self, channel: usize) -> Option<&VoxelStore> {
        self.channels[channel].spatial.as_ref()
    }

    /// Whether the next chunk is the reference frame.
    pub fn awaiting_reference(&self) -> bool {
        self.chunks_done == 0
    }

    pub fn process_chunk(&mut self, frames: &[TraceRecord]) -> Result<ChunkReport> {
        let started = Instant::now();
        let is_reference = self.awaiting_reference();
        let limit = if is_reference {
            1
        } else {
            self.policy.chunk_size()
        };
        if frames.is_empty() || frames.len() > limit {
            return Err(Error::Precondition(format!(
                "chunk of {} frames (allowed 1..={limit})",
                frames.len()
            )));
        }
        let mut prev = self.last_frame;
        for (i, rec) in frames.iter().enumerate() {
            rec.check(&self.header, i)?;
            if let Some(p) = prev {
                if rec.frame_idx <= p {
                    return Err(Error::NonMonotoneFrames {
                        prev: p as i64,
                        got: rec.frame_idx as i64,
                    });
                }
            }
            prev = Some(rec.frame_idx);
        }

        let quota = match (self.policy.kind, self.budget) {
            (PolicyKind::Stac, Some(b)) => b.retrieve_tokens,
            _ => 0,
        };
        let ctx = StepContext {
            quota,
            is_reference,
            audit: self.options.audit,
            d_h: self.header.d_h,
            n: self.header.tokens_per_frame,
            budget: self.budget,
            kind: self.policy.kind,
            config: &self.policy.config,
        };
        let steps: Vec<ChannelStep> = self
            .channels
            .par_iter_mut()
            .enumerate()
            .map(|(c, ch)| {
                let tokens: Vec<FrameTokens> = frames.iter().map(|r| r.frame_tokens(c)).collect();
                step(ch, &tokens, &ctx)
            })
            .collect::<Result<_>>()?;

        self.last_frame = prev;
        let chunk = self.chunks_done;
        self.chunks_done += 1;
        let mut stats = self.collect_stats(chunk, frames, &steps);
        if self.options.timing {
            stats.wall_ms = Some(started.elapsed().as_secs_f64() * 1e3);
        }
        Ok(ChunkReport {
            frames: frames.iter().map(|r| r.frame_idx).collect(),
            outputs: steps.into_iter().map(|s| s.outputs).collect(),
            stats,
        })
    }

    fn collect_stats(
        &self,
        chunk: usize,
        frames: &[TraceRecord],
        steps: &[ChannelStep],
    ) -> ChunkStats {
        let mut events = EventCounts::default();
        let mut retrieval = RetrievalCounts::default();
        let (mut spatial_mass, mut total_mass) = (0.0, 0.0);
        for s in steps {
            events.add(&s.events);
            retrieval.returned_long_term += s.retrieved_long_term;
            retrieval.returned_buffered += s.retrieved_buffered;
            spatial_mass += s.spatial_mass;
            total_mass += s.total_mass;
        }
        if !self.awaiting_reference() && chunk > 0 {
            if let Some(b) = self.budget {
                retrieval.requested = (b.retrieve_tokens * self.channels.len()) as u64;
            }
        }

        let mut hist = ScoreHistograms::empty();
        let mut occupancy: Vec<u64> = Vec::new();
        let (mut temporal, mut spatial, mut total, mut cells) = (0, 0, 0, 0);
        let mut bytes = 0;
        let mut half_saturations = 0;
        for ch in &self.channels {
            for t in ch.temporal.snapshot() {
                let bucket = score_bucket(t.score);
                match t.origin {
                    Origin::Reference => hist.reference[bucket] += 1,
                    Origin::Anchor => hist.anchor[bucket] += 1,
                    _ => hist.window[bucket] += 1,
                }
            }
            let tl = ch.temporal.len();
            let sl = ch.spatial.as_ref().map_or(0, VoxelStore::token_count);
            temporal = temporal.max(tl);
            spatial = spatial.max(sl);
            total = total.max(tl + sl);
            bytes += token_bytes(tl + sl, self.header.d_h);
            half_saturations += ch.temporal.half_saturations();
            if let Some(store) = &ch.spatial {
                cells = cells.max(store.active_cells());
                half_saturations += store.half_saturations();
                let h = store.occupancy_histogram();
                if occupancy.len() < h.len() {
                    occupancy.resize(h.len(), 0);
                }
                occupancy.iter_mut().zip(h).for_each(|(a, b)| *a += b);
            }
        }
        ChunkStats {
            chunk,
            frame_start: frames[0].frame_idx,
            frame_end: frames[frames.len() - 1].frame_idx,
            temporal_tokens: temporal,
            spatial_tokens: spatial,
            total_tokens: total,
            attended_tokens: steps.iter().map(|s| s.attended).max().unwrap_or(0),
            active_cells: cells,
            bytes,
            events,
            retrieval,
            spatial_mass_fraction: if total_mass > 0.0 {
                spatial_mass / total_mass
            } else {
                0.0
            },
            score_histograms: hist,
            occupancy_histogram: occupancy,
            half_saturations,
            wall_ms: None,
        }
    }
}

struct StepContext<'a> {
    quota: usize,
    is_reference: bool,
    audit: bool,
    d_h: usize,
    n: usize,
    budget: Option<Budget>,
    kind: PolicyKind,
    config: &'a CacheConfig,
}

fn violation(msg: String) -> Error {
    Error::InvariantViolation(msg)
}

fn step(ch: &mut Channel, frames: &[FrameTokens], ctx: &StepContext<'_>) -> Result<ChannelStep> {
    let chunk_min = frames[0].frame_idx as i64;
    let chunk_max = frames[frames.len() - 1].frame_idx as i64;

    let retrieved = match &ch.spatial {
        Some(store) if ctx.quota > 0 => {
            let visible: Vec<Point3> = frames
                .iter()
                .flat_map(|f| f.positions.iter().flatten().copied())
                .collect();
            store.retrieve(&visible, ctx.quota)?
        }
        _ => Vec::new(),
    };
    let snapshot = ch.temporal.snapshot();
    let n_temp = snapshot.len();
    let n_spat = retrieved.len();
    let chunk_len: usize = frames.iter().map(FrameTokens::len).sum();

    if ctx.audit {
        if n_spat > ctx.quota {
            return Err(violation(format!(
                "retrieved {n_spat} tokens over a quota of {}",
                ctx.quota
            )));
        }
        // keys from outside the chunk must predate it
        if let Some(t) = snapshot
            .iter()
            .copied()
            .chain(&retrieved)
            .find(|t| t.id.frame_idx >= chunk_min)
        {
            return Err(violation(format!(
                "cached key {:?} does not precede chunk starting at frame {chunk_min}",
                t.id
            )));
        }
    }

    let keys: Vec<&[f64]> = snapshot
        .iter()
        .map(|t| t.key.as_slice())
        .chain(retrieved.iter().map(|t| t.key.as_slice()))
        .chain(frames.iter().flat_map(|f| f.keys.iter().map(Vec::as_slice)))
        .collect();
    let values: Vec<&[f64]> = snapshot
        .iter()
        .map(|t| t.value.as_slice())
        .chain(retrieved.iter().map(|t| t.value.as_slice()))
        .chain(
            frames
                .iter()
                .flat_map(|f| f.values.iter().map(Vec::as_slice)),
        )
        .collect();
    let counts: Vec<u64> = snapshot
        .iter()
        .map(|t| t.count)
        .chain(retrieved.iter().map(|t| t.count))
        .chain(std::iter::repeat_n(1, chunk_len))
        .collect();
    let queries: Vec<&[f64]> = frames
        .iter()
        .flat_map(|f| f.queries.iter().map(Vec::as_slice))
        .collect();
    let mask = build_chunk_mask(n_temp + n_spat, chunk_len);
    let result = attend(&queries, &keys, &values, &counts, &mask, ctx.d_h)?;
    drop(snapshot);

    let total_mass: f64 = result.mass.iter().sum();
    if ctx.audit && (total_mass - queries.len() as f64).abs() > 1e-9 {
        return Err(violation(format!(
            "attention mass {total_mass} does not match {} queries",
            queries.len()
        )));
    }
    let (temp_mass, rest) = result.mass.split_at(n_temp);
    let (spat_mass, chunk_mass) = rest.split_at(n_spat);

    let mut out = ChannelStep {
        attended: keys.len(),
        retrieved_long_term: retrieved
            .iter()
            .filter(|t| t.origin == Origin::Merged)
            .count() as u64,
        retrieved_buffered: retrieved
            .iter()
            .filter(|t| t.origin == Origin::Buffered)
            .count() as u64,
        spatial_mass: spat_mass.iter().sum(),
        total_mass,
        ..Default::default()
    };

    if ctx.is_reference {
        ch.temporal.register_reference(&frames[0])?;
    } else {
        ch.temporal.update_scores(temp_mass)?;
        let expelled = ch.temporal.ingest_scored(frames, chunk_mass)?;
        let evicted = ch.temporal.select_anchors(expelled);
        out.events.evicted = evicted.len() as u64;
        match &mut ch.spatial {
            Some(store) => {
                let before = store.counters();
                for t in evicted {
                    store.insert_evicted(t)?;
                }
                let after = store.counters();
                out.events.fused = after.fused - before.fused;
                out.events.buffered = after.buffered - before.buffered;
                out.events.aggregated = after.aggregated - before.aggregated;
                out.events.re_merged = after.re_merged - before.re_merged;
                out.events.dropped = after.dropped - before.dropped;
            }
            None => {
                ch.discarded += out.events.evicted;
                out.events.discarded = out.events.evicted;
            }
        }
    }
    ch.produced += chunk_len as u64;
    out.outputs = result.outputs;

    if ctx.audit {
        audit_channel(ch, ctx, chunk_max)?;
    }
    Ok(out)
}

fn audit_channel(ch: &Channel, ctx: &StepContext<'_>, chunk_max: i64) -> Result<()> {
    let temporal = &ch.temporal;
    for t in temporal.snapshot() {
        t.check()?;
        if t.id.frame_idx > chunk_max {
            return Err(violation(format!("token {:?} from a future frame", t.id)));
        }
    }
    match (ctx.kind, ctx.budget) {
        (PolicyKind::Stac, Some(b)) => {
            if temporal.window_token_count() > b.window_tokens
                || temporal.anchors().len() > b.anchor_tokens
            {
                return Err(violation(format!(
                    "temporal budget exceeded: window {} / {}, anchors {} / {}",
                    temporal.window_token_count(),
                    b.window_tokens,
                    temporal.anchors().len(),
                    b.anchor_tokens
                )));
            }
        }
        (PolicyKind::Window, _)
            if temporal.window_frame_count() > ctx.config.window_frames
                || !temporal.anchors().is_empty() =>
        {
            return Err(violation(
                "window policy retained more than its window".into(),
            ));
        }
        _ => {}
    }

    let mut accounted = temporal.len() as u64 + ch.discarded;
    if let Some(store) = &ch.spatial {
        store.check_invariants()?;
        accounted += store.represented_count() + store.counters().dropped;
        let cfg = ctx.config;
        let bound = temporal.reference().len()
            + (cfg.budget_multiplier * ctx.n as f64).floor() as usize
            + store.active_cells() * (cfg.g_cap + cfg.e_cap);
        if temporal.len() + store.token_count() > bound {
            return Err(violation(format!(
                "cached tokens {} exceed the memory bound {bound}",
                temporal.len() + store.token_count()
            )));
        }
    }
    if accounted != ch.produced {
        return Err(violation(format!(
            "token conservation: {accounted} accounted for, {} produced",
            ch.produced
        )));
    }
    Ok(())
}

/// Splits a stream into the reference chunk and then `chunk_size` groups.
fn next_chunk_len(first: bool, chunk_size: usize) -> usize {
    if first {
        1
    } else {
        chunk_size
    }
}

/// Drives a pipeline over a record stream, handing every chunk report to
/// `sink`. Returns the collected stats.
pub fn run_stream_with<I, F>(
    header: &TraceHeader,
    records: I,
    policy: Policy,
    options: ReplayOptions,
    mut sink: F,
) -> Result<ReplayStats>
where
    I: IntoIterator<Item = std::result::Result<TraceRecord, TraceError>>,
    F: FnMut(&ChunkReport) -> Result<()>,
{
    let label = policy.label();
    let mut pipeline = Pipeline::new(header, policy, options)?;
    let chunk_size = pipeline.policy().chunk_size();
    let mut chunks = Vec::new();
    let mut pending: Vec<TraceRecord> = Vec::new();
    let mut frames = 0;
    let mut flush = |pipeline: &mut Pipeline, pending: &mut Vec<TraceRecord>| -> Result<()> {
        let report = pipeline.process_chunk(pending)?;
        pending.clear();
        sink(&report)?;
        chunks.push(report.stats);
        Ok(())
    };
    for rec in records {
        pending.push(rec?);
        frames += 1;
        if pending.len() == next_chunk_len(pipeline.awaiting_reference(), chunk_size) {
            flush(&mut pipeline, &mut pending)?;
        }
    }
    if !pending.is_empty() {
        flush(&mut pipeline, &mut pending)?;
    }
    Ok(summarize(header, label, frames, chunks))
}

pub fn run_stream<I>(
    header: &TraceHeader,
    records: I,
    policy: Policy,
    options: ReplayOptions,
) -> Result<ReplayStats>
where
    I: IntoIterator<Item = std::result::Result<TraceRecord, TraceError>>,
{
    run_stream_with(header, records, policy, options, |_| Ok(()))
}

fn summarize(
    header: &TraceHeader,
    policy: String,
    frames: usize,
    chunks: Vec<ChunkStats>,
) -> ReplayStats {
    let mut events = EventCounts::default();
    for c in &chunks {
        events.add(&c.events);
    }
    let peak = |f: fn(&ChunkStats) -> usize| chunks.iter().map(f).max().unwrap_or(0);
    let peak_total = peak(|c| c.total_tokens);
    let full = frames * header.tokens_per_frame;
    let timed: Vec<f64> = chunks.iter().filter_map(|c| c.wall_ms).collect();
    let summary = ReplaySummary {
        policy,
        frames,
        chunks: chunks.len(),
        tokens_per_frame: header.tokens_per_frame,
        channels: header.channels(),
        peak_temporal_tokens: peak(|c| c.temporal_tokens),
        peak_spatial_tokens: peak(|c| c.spatial_tokens),
        peak_total_tokens: peak_total,
        peak_attended_tokens: peak(|c| c.attended_tokens),
        peak_bytes: chunks.iter().map(|c| c.bytes).max().unwrap_or(0),
        final_total_tokens: chunks.last().map_or(0, |c| c.total_tokens),
        full_cache_tokens: full,
        ratio_vs_full: if peak_total > 0 {
            full as f64 / peak_total as f64
        } else {
            0.0
        },
        events,
        mean_chunk_ms: (!timed.is_empty()).then(|| timed.iter().sum::<f64>() / timed.len() as f64),
    };
    ReplayStats { chunks, summary }
}

/// Attention outputs of a whole replay: `frames[f][channel][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutputs {
    pub frame_ids: Vec<u64>,
    pub frames: Vec<Vec<Vec<Vec<f64>>>>,
    pub stats: ReplayStats,
}

/// Replays `records` and keeps every attention output.
pub fn collect_outputs(
    header: &TraceHeader,
    records: &[TraceRecord],
    policy: Policy,
    options: ReplayOptions,
) -> Result<StreamOutputs> {
    let n = header.tokens_per_frame;
    let mut frame_ids = Vec::with_capacity(records.len());
    let mut frames = Vec::with_capacity(records.len());
    let stats = run_stream_with(
        header,
        records.iter().cloned().map(Ok),
        policy,
        options,
        |report| {
            for (f, &id) in report.frames.iter().enumerate() {
                frame_ids.push(id);
                frames.push(
                    report
                        .outputs
                        .iter()
                        .map(|per_channel| per_channel[f * n..(f + 1) * n].to_vec())
                        .collect(),
                );
            }
            Ok(())
        },
    )?;
    Ok(StreamOutputs {
        frame_ids,
        frames,
        stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDivergence {
    pub frame: u64,
    pub mean_cosine: f64,
    pub mean_rel_l2: f64,
    pub max_rel_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDivergence {
    pub layer: usize,
    pub head: usize,
    pub mean_cosine: f64,
    pub mean_rel_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub policy_a: String,
    pub policy_b: String,
    pub mean_cosine: f64,
    pub mean_rel_l2: f64,
    pub max_rel_l2: f64,
    pub per_frame: Vec<FrameDivergence>,
    pub per_channel: Vec<ChannelDivergence>,
    pub summary_a: ReplaySummary,
    pub summary_b: ReplaySummary,
}

/// Cosine similarity and relative L2 error of `b` against reference `a`.
pub fn output_divergence(a: &[f64], b: &[f64]) -> (f64, f64) {
    if a == b {
        return (1.0, 0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let cos = if na > 0.0 && nb > 0.0 {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let rel = if na > 0.0 { diff / na } else { diff };
    (cos, rel)
}

pub fn compare_outputs(
    header: &TraceHeader,
    a: &StreamOutputs,
    b: &StreamOutputs,
) -> Result<DivergenceReport> {
    if a.frame_ids != b.frame_ids {
        return Err(Error::ConfigMismatch(
            "the two replays cover different frames".into(),
        ));
    }
    let channels = header.channels();
    let mut per_channel = vec![(0.0, 0.0, 0usize); channels];
    let mut per_frame = Vec::with_capacity(a.frames.len());
    let (mut cos_sum, mut rel_sum, mut max_rel, mut count) = (0.0, 0.0, 0.0f64, 0usize);
    for ((&frame, fa), fb) in a.frame_ids.iter().zip(&a.frames).zip(&b.frames) {
        if fa.len() != channels || fb.len() != channels {
            return Err(Error::ConfigMismatch(format!(
                "frame {frame}: channel count differs"
            )));
        }
        let (mut fc, mut fr, mut fmax, mut fn_) = (0.0, 0.0, 0.0f64, 0usize);
        for (c, (ca, cb)) in fa.iter().zip(fb).enumerate() {
            if ca.len() != cb.len() {
                return Err(Error::ConfigMismatch(format!(
                    "frame {frame}: token count differs"
                )));
            }
            for (oa, ob) in ca.iter().zip(cb) {
                if oa.len() != ob.len() {
                    return Err(Error::ConfigMismatch(format!("frame {frame}: d_h differs")));
                }
                let (cos, rel) = output_divergence(oa, ob);
                fc += cos;
                fr += rel;
                fmax = fmax.max(rel);
                fn_ += 1;
                per_channel[c].0 += cos;
                per_channel[c].1 += rel;
                per_channel[c].2 += 1;
            }
        }
        cos_sum += fc;
        rel_sum += fr;
        max_rel = max_rel.max(fmax);
        count += fn_;
        let k = fn_.max(1) as f64;
        per_frame.push(FrameDivergence {
            frame,
            mean_cosine: fc / k,
            mean_rel_l2: fr / k,
            max_rel_l2: fmax,
        });
    }
    let k = count.max(1) as f64;
    Ok(DivergenceReport {
        policy_a: a.stats.summary.policy.clone(),
        policy_b: b.stats.summary.policy.clone(),
        mean_cosine: if count == 0 { 1.0 } else { cos_sum / k },
        mean_rel_l2: rel_sum / k,
        max_rel_l2: max_rel,
        per_frame,
        per_channel: per_channel
            .into_iter()
            .enumerate()
            .map(|(c, (cs, rs, n))| ChannelDivergence {
                layer: c / header.heads,
                head: c % header.heads,
                mean_cosine: if n == 0 { 1.0 } else { cs / n as f64 },
                mean_rel_l2: rs / n.max(1) as f64,
            })
            .collect(),
        summary_a: a.stats.summary.clone(),
        summary_b: b.stats.summary.clone(),
    })
}

/// Replays the same trace under two policies and measures how far their
/// attention outputs drift apart.
pub fn compare(
    header: &TraceHeader,
    records: &[TraceRecord],
    a: Policy,
    b: Policy,
    options: ReplayOptions,
) -> Result<DivergenceReport> {
    let oa = collect_outputs(header, records, a, options)?;
    let ob = collect_outputs(header, records, b, options)?;
    compare_outputs(header, &oa, &ob)
}
