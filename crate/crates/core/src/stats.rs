//! Replay measurements.
//!
//! Token counts are per (layer, head) channel, taking the maximum across
//! channels; byte estimates cover all channels. Bytes assume 2-byte scalars
//! for both key and value regardless of the half-precision emulation flag.

use serde::{Deserialize, Serialize};

/// Upper edges of the score histogram buckets; a final bucket is unbounded.
pub const SCORE_BUCKET_EDGES: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

pub const BYTES_PER_SCALAR: usize = 2;

pub fn token_bytes(tokens: usize, d_h: usize) -> u64 {
    (tokens * d_h * 2 * BYTES_PER_SCALAR) as u64
}

pub fn score_bucket(score: f64) -> usize {
    SCORE_BUCKET_EDGES
        .iter()
        .position(|&e| score < e)
        .unwrap_or(SCORE_BUCKET_EDGES.len())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub fused: u64,
    pub buffered: u64,
    pub aggregated: u64,
    pub re_merged: u64,
    pub dropped: u64,
    /// Tokens that left the temporal cache.
    pub evicted: u64,
    /// Evicted tokens thrown away outright (window policy).
    pub discarded: u64,
}

impl EventCounts {
    pub fn add(&mut self, o: &EventCounts) {
        self.fused += o.fused;
        self.buffered += o.buffered;
        self.aggregated += o.aggregated;
        self.re_merged += o.re_merged;
        self.dropped += o.dropped;
        self.evicted += o.evicted;
        self.discarded += o.discarded;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalCounts {
    pub requested: u64,
    pub returned_long_term: u64,
    pub returned_buffered: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreHistograms {
    pub reference: Vec<u64>,
    pub window: Vec<u64>,
    pub anchor: Vec<u64>,
}

impl ScoreHistograms {
    pub fn empty() -> Self {
        let b = vec![0; SCORE_BUCKET_EDGES.len() + 1];
        Self {
            reference: b.clone(),
            window: b.clone(),
            anchor: b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkStats {
    pub chunk: usize,
    pub frame_start: u64,
    pub frame_end: u64,
    pub temporal_tokens: usize,
    pub spatial_tokens: usize,
    pub total_tokens: usize,
    /// Keys visible to the chunk's attention (cache, retrieval and chunk).
    pub attended_tokens: usize,
    pub active_cells: usize,
    pub bytes: u64,
    pub events: EventCounts,
    pub retrieval: RetrievalCounts,
    /// Share of all attention mass that landed on retrieved spatial keys.
    pub spatial_mass_fraction: f64,
    pub score_histograms: ScoreHistograms,
    /// `hist[k]` = active cells holding `k` tokens, summed over channels.
    pub occupancy_histogram: Vec<u64>,
    pub half_saturations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub policy: String,
    pub frames: usize,
    pub chunks: usize,
    pub tokens_per_frame: usize,
    pub channels: usize,
    pub peak_temporal_tokens: usize,
    pub peak_spatial_tokens: usize,
    pub peak_total_tokens: usize,
    pub peak_attended_tokens: usize,
    pub peak_bytes: u64,
    pub final_total_tokens: usize,
    /// Tokens a full cache would hold after the last frame.
    pub full_cache_tokens: usize,
    /// `full_cache_tokens / peak_total_tokens`.
    pub ratio_vs_full: f64,
    pub events: EventCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_chunk_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub chunks: Vec<ChunkStats>,
    pub summary: ReplaySummary,
}

/// One line of the stats stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StatsLine {
    Chunk(ChunkStats),
    Summary(ReplaySummary),
}

impl ReplayStats {
    /// The line-delimited JSON stream: one object per chunk, then the summary.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for c in &self.chunks {
            out.push_str(
                &serde_json::to_string(&StatsLine::Chunk(c.clone())).expect("serializable"),
            );
            out.push('\n');
        }
        out.push_str(
            &serde_json::to_string(&StatsLine::Summary(self.summary.clone()))
                .expect("serializable"),
        );
        out.push('\n');
        out
    }
}
