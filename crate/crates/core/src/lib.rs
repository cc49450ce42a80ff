//! Spatio-temporal KV-cache compression for streaming 3D reconstruction
//! transformers.
//!
//! A [`TemporalCache`] keeps the first frame, a sliding window of recent
//! frames and a set of high-scoring anchors. Tokens that fall out of it are
//! folded into a [`VoxelStore`], a Morton-keyed sparse voxel hash, and pulled
//! back in by spatial proximity when the camera returns. [`Pipeline`] drives
//! both over a recorded attention trace.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod kernel;
pub mod morton;
pub mod pipeline;
pub mod spatial;
pub mod stats;
pub mod synth;
pub mod temporal;
pub mod token;
pub mod trace;

pub use attention::{attend, build_chunk_mask, AttentionMask, AttentionResult};
pub use error::{Error, Result};
pub use kernel::{cosine, dot, half_roundtrip, masked_softmax, weighted_mean};
pub use morton::{morton_decode, morton_encode, VoxelCoord};
pub use pipeline::{
    allocate_budget, collect_outputs, compare, compare_outputs, output_divergence, run_stream,
    run_stream_with, Budget, ChunkReport, DivergenceReport, Pipeline, Policy, PolicyKind,
    ReplayOptions, StreamOutputs,
};
pub use spatial::{voxel_center, voxel_of, InsertEvent, SpatialParams, VoxelStore};
pub use stats::{ChunkStats, ReplayStats, ReplaySummary, StatsLine};
pub use synth::{synth_trace, Motion, SynthParams, SyntheticTrace};
pub use temporal::TemporalCache;
pub use token::{
    validate_config, CacheConfig, CachedToken, ConfigViolation, FrameTokens, Origin, Point3,
    TokenId, MERGED_FRAME,
};
pub use trace::{
    load_trace, read_trace, write_text_trace, write_trace, AnyTraceReader, TraceError, TraceHeader,
    TraceReader, TraceRecord, TraceWriter,
};
