//! Replay trace container.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes   "STACTRC1"
//! header     one line of JSON terminated by '\n'
//! record*    u64 payload length, then the payload:
//!              u64   frame_idx
//!              f64   q, k, v for every (layer, head), layer-major then
//!                    head-major; each an N×d_h row-major matrix
//!              u8    presence bitmap, ceil(N/8) bytes, token i at bit i%8
//!                    of byte i/8
//!              f64   N×3 positions (zeros where absent)
//! ```
//!
//! The text variant is JSON lines: the header object, then one record object
//! per line. It is meant for small hand-written fixtures.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token::{FrameTokens, Point3};

pub const TRACE_MAGIC: &[u8; 8] = b"STACTRC1";
pub const TRACE_VERSION: u32 = 1;
/// Conventional extension for binary traces.
pub const TRACE_EXTENSION: &str = "stactrace";

const MAX_HEADER_BYTES: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a trace file (bad magic bytes)")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported trace version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("record {record}: shape mismatch: {detail}")]
    ShapeMismatch { record: usize, detail: String },
    #[error("record {record}: file truncated")]
    Truncated { record: usize },
    #[error("record {record}: frame index {got} does not follow {prev}")]
    NonMonotone { record: usize, prev: u64, got: u64 },
    #[error("record {record}: non-finite value")]
    NonFinite { record: usize },
    #[error("record {record}: malformed: {detail}")]
    Malformed { record: usize, detail: String },
    #[error("unexpected data after the last of {frames} records")]
    TrailingData { frames: usize },
    #[error("writer finished after {written} of {expected} records")]
    Incomplete { written: usize, expected: usize },
}

type Result<T> = std::result::Result<T, TraceError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneExtent {
    pub min: Point3,
    pub max: Point3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub layers: usize,
    pub heads: usize,
    pub d_h: usize,
    pub tokens_per_frame: usize,
    pub frame_count: usize,
    pub has_positions: bool,
    pub scene_extent: Option<SceneExtent>,
    pub generator_seed: Option<u64>,
}

impl TraceHeader {
    /// Number of (layer, head) channels per record.
    pub fn channels(&self) -> usize {
        self.layers * self.heads
    }

    pub fn channel_index(&self, layer: usize, head: usize) -> usize {
        layer * self.heads + head
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TRACE_VERSION {
            return Err(TraceError::VersionMismatch {
                found: self.version,
                expected: TRACE_VERSION,
            });
        }
        let dims = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_h", self.d_h),
            ("tokens_per_frame", self.tokens_per_frame),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(TraceError::InvalidHeader(format!(
                    "{name} must be at least 1"
                )));
            }
        }
        if self.has_positions {
            if let Some(e) = &self.scene_extent {
                if e.min.iter().chain(&e.max).any(|x| !x.is_finite()) {
                    return Err(TraceError::InvalidHeader(
                        "scene extent is not finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn payload_len(&self) -> usize {
        let n = self.tokens_per_frame;
        8 + self.channels() * 3 * n * self.d_h * 8 + n.div_ceil(8) + n * 3 * 8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTensors {
    pub queries: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub frame_idx: u64,
    /// One entry per (layer, head), layer-major.
    pub channels: Vec<ChannelTensors>,
    pub positions: Vec<Option<Point3>>,
}

impl TraceRecord {
    pub fn frame_tokens(&self, channel: usize) -> FrameTokens {
        let c = &self.channels[channel];
        FrameTokens {
            frame_idx: self.frame_idx,
            queries: c.queries.clone(),
            keys: c.keys.clone(),
            values: c.values.clone(),
            positions: self.positions.clone(),
        }
    }

    pub fn check(&self, header: &TraceHeader, record: usize) -> Result<()> {
        let bad = |detail: String| Err(TraceError::ShapeMismatch { record, detail });
        let n = header.tokens_per_frame;
        if self.channels.len() != header.channels() {
            return bad(format!(
                "{} channels, header says {}",
                self.channels.len(),
                header.channels()
            ));
        }
        if self.positions.len() != n {
            return bad(format!(
                "{} positions, header says {n}",
                self.positions.len()
            ));
        }
        for c in &self.channels {
            for m in [&c.queries, &c.keys, &c.values] {
                if m.len() != n {
                    return bad(format!("{} rows, header says {n}", m.len()));
                }
                if let Some(row) = m.iter().find(|r| r.len() != header.d_h) {
                    return bad(format!(
                        "row of width {}, header says {}",
                        row.len(),
                        header.d_h
                    ));
                }
            }
        }
        let finite = self
            .channels
            .iter()
            .flat_map(|c| c.queries.iter().chain(&c.keys).chain(&c.values))
            .flatten()
            .chain(self.positions.iter().flatten().flatten())
            .all(|x| x.is_finite());
        if !finite {
            return Err(TraceError::NonFinite { record });
        }
        Ok(())
    }
}

/// Tracks record ordering shared by both readers and the writer.
#[derive(Debug, Default)]
struct Sequencer {
    count: usize,
    last: Option<u64>,
}

impl Sequencer {
    fn admit(&mut self, header: &TraceHeader, rec: &TraceRecord) -> Result<()> {
        let record = self.count;
        rec.check(header, record)?;
        if let Some(prev) = self.last {
            if rec.frame_idx <= prev {
                return Err(TraceError::NonMonotone {
                    record,
                    prev,
                    got: rec.frame_idx,
                });
            }
        }
        self.last = Some(rec.frame_idx);
        self.count += 1;
        Ok(())
    }
}

pub struct TraceWriter<W: Write> {
    out: W,
    header: TraceHeader,
    seq: Sequencer,
    buf: Vec<u8>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: TraceHeader) -> Result<Self> {
        header.validate()?;
        out.write_all(TRACE_MAGIC)?;
        serde_json::to_writer(&mut out, &header).map_err(|e| TraceError::Header(e.to_string()))?;
        out.write_all(b"\n")?;
        Ok(Self {
            out,
            header,
            seq: Sequencer::default(),
            buf: Vec::new(),
        })
    }

    pub fn write_record(&mut self, rec: &TraceRecord) -> Result<()> {
        if self.seq.count >= self.header.frame_count {
            return Err(TraceError::ShapeMismatch {
                record: self.seq.count,
                detail: format!("header declares only {} frames", self.header.frame_count),
            });
        }
        self.seq.admit(&self.header, rec)?;
        let n = self.header.tokens_per_frame;
        let buf = &mut self.buf;
        buf.clear();
        buf.extend_from_slice(&(self.header.payload_len() as u64).to_le_bytes());
        buf.extend_from_slice(&rec.frame_idx.to_le_bytes());
        for c in &rec.channels {
            for m in [&c.queries, &c.keys, &c.values] {
                for x in m.iter().flatten() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let mut bitmap = vec![0u8; n.div_ceil(8)];
        for (i, p) in rec.positions.iter().enumerate() {
            if p.is_some() {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        buf.extend_from_slice(&bitmap);
        for p in &rec.positions {
            for x in p.unwrap_or([0.0; 3]) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        self.out.write_all(buf)?;
        Ok(())
    }

    /// Flushes and checks that every declared record was written.
    pub fn finish(mut self) -> Result<W> {
        if self.seq.count != self.header.frame_count {
            return Err(TraceError::Incomplete {
                written: self.seq.count,
                expected: self.header.frame_count,
            });
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Streaming reader for the binary format.
pub struct TraceReader<R: Read> {
    input: R,
    header: TraceHeader,
    seq: Sequencer,
    failed: bool,
    buf: Vec<u8>,
}

fn read_header_line<R: BufRead>(input: &mut R) -> Result<TraceHeader> {
    let mut line = Vec::new();
    input
        .take(MAX_HEADER_BYTES as u64)
        .read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(TraceError::Header("missing header line terminator".into()));
    }
    let header: TraceHeader =
        serde_json::from_slice(&line).map_err(|e| TraceError::Header(e.to_string()))?;
    header.validate()?;
    Ok(header)
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => TraceError::BadMagic,
            _ => e.into(),
        })?;
        if &magic != TRACE_MAGIC {
            return Err(TraceError::BadMagic);
        }
        let header = read_header_line(&mut input)?;
        Ok(Self {
            input,
            header,
            seq: Sequencer::default(),
            failed: false,
            buf: Vec::new(),
        })
    }
}

impl<R: Read> TraceReader<R> {
    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<TraceRecord> {
        let record = self.seq.count;
        let truncated = |e: io::Error| match e.kind() {
            io::ErrorKind::UnexpectedEof => TraceError::Truncated { record },
            _ => e.into(),
        };
        let mut len = [0u8; 8];
        self.input.read_exact(&mut len).map_err(truncated)?;
        let len = u64::from_le_bytes(len) as usize;
        let expected = self.header.payload_len();
        if len != expected {
            return Err(TraceError::ShapeMismatch {
                record,
                detail: format!("payload of {len} bytes, header implies {expected}"),
            });
        }
        self.buf.resize(len, 0);
        self.input.read_exact(&mut self.buf).map_err(truncated)?;

        let h = &self.header;
        let n = h.tokens_per_frame;
        let mut cur = Cursor {
            buf: &self.buf,
            at: 0,
        };
        let frame_idx = cur.u64();
        let matrix = |cur: &mut Cursor| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..h.d_h).map(|_| cur.f64()).collect())
                .collect()
        };
        let channels = (0..h.channels())
            .map(|_| ChannelTensors {
                queries: matrix(&mut cur),
                keys: matrix(&mut cur),
                values: matrix(&mut cur),
            })
            .collect();
        let bitmap = cur.bytes(n.div_ceil(8)).to_vec();
        let positions = (0..n)
            .map(|i| {
                let p = [cur.f64(), cur.f64(), cur.f64()];
                (bitmap[i / 8] >> (i % 8) & 1 == 1).then_some(p)
            })
            .collect();
        let rec = TraceRecord {
            frame_idx,
            channels,
            positions,
        };
        self.seq.admit(&self.header, &rec)?;
        Ok(rec)
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.seq.count == self.header.frame_count {
            let mut probe = [0u8; 1];
            return match self.input.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => {
                    self.failed = true;
                    Some(Err(TraceError::TrailingData {
                        frames: self.header.frame_count,
                    }))
                }
                Err(e) => {
                    self.failed = true;
                    Some(Err(e.into()))
                }
            };
        }
        let r = self.read_record();
        self.failed = r.is_err();
        Some(r)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn bytes(&mut self, n: usize) -> &[u8] {
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        s
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.bytes(8).try_into().expect("8 bytes"))
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.bytes(8).try_into().expect("8 bytes"))
    }
}

/// Streaming reader for the JSON-lines format.
pub struct TextTraceReader<R: BufRead> {
    lines: io::Lines<R>,
    header: TraceHeader,
    seq: Sequencer,
    failed: bool,
}

impl<R: BufRead> TextTraceReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let header = read_header_line(&mut input)?;
        Ok(Self {
            lines: input.lines(),
            header,
            seq: Sequencer::default(),
            failed: false,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }
}

impl<R: BufRead> Iterator for TextTraceReader<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let record = self.seq.count;
        let line = loop {
            match self.lines.next() {
                Some(Ok(l)) if l.trim().is_empty() => continue,
                other => break other,
            }
        };
        let r = match line {
            None if record == self.header.frame_count => return None,
            None => Err(TraceError::Truncated { record }),
            Some(Err(e)) => Err(e.into()),
            Some(Ok(_)) if record == self.header.frame_count => Err(TraceError::TrailingData {
                frames: self.header.frame_count,
            }),
            Some(Ok(l)) => serde_json::from_str::<TraceRecord>(&l)
                .map_err(|e| TraceError::Malformed {
                    record,
                    detail: e.to_string(),
                })
                .and_then(|rec| self.seq.admit(&self.header, &rec).map(|_| rec)),
        };
        self.failed = r.is_err();
        Some(r)
    }
}

/// Either trace format, detected from the first bytes of the file.
pub enum AnyTraceReader {
    Binary(TraceReader<BufReader<File>>),
    Text(TextTraceReader<BufReader<File>>),
}

impl AnyTraceReader {
    pub fn header(&self) -> &TraceHeader {
        match self {
            Self::Binary(r) => r.header(),
            Self::Text(r) => r.header(),
        }
    }
}

impl Iterator for AnyTraceReader {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            Self::Binary(r) => r.next(),
            Self::Text(r) => r.next(),
        }
    }
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<AnyTraceReader> {
    let mut input = BufReader::new(File::open(path)?);
    let head = input.fill_buf()?;
    if head.starts_with(TRACE_MAGIC) {
        Ok(AnyTraceReader::Binary(TraceReader::new(input)?))
    } else if head.first() == Some(&b'{') {
        Ok(AnyTraceReader::Text(TextTraceReader::new(input)?))
    } else {
        Err(TraceError::BadMagic)
    }
}

pub fn write_trace<'a>(
    path: impl AsRef<Path>,
    header: &TraceHeader,
    records: impl IntoIterator<Item = &'a TraceRecord>,
) -> Result<()> {
    let mut w = TraceWriter::new(BufWriter::new(File::create(path)?), header.clone())?;
    for r in records {
        w.write_record(r)?;
    }
    w.finish()?;
    Ok(())
}

pub fn write_text_trace<'a>(
    path: impl AsRef<Path>,
    header: &TraceHeader,
    records: impl IntoIterator<Item = &'a TraceRecord>,
) -> Result<()> {
    header.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    let json = |e: serde_json::Error| TraceError::Header(e.to_string());
    serde_json::to_writer(&mut out, header).map_err(json)?;
    out.write_all(b"\n")?;
    let mut seq = Sequencer::default();
    for r in records {
        seq.admit(header, r)?;
        serde_json::to_writer(&mut out, r).map_err(json)?;
        out.write_all(b"\n")?;
    }
    if seq.count != header.frame_count {
        return Err(TraceError::Incomplete {
            written: seq.count,
            expected: header.frame_count,
        });
    }
    out.flush()?;
    Ok(())
}

/// Reads an entire trace into memory.
pub fn load_trace(path: impl AsRef<Path>) -> Result<(TraceHeader, Vec<TraceRecord>)> {
    let reader = read_trace(path)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}
