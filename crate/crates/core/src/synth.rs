//! Seeded synthetic traces with spatial structure.
//!
//! The scene is a thin slab `[0, 0.5) × [0, 0.5) × [0, 0.05)`. A camera looks
//! at a point that moves along a path; each frame observes tokens scattered
//! over a square patch around that point, plus one positionless
//! "camera" token. Keys and values are drawn around per-cell archetypes
//! (cells of side [`ARCHETYPE_CELL`]), so tokens from the same cell are
//! cosine-similar, and each query points at the archetype of its own cell.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::token::Point3;
use crate::trace::{ChannelTensors, SceneExtent, TraceHeader, TraceRecord, TRACE_VERSION};

pub const SCENE_SIDE: f64 = 0.5;
pub const SCENE_DEPTH: f64 = 0.05;
pub const ARCHETYPE_CELL: f64 = 0.05;
/// Half the side of the square patch observed in one frame.
pub const VIEW_HALF: f64 = 0.05;
/// Logit a query assigns to a clean key of its own cell.
pub const QUERY_SHARPNESS: f64 = 8.0;
/// Frames per lap of the revisit loop.
pub const REVISIT_PERIOD: usize = 40;
/// Frames per lap of the orbit.
pub const ORBIT_PERIOD: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    RandomWalk,
    Orbit,
    Revisit,
}

impl FromStr for Motion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random_walk" | "random-walk" => Ok(Self::RandomWalk),
            "orbit" => Ok(Self::Orbit),
            "revisit" => Ok(Self::Revisit),
            other => Err(format!(
                "unknown motion '{other}' (random_walk, orbit, revisit)"
            )),
        }
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RandomWalk => "random_walk",
            Self::Orbit => "orbit",
            Self::Revisit => "revisit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub frames: usize,
    pub tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_h: usize,
    pub motion: Motion,
    pub cluster_spread: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 100,
            tokens: 16,
            layers: 2,
            heads: 2,
            d_h: 16,
            motion: Motion::Revisit,
            cluster_spread: 0.3,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5eed, |acc, &p| splitmix(acc ^ splitmix(p)))
}

const TAG_PATH: u64 = 1;
const TAG_FRAME: u64 = 2;
const TAG_CELL: u64 = 3;
const TAG_CAMERA: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Region {
    Cell([i64; 3]),
    Camera,
}

struct Archetype {
    key: Vec<f64>,
    value: Vec<f64>,
}

/// Streaming generator; yields one record per frame.
pub struct SyntheticTrace {
    params: SynthParams,
    header: TraceHeader,
    frame: usize,
    path_rng: ChaCha8Rng,
    look_at: [f64; 2],
    archetypes: HashMap<(usize, Region), Archetype>,
}

impl SyntheticTrace {
    pub fn new(params: SynthParams) -> Self {
        let header = TraceHeader {
            version: TRACE_VERSION,
            layers: params.layers,
            heads: params.heads,
            d_h: params.d_h,
            tokens_per_frame: params.tokens,
            frame_count: params.frames,
            has_positions: true,
            scene_extent: Some(SceneExtent {
                min: [0.0; 3],
                max: [SCENE_SIDE, SCENE_SIDE, SCENE_DEPTH],
            }),
            generator_seed: Some(params.seed),
        };
        let path_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[params.seed, TAG_PATH]));
        Self {
            params,
            header,
            frame: 0,
            path_rng,
            look_at: [SCENE_SIDE / 2.0; 2],
            archetypes: HashMap::new(),
        }
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    fn advance_camera(&mut self, t: usize) -> [f64; 2] {
        let lo = VIEW_HALF;
        let hi = SCENE_SIDE - VIEW_HALF;
        match self.params.motion {
            Motion::RandomWalk => {
                if t > 0 {
                    for c in &mut self.look_at {
                        let step: f64 = self.path_rng.sample(StandardNormal);
                        let mut x = *c + 0.02 * step;
                        // reflect at the walls
                        if x < lo {
                            x = 2.0 * lo - x;
                        }
                        if x > hi {
                            x = 2.0 * hi - x;
                        }
                        *c = x.clamp(lo, hi);
                    }
                }
                self.look_at
            }
            Motion::Orbit => {
                let a = TAU * (t % ORBIT_PERIOD) as f64 / ORBIT_PERIOD as f64;
                [0.25 + 0.15 * a.cos(), 0.25 + 0.15 * a.sin()]
            }
            Motion::Revisit => {
                let corners = [[0.1, 0.1], [0.4, 0.1], [0.4, 0.4], [0.1, 0.4]];
                let u = (t % REVISIT_PERIOD) as f64 / REVISIT_PERIOD as f64 * 4.0;
                let side = (u.floor() as usize).min(3);
                let f = u - side as f64;
                let (a, b) = (corners[side], corners[(side + 1) % 4]);
                [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
            }
        }
    }

    fn archetype(&mut self, channel: usize, region: Region) -> &Archetype {
        let d = self.params.d_h;
        let seed = self.params.seed;
        self.archetypes.entry((channel, region)).or_insert_with(|| {
            let parts = match region {
                Region::Cell([x, y, z]) => {
                    vec![seed, TAG_CELL, channel as u64, x as u64, y as u64, z as u64]
                }
                Region::Camera => vec![seed, TAG_CAMERA, channel as u64],
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&parts));
            let mut key: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = key.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            key.iter_mut().for_each(|x| *x /= norm);
            let value = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            Archetype { key, value }
        })
    }

    fn make_record(&mut self) -> TraceRecord {
        let t = self.frame;
        self.frame += 1;
        let p = self.params.clone();
        let look_at = self.advance_camera(t);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[p.seed, TAG_FRAME, t as u64]));

        let camera_tokens = usize::from(p.tokens >= 2);
        let positions: Vec<Option<Point3>> = (0..p.tokens)
            .map(|j| {
                if j < camera_tokens {
                    return None;
                }
                let x = look_at[0] + rng.random_range(-VIEW_HALF..VIEW_HALF);
                let y = look_at[1] + rng.random_range(-VIEW_HALF..VIEW_HALF);
                let z = rng.random_range(0.005..SCENE_DEPTH - 0.005);
                let side = SCENE_SIDE - 1e-9;
                Some([x.clamp(0.0, side), y.clamp(0.0, side), z])
            })
            .collect();
        let regions: Vec<Region> = positions
            .iter()
            .map(|p| match p {
                None => Region::Camera,
                Some(p) => Region::Cell(p.map(|x| (x / ARCHETYPE_CELL).floor() as i64)),
            })
            .collect();

        let d = p.d_h;
        let sd = p.cluster_spread / (d as f64).sqrt();
        let q_scale = QUERY_SHARPNESS * (d as f64).sqrt();
        let mut channels = Vec::with_capacity(p.layers * p.heads);
        for c in 0..p.layers * p.heads {
            let mut tensors = ChannelTensors {
                queries: Vec::with_capacity(p.tokens),
                keys: Vec::with_capacity(p.tokens),
                values: Vec::with_capacity(p.tokens),
            };
            for &region in &regions {
                let (ak, av) = {
                    let a = self.archetype(c, region);
                    (a.key.clone(), a.value.clone())
                };
                let mut noisy = |base: &[f64], scale: f64, sd: f64| -> Vec<f64> {
                    base.iter()
                        .map(|x| {
                            let n: f64 = rng.sample(StandardNormal);
                            scale * (x + sd * n)
                        })
                        .collect()
                };
                tensors.keys.push(noisy(&ak, 1.0, sd));
                tensors.values.push(noisy(&av, 1.0, p.cluster_spread));
                tensors.queries.push(noisy(&ak, q_scale, sd));
            }
            channels.push(tensors);
        }
        TraceRecord {
            frame_idx: t as u64,
            channels,
            positions,
        }
    }
}

impl Iterator for SyntheticTrace {
    type Item = TraceRecord;

    fn next(&mut self) -> Option<TraceRecord> {
        (self.frame < self.params.frames).then(|| self.make_record())
    }
}

/// Generates a whole trace in memory.
pub fn synth_trace(params: &SynthParams) -> (TraceHeader, Vec<TraceRecord>) {
    let gen = SyntheticTrace::new(params.clone());
    let header = gen.header().clone();
    (header, gen.collect())
}
