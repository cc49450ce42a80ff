//! Token and configuration types shared by the caches, the attention engine
//! and the trace format.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Frame index used for merged tokens, which have no single source frame.
pub const MERGED_FRAME: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId {
    pub frame_idx: i64,
    pub token_idx: u64,
}

impl TokenId {
    pub fn new(frame_idx: i64, token_idx: u64) -> Self {
        Self {
            frame_idx,
            token_idx,
        }
    }

    pub fn merged(seq: u64) -> Self {
        Self::new(MERGED_FRAME, seq)
    }

    pub fn is_merged(&self) -> bool {
        self.frame_idx == MERGED_FRAME
    }
}

/// Where a cached token currently lives, or how it was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Fresh,
    Reference,
    Window,
    Anchor,
    Merged,
    Buffered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedToken {
    pub id: TokenId,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    /// Decayed cumulative attention mass.
    pub score: f64,
    pub position: Option<Point3>,
    /// Number of original tokens this one stands for.
    pub count: u64,
    /// Cumulative fusion weight.
    pub weight: f64,
    pub origin: Origin,
}

impl CachedToken {
    pub fn fresh(id: TokenId, key: Vec<f64>, value: Vec<f64>, position: Option<Point3>) -> Self {
        Self {
            id,
            key,
            value,
            score: 0.0,
            position,
            count: 1,
            weight: 1.0,
            origin: Origin::Fresh,
        }
    }

    /// Checks the per-token invariants that hold everywhere in the system.
    pub fn check(&self) -> Result<()> {
        let fail = |msg: &str| {
            Err(Error::InvariantViolation(format!(
                "token {:?}: {msg}",
                self.id
            )))
        };
        if self.count == 0 {
            return fail("count is zero");
        }
        if !(self.weight >= 1.0) {
            return fail("cumulative weight below 1");
        }
        if !(self.score >= 0.0) {
            return fail("negative or NaN score");
        }
        if self.origin != Origin::Merged && self.count != 1 {
            return fail("unmerged token with count != 1");
        }
        if let Some(p) = self.position {
            if p.iter().any(|x| !x.is_finite()) {
                return fail("non-finite position");
            }
        }
        Ok(())
    }
}

/// Projected queries, keys and values of one frame for one (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens {
    pub frame_idx: u64,
    pub queries: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub positions: Vec<Option<Point3>>,
}

impl FrameTokens {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn check_shape(&self) -> Result<()> {
        let n = self.keys.len();
        for got in [self.queries.len(), self.values.len(), self.positions.len()] {
            if got != n {
                return Err(Error::DimensionMismatch { expected: n, got });
            }
        }
        Ok(())
    }

    pub(crate) fn to_tokens(&self, origin: Origin) -> Vec<CachedToken> {
        (0..self.len())
            .map(|i| CachedToken {
                origin,
                ..CachedToken::fresh(
                    TokenId::new(self.frame_idx as i64, i as u64),
                    self.keys[i].clone(),
                    self.values[i].clone(),
                    self.positions[i],
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub voxel_size: f64,
    pub g_cap: usize,
    pub e_cap: usize,
    pub knn_radius_mult: f64,
    pub window_frames: usize,
    pub budget_multiplier: f64,
    pub window_frac: f64,
    pub anchor_frac: f64,
    pub retrieve_frac: f64,
    pub chunk_size: usize,
    pub half_precision: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            lambda: 0.8,
            voxel_size: 0.05,
            g_cap: 4,
            e_cap: 8,
            knn_radius_mult: 2.0,
            window_frames: 4,
            budget_multiplier: 8.0,
            window_frac: 0.5,
            anchor_frac: 0.25,
            retrieve_frac: 0.25,
            chunk_size: 4,
            half_precision: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigViolation {
    Gamma(f64),
    Lambda(f64),
    VoxelSize(f64),
    GCap,
    ECap,
    KnnRadius(f64),
    WindowFrames,
    Budget(f64),
    Fraction(&'static str, f64),
    FractionSum(f64),
    ChunkSize,
    WindowExceedsShare { window_frames: usize, share: f64 },
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gamma(g) => write!(f, "gamma out of (0,1): {g}"),
            Self::Lambda(l) => write!(f, "lambda out of (-1,1]: {l}"),
            Self::VoxelSize(v) => write!(f, "voxel size must be positive: {v}"),
            Self::GCap => f.write_str("g_cap must be at least 1"),
            Self::ECap => f.write_str("e_cap must be at least 1"),
            Self::KnnRadius(k) => write!(f, "knn radius multiplier must be non-negative: {k}"),
            Self::WindowFrames => f.write_str("window_frames must be at least 1"),
            Self::Budget(b) => write!(f, "budget multiplier must be positive: {b}"),
            Self::Fraction(name, v) => write!(f, "{name} out of [0,1]: {v}"),
            Self::FractionSum(s) => write!(f, "fractions sum ≠ 1: {s}"),
            Self::ChunkSize => f.write_str("chunk_size must be at least 1"),
            Self::WindowExceedsShare {
                window_frames,
                share,
            } => write!(
                f,
                "window of {window_frames} frames exceeds its budget share of {share} frames"
            ),
        }
    }
}

/// Collects every violated configuration invariant.
pub fn validate_config(c: &CacheConfig) -> Result<(), Vec<ConfigViolation>> {
    let mut v = Vec::new();
    if !(c.gamma > 0.0 && c.gamma < 1.0) {
        v.push(ConfigViolation::Gamma(c.gamma));
    }
    if !(c.lambda > -1.0 && c.lambda <= 1.0) {
        v.push(ConfigViolation::Lambda(c.lambda));
    }
    if !(c.voxel_size > 0.0 && c.voxel_size.is_finite()) {
        v.push(ConfigViolation::VoxelSize(c.voxel_size));
    }
    if c.g_cap < 1 {
        v.push(ConfigViolation::GCap);
    }
    if c.e_cap < 1 {
        v.push(ConfigViolation::ECap);
    }
    if !(c.knn_radius_mult >= 0.0 && c.knn_radius_mult.is_finite()) {
        v.push(ConfigViolation::KnnRadius(c.knn_radius_mult));
    }
    if c.window_frames < 1 {
        v.push(ConfigViolation::WindowFrames);
    }
    if !(c.budget_multiplier > 0.0 && c.budget_multiplier.is_finite()) {
        v.push(ConfigViolation::Budget(c.budget_multiplier));
    }
    let fractions = [
        ("window_frac", c.window_frac),
        ("anchor_frac", c.anchor_frac),
        ("retrieve_frac", c.retrieve_frac),
    ];
    for (name, f) in fractions {
        if !(0.0..=1.0).contains(&f) {
            v.push(ConfigViolation::Fraction(name, f));
        }
    }
    let sum = c.window_frac + c.anchor_frac + c.retrieve_frac;
    if !((sum - 1.0).abs() <= 1e-12) {
        v.push(ConfigViolation::FractionSum(sum));
    }
    if c.chunk_size < 1 {
        v.push(ConfigViolation::ChunkSize);
    }
    let share = c.window_frac * c.budget_multiplier;
    if c.window_frames as f64 > share + 1e-9 {
        v.push(ConfigViolation::WindowExceedsShare {
            window_frames: c.window_frames,
            share,
        });
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = CacheConfig::default();
        assert_eq!(validate_config(&c), Ok(()));
        assert_eq!((c.gamma, c.lambda, c.voxel_size), (0.9, 0.8, 0.05));
        assert_eq!(
            (c.g_cap, c.e_cap, c.window_frames, c.chunk_size),
            (4, 8, 4, 4)
        );
        assert_eq!(c.budget_multiplier, 8.0);
        assert_eq!(c.knn_radius_mult, 2.0);
        assert_eq!(
            (c.window_frac, c.anchor_frac, c.retrieve_frac),
            (0.5, 0.25, 0.25)
        );
    }

    #[test]
    fn gamma_out_of_range() {
        let c = CacheConfig {
            gamma: 1.2,
            ..Default::default()
        };
        let errs = validate_config(&c).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].to_string().starts_with("gamma out of (0,1)"));
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let c = CacheConfig {
            window_frac: 0.5,
            anchor_frac: 0.3,
            retrieve_frac: 0.3,
            ..Default::default()
        };
        let errs = validate_config(&c).unwrap_err();
        assert!(errs
            .iter()
            .any(|e| e.to_string().starts_with("fractions sum ≠ 1")));
    }

    #[test]
    fn reports_every_violation() {
        let c = CacheConfig {
            gamma: 0.0,
            lambda: -1.0,
            g_cap: 0,
            chunk_size: 0,
            window_frames: 5,
            ..Default::default()
        };
        let errs = validate_config(&c).unwrap_err();
        assert_eq!(errs.len(), 5, "{errs:?}");
    }

    #[test]
    fn token_invariants() {
        let mut t = CachedToken::fresh(TokenId::new(3, 1), vec![1.0], vec![2.0], None);
        t.check().unwrap();
        t.count = 2;
        assert!(t.check().is_err());
        t.origin = Origin::Merged;
        t.check().unwrap();
        t.weight = 0.5;
        assert!(t.check().is_err());
    }
}
