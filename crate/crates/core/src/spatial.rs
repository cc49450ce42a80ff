//! Voxel-indexed long-term memory for tokens evicted from the temporal cache.
//!
//! Every active voxel holds a buffer `E` of recently evicted originals and a
//! set `G` of merged representatives. An evicted token either fuses into its
//! most similar representative (cosine on keys above `lambda`) or waits in
//! the buffer; a full buffer collapses into one new representative around its
//! highest-scored pivot, and a full `G` first compacts its lightest member
//! into that member's nearest neighbour.
//!
//! Cells are keyed by Morton code, so iteration order follows the Z-curve.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cosine_or_min, half_roundtrip_counted};
use crate::morton::{morton_decode, morton_encode, VoxelCoord, COORD_MAX, COORD_MIN};
use crate::token::{CacheConfig, CachedToken, Origin, Point3, TokenId};

/// Cell containing `p`; cells are half-open, `[i·r, (i+1)·r)` per axis.
pub fn voxel_of(p: Point3, voxel_size: f64) -> Result<VoxelCoord> {
    let out = || Error::VoxelOutOfRange {
        point: p,
        voxel_size,
    };
    if p.iter().any(|x| !x.is_finite()) || !(voxel_size > 0.0) {
        return Err(out());
    }
    let idx = p.map(|x| (x / voxel_size).floor());
    if idx
        .iter()
        .any(|i| *i < COORD_MIN as f64 || *i > COORD_MAX as f64)
    {
        return Err(out());
    }
    VoxelCoord::checked(idx[0] as i64, idx[1] as i64, idx[2] as i64).map_err(|_| out())
}

pub fn voxel_center(c: VoxelCoord, voxel_size: f64) -> Point3 {
    [c.ix, c.iy, c.iz].map(|i| (i as f64 + 0.5) * voxel_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertEvent {
    Fused,
    Buffered,
    Aggregated,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub voxel_size: f64,
    pub lambda: f64,
    pub g_cap: usize,
    pub e_cap: usize,
    pub knn_radius_mult: f64,
    pub half_precision: bool,
}

impl From<&CacheConfig> for SpatialParams {
    fn from(c: &CacheConfig) -> Self {
        Self {
            voxel_size: c.voxel_size,
            lambda: c.lambda,
            g_cap: c.g_cap,
            e_cap: c.e_cap,
            knn_radius_mult: c.knn_radius_mult,
            half_precision: c.half_precision,
        }
    }
}

impl Default for SpatialParams {
    fn default() -> Self {
        (&CacheConfig::default()).into()
    }
}

/// A token resident in a voxel, tagged with its store-wide insertion number.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredToken {
    pub token: CachedToken,
    pub seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VoxelCell {
    long_term: Vec<StoredToken>,
    buffer: Vec<StoredToken>,
}

impl VoxelCell {
    /// Merged representatives, in insertion order.
    pub fn long_term(&self) -> &[StoredToken] {
        &self.long_term
    }

    /// Buffered originals, in insertion order.
    pub fn buffer(&self) -> &[StoredToken] {
        &self.buffer
    }

    pub fn len(&self) -> usize {
        self.long_term.len() + self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreCounters {
    pub inserted: u64,
    pub fused: u64,
    pub buffered: u64,
    pub aggregated: u64,
    pub re_merged: u64,
    pub dropped: u64,
}

/// Index of the entry with the highest key cosine to `key`; the earliest
/// wins ties. Degenerate keys count as similarity −1.
pub fn best_match<'a, I>(candidates: I, key: &[f64]) -> Result<Option<(usize, f64)>>
where
    I: IntoIterator<Item = &'a CachedToken>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in candidates.into_iter().enumerate() {
        let c = cosine_or_min(&t.key, key)?;
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    Ok(best)
}

/// Index of the entry with the smallest cumulative weight; earliest on ties.
pub fn least_informative<'a, I>(candidates: I) -> Option<usize>
where
    I: IntoIterator<Item = &'a CachedToken>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in candidates.into_iter().enumerate() {
        if best.is_none_or(|(_, w)| t.weight < w) {
            best = Some((i, t.weight));
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the highest-scored entry; earliest on ties.
pub fn pivot_index<'a, I>(candidates: I) -> Option<usize>
where
    I: IntoIterator<Item = &'a CachedToken>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in candidates.into_iter().enumerate() {
        if best.is_none_or(|(_, s)| t.score > s) {
            best = Some((i, t.score));
        }
    }
    best.map(|(i, _)| i)
}

/// `target ← (Z·target + ω·incoming) / (Z + ω)` on key and value, then
/// `Z ← Z + ω` and counts add.
fn fuse(target: &mut CachedToken, incoming: &CachedToken, omega: f64) {
    let z = target.weight;
    let denom = z + omega;
    for (a, b) in target.key.iter_mut().zip(&incoming.key) {
        *a = (z * *a + omega * b) / denom;
    }
    for (a, b) in target.value.iter_mut().zip(&incoming.value) {
        *a = (z * *a + omega * b) / denom;
    }
    target.weight = denom;
    target.count += incoming.count;
}

#[derive(Debug, Clone)]
pub struct VoxelStore {
    params: SpatialParams,
    cells: BTreeMap<u64, VoxelCell>,
    counters: StoreCounters,
    next_seq: u64,
    next_merged: u64,
    half_saturations: u64,
}

impl VoxelStore {
    pub fn new(params: SpatialParams) -> Self {
        Self {
            params,
            cells: BTreeMap::new(),
            counters: StoreCounters::default(),
            next_seq: 0,
            next_merged: 0,
            half_saturations: 0,
        }
    }

    pub fn params(&self) -> &SpatialParams {
        &self.params
    }

    pub fn counters(&self) -> StoreCounters {
        self.counters
    }

    pub fn half_saturations(&self) -> u64 {
        self.half_saturations
    }

    pub fn active_cells(&self) -> usize {
        self.cells.len()
    }

    /// Active cells in Morton order.
    pub fn cells(&self) -> impl Iterator<Item = (VoxelCoord, &VoxelCell)> {
        self.cells
            .iter()
            .map(|(&code, cell)| (morton_decode(code).expect("stored codes are valid"), cell))
    }

    pub fn cell(&self, c: VoxelCoord) -> Option<&VoxelCell> {
        morton_encode(c).ok().and_then(|code| self.cells.get(&code))
    }

    pub fn token_count(&self) -> usize {
        self.cells.values().map(VoxelCell::len).sum()
    }

    pub fn long_term_count(&self) -> usize {
        self.cells.values().map(|c| c.long_term.len()).sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.cells.values().map(|c| c.buffer.len()).sum()
    }

    /// Number of original tokens represented by everything stored.
    pub fn represented_count(&self) -> u64 {
        self.cells
            .values()
            .flat_map(|c| c.long_term.iter().chain(&c.buffer))
            .map(|s| s.token.count)
            .sum()
    }

    /// `hist[k]` = number of active cells holding `k` tokens.
    pub fn occupancy_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0; self.params.g_cap + self.params.e_cap + 1];
        for cell in self.cells.values() {
            let k = cell.len().min(hist.len() - 1);
            hist[k] += 1;
        }
        hist
    }

    fn seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq - 1
    }

    fn quantize(&mut self, t: &mut CachedToken) {
        if self.params.half_precision {
            let (k, sk) = half_roundtrip_counted(&t.key);
            let (v, sv) = half_roundtrip_counted(&t.value);
            t.key = k;
            t.value = v;
            self.half_saturations += (sk + sv) as u64;
        }
    }

    /// Routes one token evicted from the temporal cache.
    pub fn insert_evicted(&mut self, mut t: CachedToken) -> Result<InsertEvent> {
        self.counters.inserted += 1;
        let Some(pos) = t.position else {
            self.counters.dropped += t.count;
            return Ok(InsertEvent::Dropped);
        };
        let coord = voxel_of(pos, self.params.voxel_size)?;
        let code = morton_encode(coord)?;
        let lambda = self.params.lambda;

        let cell = self.cells.entry(code).or_default();
        if let Some((i, cos)) = best_match(cell.long_term.iter().map(|s| &s.token), &t.key)? {
            if cos > lambda {
                let target = &mut cell.long_term[i].token;
                fuse(target, &t, cos.exp());
                let mut fused = target.clone();
                self.quantize(&mut fused);
                self.cells.get_mut(&code).expect("present").long_term[i].token = fused;
                self.counters.fused += 1;
                return Ok(InsertEvent::Fused);
            }
        }

        t.origin = Origin::Buffered;
        let seq = self.seq();
        let cell = self.cells.get_mut(&code).expect("present");
        cell.buffer.push(StoredToken { token: t, seq });
        if cell.buffer.len() >= self.params.e_cap {
            self.aggregate(coord)?;
            Ok(InsertEvent::Aggregated)
        } else {
            self.counters.buffered += 1;
            Ok(InsertEvent::Buffered)
        }
    }

    /// Collapses a full buffer into one new long-term representative.
    pub fn aggregate(&mut self, coord: VoxelCoord) -> Result<()> {
        let code = morton_encode(coord)?;
        let (g_cap, e_cap, voxel_size) =
            (self.params.g_cap, self.params.e_cap, self.params.voxel_size);
        let cell = self
            .cells
            .get_mut(&code)
            .filter(|c| c.buffer.len() == e_cap)
            .ok_or_else(|| {
                Error::Precondition(format!("aggregate: buffer of {coord:?} is not full"))
            })?;
        let buffer = std::mem::take(&mut cell.buffer);
        let pivot = &buffer[pivot_index(buffer.iter().map(|s| &s.token)).expect("non-empty")].token;

        let d = pivot.key.len();
        let dv = pivot.value.len();
        let mut key = vec![0.0; d];
        let mut value = vec![0.0; dv];
        let mut z = 0.0;
        let mut count = 0;
        for s in &buffer {
            let w = cosine_or_min(&s.token.key, &pivot.key)?.exp();
            z += w;
            count += s.token.count;
            for (a, x) in key.iter_mut().zip(&s.token.key) {
                *a += w * x;
            }
            for (a, x) in value.iter_mut().zip(&s.token.value) {
                *a += w * x;
            }
        }
        key.iter_mut().chain(value.iter_mut()).for_each(|a| *a /= z);

        let mut merged = CachedToken {
            id: TokenId::merged(self.next_merged),
            key,
            value,
            score: pivot.score,
            position: Some(voxel_center(coord, voxel_size)),
            count,
            weight: z,
            origin: Origin::Merged,
        };
        self.next_merged += 1;
        self.counters.aggregated += 1;

        let cell = self.cells.get_mut(&code).expect("present");
        if cell.long_term.len() >= g_cap {
            if g_cap == 1 {
                // no neighbour to absorb the victim: fold it into the newcomer
                let victim = cell.long_term.remove(0).token;
                let omega = cosine_or_min(&victim.key, &merged.key)?.exp();
                fuse(&mut merged, &victim, omega);
                self.counters.re_merged += 1;
            } else {
                self.re_merge(coord)?;
            }
        }
        self.quantize(&mut merged);
        let seq = self.seq();
        self.cells
            .get_mut(&code)
            .expect("present")
            .long_term
            .push(StoredToken { token: merged, seq });
        Ok(())
    }

    /// Frees one long-term slot by fusing the lightest representative into
    /// its most similar peer. Requires a full `G` and `g_cap ≥ 2`.
    pub fn re_merge(&mut self, coord: VoxelCoord) -> Result<()> {
        let code = morton_encode(coord)?;
        let g_cap = self.params.g_cap;
        if g_cap < 2 {
            return Err(Error::Precondition(
                "re_merge needs g_cap >= 2; with g_cap = 1 aggregation folds the old representative into the new one".into(),
            ));
        }
        let cell = self
            .cells
            .get_mut(&code)
            .filter(|c| c.long_term.len() == g_cap)
            .ok_or_else(|| {
                Error::Precondition(format!("re_merge: long-term set of {coord:?} is not full"))
            })?;
        let victim_idx =
            least_informative(cell.long_term.iter().map(|s| &s.token)).expect("non-empty");
        let victim = cell.long_term.remove(victim_idx).token;
        let (n, cos) =
            best_match(cell.long_term.iter().map(|s| &s.token), &victim.key)?.expect("g_cap >= 2");
        let mut neighbour = cell.long_term[n].token.clone();
        fuse(&mut neighbour, &victim, cos.exp());
        self.quantize(&mut neighbour);
        self.cells.get_mut(&code).expect("present").long_term[n].token = neighbour;
        self.counters.re_merged += 1;
        Ok(())
    }

    /// Tokens from active cells whose centers lie within
    /// `knn_radius_mult · voxel_size` of a visible voxel's center.
    ///
    /// Merged representatives come before buffered originals; within each
    /// class tokens are ordered by distance to the nearest visible voxel,
    /// then by cumulative weight (descending), then by insertion order.
    pub fn retrieve(&self, visible_positions: &[Point3], quota: usize) -> Result<Vec<CachedToken>> {
        if quota == 0 || self.cells.is_empty() {
            return Ok(Vec::new());
        }
        let visible: BTreeSet<VoxelCoord> = visible_positions
            .iter()
            .map(|&p| voxel_of(p, self.params.voxel_size))
            .collect::<Result<_>>()?;
        if visible.is_empty() {
            return Ok(Vec::new());
        }
        let near = self.neighbourhood(&visible);

        let mut ranked: Vec<(u8, i64, f64, u64, &CachedToken)> = Vec::new();
        for (code, d2) in near {
            let cell = &self.cells[&code];
            for (class, slots) in [(0u8, &cell.long_term), (1, &cell.buffer)] {
                ranked.extend(
                    slots
                        .iter()
                        .map(|s| (class, d2, s.token.weight, s.seq, &s.token)),
                );
            }
        }
        ranked.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(a.1.cmp(&b.1))
                .then(b.2.total_cmp(&a.2))
                .then(a.3.cmp(&b.3))
        });
        Ok(ranked
            .into_iter()
            .take(quota)
            .map(|r| r.4.clone())
            .collect())
    }

    /// Active cells within the retrieval radius of `visible`, with the squared
    /// center distance (in voxel units) to the closest visible voxel.
    fn neighbourhood(&self, visible: &BTreeSet<VoxelCoord>) -> BTreeMap<u64, i64> {
        let mult = self.params.knn_radius_mult;
        let r2 = mult * mult;
        let within = |d2: i64| d2 as f64 <= r2;
        let reach = mult.floor().min(1e6) as i64;
        let probe = (2 * reach + 1).pow(3);

        let mut near: BTreeMap<u64, i64> = BTreeMap::new();
        let mut keep = |code: u64, d2: i64| {
            near.entry(code)
                .and_modify(|d| *d = (*d).min(d2))
                .or_insert(d2);
        };
        if (probe as usize) < self.cells.len() {
            let mut offsets = Vec::new();
            for dx in -reach..=reach {
                for dy in -reach..=reach {
                    for dz in -reach..=reach {
                        let d2 = dx * dx + dy * dy + dz * dz;
                        if within(d2) {
                            offsets.push((dx, dy, dz, d2));
                        }
                    }
                }
            }
            for v in visible {
                for &(dx, dy, dz, d2) in &offsets {
                    let Ok(c) =
                        VoxelCoord::checked(v.ix as i64 + dx, v.iy as i64 + dy, v.iz as i64 + dz)
                    else {
                        continue;
                    };
                    let code = morton_encode(c).expect("checked");
                    if self.cells.contains_key(&code) {
                        keep(code, d2);
                    }
                }
            }
        } else {
            for &code in self.cells.keys() {
                let c = morton_decode(code).expect("valid");
                if let Some(d2) = visible
                    .iter()
                    .map(|v| v.dist2(&c))
                    .min()
                    .filter(|&d2| within(d2))
                {
                    keep(code, d2);
                }
            }
        }
        near
    }

    /// Capacity and per-token invariants for every cell.
    pub fn check_invariants(&self) -> Result<()> {
        let p = &self.params;
        for (coord, cell) in self.cells() {
            if cell.long_term.len() > p.g_cap || cell.buffer.len() >= p.e_cap.max(1) {
                return Err(Error::InvariantViolation(format!(
                    "voxel {coord:?} holds {} long-term / {} buffered tokens (caps {} / {})",
                    cell.long_term.len(),
                    cell.buffer.len(),
                    p.g_cap,
                    p.e_cap
                )));
            }
            for s in &cell.long_term {
                if s.token.origin != Origin::Merged {
                    return Err(Error::InvariantViolation(format!(
                        "unmerged token {:?} in G",
                        s.token.id
                    )));
                }
                s.token.check()?;
            }
            for s in &cell.buffer {
                if s.token.origin != Origin::Buffered || s.token.count != 1 {
                    return Err(Error::InvariantViolation(format!(
                        "bad buffered token {:?}",
                        s.token.id
                    )));
                }
                s.token.check()?;
            }
        }
        Ok(())
    }
}
