//! 3D Morton (Z-order) codes for voxel coordinates.
//!
//! Each signed index in `[-2^20, 2^20)` is biased to an unsigned 21-bit value
//! and the three are interleaved with x in bit 0, y in bit 1, z in bit 2, so
//! a code fits in 63 bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COORD_BITS: u32 = 21;
pub const COORD_BIAS: i64 = 1 << 20;
pub const COORD_MIN: i64 = -COORD_BIAS;
pub const COORD_MAX: i64 = COORD_BIAS - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelCoord {
    pub const fn new(ix: i32, iy: i32, iz: i32) -> Self {
        Self { ix, iy, iz }
    }

    /// Builds a coordinate, rejecting indices outside the Morton range.
    pub fn checked(ix: i64, iy: i64, iz: i64) -> Result<Self> {
        let ok = |v: i64| (COORD_MIN..=COORD_MAX).contains(&v);
        if ok(ix) && ok(iy) && ok(iz) {
            Ok(Self::new(ix as i32, iy as i32, iz as i32))
        } else {
            Err(Error::CoordOutOfRange(ix, iy, iz))
        }
    }

    pub fn in_range(&self) -> bool {
        Self::checked(self.ix as i64, self.iy as i64, self.iz as i64).is_ok()
    }

    /// Squared distance between voxel centers, in voxel units.
    pub fn dist2(&self, other: &Self) -> i64 {
        let d = |a: i32, b: i32| (a as i64 - b as i64).pow(2);
        d(self.ix, other.ix) + d(self.iy, other.iy) + d(self.iz, other.iz)
    }
}

/// Spreads the low 21 bits of `v` so that bit `i` lands on bit `3i`.
#[inline]
fn part1by2(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact1by2(v: u64) -> u64 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x
}

pub fn morton_encode(c: VoxelCoord) -> Result<u64> {
    if !c.in_range() {
        return Err(Error::CoordOutOfRange(
            c.ix as i64,
            c.iy as i64,
            c.iz as i64,
        ));
    }
    let bias = |v: i32| (v as i64 + COORD_BIAS) as u64;
    Ok(part1by2(bias(c.ix)) | (part1by2(bias(c.iy)) << 1) | (part1by2(bias(c.iz)) << 2))
}

pub fn morton_decode(code: u64) -> Result<VoxelCoord> {
    if code >> (3 * COORD_BITS) != 0 {
        return Err(Error::Precondition(format!(
            "Morton code {code:#x} uses more than 63 bits"
        )));
    }
    let unbias = |v: u64| (v as i64 - COORD_BIAS) as i32;
    Ok(VoxelCoord::new(
        unbias(compact1by2(code)),
        unbias(compact1by2(code >> 1)),
        unbias(compact1by2(code >> 2)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_encode(c: VoxelCoord) -> u64 {
        let xs = [c.ix, c.iy, c.iz].map(|v| (v as i64 + COORD_BIAS) as u64);
        let mut code = 0;
        for bit in 0..COORD_BITS as u64 {
            for (axis, v) in xs.iter().enumerate() {
                code |= ((v >> bit) & 1) << (3 * bit + axis as u64);
            }
        }
        code
    }

    #[test]
    fn bias_floor_is_zero() {
        let lo = COORD_MIN as i32;
        assert_eq!(morton_encode(VoxelCoord::new(lo, lo, lo)).unwrap(), 0);
    }

    #[test]
    fn unit_x_matches_bit_loop() {
        let c = VoxelCoord::new(1, 0, 0);
        assert_eq!(morton_encode(c).unwrap(), naive_encode(c));
        let c0 = VoxelCoord::new(0, 0, 0);
        // bias 2^20 on every axis sets bits 60, 61, 62
        assert_eq!(morton_encode(c0).unwrap(), 0b111 << 60);
        assert_eq!(morton_encode(c).unwrap(), (0b111 << 60) | 1);
    }

    #[test]
    fn random_coords_match_bit_loop_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let c = VoxelCoord::new(
                rng.random_range(COORD_MIN..=COORD_MAX) as i32,
                rng.random_range(COORD_MIN..=COORD_MAX) as i32,
                rng.random_range(COORD_MIN..=COORD_MAX) as i32,
            );
            let code = morton_encode(c).unwrap();
            assert_eq!(code, naive_encode(c));
            assert!(code < 1 << 63);
            assert_eq!(morton_decode(code).unwrap(), c);
        }
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(morton_encode(VoxelCoord::new(1 << 20, 0, 0)).is_err());
        assert!(morton_encode(VoxelCoord::new(0, -(1 << 20) - 1, 0)).is_err());
        assert!(morton_decode(1 << 63).is_err());
        assert!(VoxelCoord::checked(0, 0, 1 << 20).is_err());
    }

    #[test]
    fn aligned_block_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let k = rng.random_range(1..6u32);
            let span = 1i64 << k;
            let base = |r: &mut ChaCha8Rng| {
                (r.random_range(COORD_MIN / span..=COORD_MAX / span - 1) * span) as i32
            };
            let b = VoxelCoord::new(base(&mut rng), base(&mut rng), base(&mut rng));
            let off = |r: &mut ChaCha8Rng| r.random_range(0..span - 1) as i32;
            let c = VoxelCoord::new(
                b.ix + off(&mut rng),
                b.iy + off(&mut rng),
                b.iz + off(&mut rng),
            );
            let mut n = c;
            match rng.random_range(0..3) {
                0 => n.ix += 1,
                1 => n.iy += 1,
                _ => n.iz += 1,
            }
            let (ca, cb) = (morton_encode(c).unwrap(), morton_encode(n).unwrap());
            let high = !((1u64 << (3 * k)) - 1);
            assert_eq!(ca & high, cb & high, "codes leave their aligned block");
            assert_eq!(morton_decode(ca & high).unwrap(), b);
        }
    }
}
