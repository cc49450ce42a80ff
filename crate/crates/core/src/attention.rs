//! Chunk-causal scaled dot-product attention with a count bias.
//!
//! A key standing for `n` merged tokens gets `ln n` added to its logit, so it
//! receives exactly the attention `n` identical copies of it would.

use crate::error::{Error, Result};
use crate::kernel::{dot_unchecked, masked_softmax};

/// Row-major boolean mask: rows are the chunk's queries, columns are the
/// cached keys followed by the chunk's own keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: allowed.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

/// Mask for one chunk attending to `cache_len` cached keys and to itself.
///
/// Under chunk-causality everything listed is attendable: cached keys
/// precede the chunk and attention inside the chunk is bidirectional. The
/// causal constraint lives in which keys get assembled, not in the mask.
pub fn build_chunk_mask(cache_len: usize, chunk_token_count: usize) -> AttentionMask {
    let cols = cache_len + chunk_token_count;
    AttentionMask {
        rows: chunk_token_count,
        cols,
        allowed: vec![true; chunk_token_count * cols],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// One output vector per query.
    pub outputs: Vec<Vec<f64>>,
    /// Attention mass received by each key, summed over queries.
    pub mass: Vec<f64>,
}

pub fn attend<Q, K, V>(
    queries: &[Q],
    keys: &[K],
    values: &[V],
    counts: &[u64],
    mask: &AttentionMask,
    d_h: usize,
) -> Result<AttentionResult>
where
    Q: AsRef<[f64]>,
    K: AsRef<[f64]>,
    V: AsRef<[f64]>,
{
    if keys.is_empty() {
        return Err(Error::EmptyInput);
    }
    for got in [values.len(), counts.len(), mask.cols] {
        if got != keys.len() {
            return Err(Error::DimensionMismatch {
                expected: keys.len(),
                got,
            });
        }
    }
    if mask.rows != queries.len() {
        return Err(Error::DimensionMismatch {
            expected: queries.len(),
            got: mask.rows,
        });
    }
    let dv = values[0].as_ref().len();
    for v in queries
        .iter()
        .map(AsRef::as_ref)
        .chain(keys.iter().map(AsRef::as_ref))
    {
        if v.len() != d_h {
            return Err(Error::DimensionMismatch {
                expected: d_h,
                got: v.len(),
            });
        }
    }
    if let Some(v) = values.iter().find(|v| v.as_ref().len() != dv) {
        return Err(Error::DimensionMismatch {
            expected: dv,
            got: v.as_ref().len(),
        });
    }
    if counts.contains(&0) {
        return Err(Error::Precondition("token count must be positive".into()));
    }

    let scale = 1.0 / (d_h as f64).sqrt();
    let bias: Vec<f64> = counts.iter().map(|&n| (n as f64).ln()).collect();

    let mut outputs = Vec::with_capacity(queries.len());
    let mut mass = vec![0.0; keys.len()];
    let mut logits = vec![0.0; keys.len()];
    for (j, q) in queries.iter().enumerate() {
        let q = q.as_ref();
        let row = mask.row(j);
        for (i, k) in keys.iter().enumerate() {
            logits[i] = if row[i] {
                dot_unchecked(q, k.as_ref()) * scale + bias[i]
            } else {
                f64::NEG_INFINITY
            };
        }
        let weights = masked_softmax(&logits, row)?;
        let mut out = vec![0.0; dv];
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            mass[i] += w;
            for (o, x) in out.iter_mut().zip(values[i].as_ref()) {
                *o += w * x;
            }
        }
        outputs.push(out);
    }
    Ok(AttentionResult { outputs, mass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect()
    }

    /// Straight triple loop, written independently of `attend`.
    fn naive(
        q: &[Vec<f64>],
        k: &[Vec<f64>],
        v: &[Vec<f64>],
        n: &[u64],
        d: usize,
    ) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut outs = vec![];
        let mut mass = vec![0.0; k.len()];
        for qj in q {
            let mut e = vec![];
            for (ki, ni) in k.iter().zip(n) {
                let mut s = 0.0;
                for t in 0..d {
                    s += qj[t] * ki[t];
                }
                e.push((s / (d as f64).sqrt()).exp() * *ni as f64);
            }
            let z: f64 = e.iter().sum();
            let mut o = vec![0.0; v[0].len()];
            for i in 0..k.len() {
                mass[i] += e[i] / z;
                for t in 0..o.len() {
                    o[t] += e[i] / z * v[i][t];
                }
            }
            outs.push(o);
        }
        (outs, mass)
    }

    #[test]
    fn mask_shapes() {
        let m = build_chunk_mask(0, 4);
        assert_eq!((m.rows(), m.cols()), (4, 4));
        assert!((0..4).all(|r| m.row(r).iter().all(|&b| b)));
        let m = build_chunk_mask(10, 4);
        assert_eq!((m.rows(), m.cols()), (4, 14));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let c = rng.random_range(0..50);
            let t = rng.random_range(1..20);
            let m = build_chunk_mask(c, t);
            assert_eq!(m.cols(), c + t);
            assert_eq!(m.rows(), t);
        }
    }

    #[test]
    fn single_key_passes_value_through() {
        let q = vec![vec![0.3, 0.1], vec![-2.0, 1.0], vec![0.0, 0.0]];
        let k = vec![vec![1.0, 2.0]];
        let v = vec![vec![5.0, -1.0, 2.0]];
        let r = attend(
            &q,
            &k,
            &v,
            &[1],
            &AttentionMask::new(3, 1, vec![true; 3]).unwrap(),
            2,
        )
        .unwrap();
        for o in &r.outputs {
            assert_eq!(o, &v[0]);
        }
        assert_eq!(r.mass, vec![3.0]);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let d = 6;
            let q = random_vecs(&mut rng, 3, d);
            let k = random_vecs(&mut rng, 5, d);
            let v = random_vecs(&mut rng, 5, 4);
            let n: Vec<u64> = (0..5).map(|_| rng.random_range(1..6)).collect();
            let r = attend(&q, &k, &v, &n, &build_chunk_mask(2, 3), d).unwrap();
            let (oo, om) = naive(&q, &k, &v, &n, d);
            for (a, b) in r.outputs.iter().flatten().zip(oo.iter().flatten()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in r.mass.iter().zip(&om) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merged_key_equals_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        let q = random_vecs(&mut rng, 4, d);
        let base_k = random_vecs(&mut rng, 3, d);
        let base_v = random_vecs(&mut rng, 3, d);
        let dup_k = random_vecs(&mut rng, 1, d).remove(0);
        let dup_v = random_vecs(&mut rng, 1, d).remove(0);
        let n = 5;

        let mut k1 = base_k.clone();
        let mut v1 = base_v.clone();
        k1.push(dup_k.clone());
        v1.push(dup_v.clone());
        let merged = attend(
            &q,
            &k1,
            &v1,
            &[1, 1, 1, n],
            &AttentionMask::new(4, 4, vec![true; 16]).unwrap(),
            d,
        )
        .unwrap();

        let mut k2 = base_k;
        let mut v2 = base_v;
        for _ in 0..n {
            k2.push(dup_k.clone());
            v2.push(dup_v.clone());
        }
        let dup = attend(
            &q,
            &k2,
            &v2,
            &[1; 8],
            &AttentionMask::new(4, 8, vec![true; 32]).unwrap(),
            d,
        )
        .unwrap();
        for (a, b) in merged
            .outputs
            .iter()
            .flatten()
            .zip(dup.outputs.iter().flatten())
        {
            assert!((a - b).abs() < 1e-9);
        }
        let dup_mass: f64 = dup.mass[3..].iter().sum();
        assert!((merged.mass[3] - dup_mass).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let q = vec![vec![1.0, 0.0]];
        let k: Vec<Vec<f64>> = vec![];
        assert!(matches!(
            attend(&q, &k, &k, &[], &build_chunk_mask(0, 1), 2),
            Err(Error::EmptyInput)
        ));
        let k = vec![vec![1.0, 0.0, 3.0]];
        assert!(matches!(
            attend(&q, &k, &k, &[1], &build_chunk_mask(0, 1), 2),
            Err(Error::DimensionMismatch { .. })
        ));
        let k = vec![vec![1.0, 0.0]];
        assert!(matches!(
            attend(&q, &k, &k, &[1], &build_chunk_mask(1, 1), 2),
            Err(Error::DimensionMismatch { .. })
        ));
        let all_masked = AttentionMask::new(1, 1, vec![false]).unwrap();
        assert!(matches!(
            attend(&q, &k, &k, &[1], &all_masked, 2),
            Err(Error::EmptySupport)
        ));
    }

    proptest! {
        #[test]
        fn rows_stochastic_and_mass_conserved(seed in any::<u64>(), nq in 1usize..6, nk in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let q = random_vecs(&mut rng, nq, d);
            let k = random_vecs(&mut rng, nk, d);
            let counts: Vec<u64> = (0..nk).map(|_| rng.random_range(1..10)).collect();
            // values = identity-like one-hot columns expose the weight rows
            let v: Vec<Vec<f64>> = (0..nk).map(|i| { let mut e = vec![0.0; nk]; e[i] = 1.0; e }).collect();
            let mask = AttentionMask::new(nq, nk, vec![true; nq * nk]).unwrap();
            let r = attend(&q, &k, &v, &counts, &mask, d).unwrap();
            for o in &r.outputs {
                prop_assert!((o.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            prop_assert!((r.mass.iter().sum::<f64>() - nq as f64).abs() <= 1e-9);
        }

        #[test]
        fn key_permutation_permutes_mass(seed in any::<u64>(), nk in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 5;
            let q = random_vecs(&mut rng, 3, d);
            let k = random_vecs(&mut rng, nk, d);
            let v = random_vecs(&mut rng, nk, 3);
            let counts: Vec<u64> = (0..nk).map(|_| rng.random_range(1..4)).collect();
            let mut perm: Vec<usize> = (0..nk).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % nk);
            let pk: Vec<_> = perm.iter().map(|&i| k[i].clone()).collect();
            let pv: Vec<_> = perm.iter().map(|&i| v[i].clone()).collect();
            let pc: Vec<_> = perm.iter().map(|&i| counts[i]).collect();
            let mask = AttentionMask::new(3, nk, vec![true; 3 * nk]).unwrap();
            let a = attend(&q, &k, &v, &counts, &mask, d).unwrap();
            let b = attend(&q, &pk, &pv, &pc, &mask, d).unwrap();
            for (x, y) in a.outputs.iter().flatten().zip(b.outputs.iter().flatten()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            for (pos, &i) in perm.iter().enumerate() {
                prop_assert!((b.mass[pos] - a.mass[i]).abs() <= 1e-12);
            }
        }
    }
}
