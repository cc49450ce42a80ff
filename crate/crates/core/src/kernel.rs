//! Dense vector primitives shared by the attention engine and both caches.
//!
//! Everything is computed in `f64`. Half precision only shows up through
//! [`half_roundtrip`], which quantizes a vector to IEEE binary16 and widens it
//! back so storage precision can be emulated at cache-insertion points.

use half::f16;

use crate::error::{Error, Result};

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Inner product of two equal-length vectors.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Zero-norm inputs have no direction and yield [`Error::DegenerateVector`];
/// callers that need a total order use [`cosine_or_min`].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    let na = dot_unchecked(a, a).sqrt();
    let nb = dot_unchecked(b, b).sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateVector);
    }
    Ok((dot_unchecked(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity where a degenerate input counts as maximally dissimilar.
pub fn cosine_or_min(a: &[f64], b: &[f64]) -> Result<f64> {
    match cosine(a, b) {
        Err(Error::DegenerateVector) => Ok(-1.0),
        other => other,
    }
}

/// Softmax over the unmasked entries of `logits`.
///
/// Masked entries are excluded from both the running max and the normalizer
/// and come back as exactly `0.0`.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: logits.len(),
            got: mask.len(),
        });
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// `Σ wᵢ vᵢ / Σ wᵢ` over equal-length vectors with strictly positive weights.
pub fn weighted_mean<V: AsRef<[f64]>>(vectors: &[V], weights: &[f64]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(Error::EmptyInput)?.as_ref();
    if vectors.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: vectors.len(),
            got: weights.len(),
        });
    }
    let mut acc = vec![0.0; first.len()];
    let mut total = 0.0;
    for (v, &w) in vectors.iter().zip(weights) {
        let v = v.as_ref();
        check_len(first, v)?;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::NonPositiveWeight(w));
        }
        total += w;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * x;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(acc)
}

/// Quantize every entry to the nearest binary16 value and widen it back.
pub fn half_roundtrip(a: &[f64]) -> Vec<f64> {
    half_roundtrip_counted(a).0
}

/// Like [`half_roundtrip`], also returning how many entries saturated at the
/// largest finite half value.
pub fn half_roundtrip_counted(a: &[f64]) -> (Vec<f64>, usize) {
    let max = f16::MAX.to_f64();
    let mut saturated = 0;
    let out = a
        .iter()
        .map(|&x| {
            let h = f16::from_f64(x);
            if h.is_infinite() {
                saturated += 1;
                max.copysign(x)
            } else {
                h.to_f64()
            }
        })
        .collect();
    (out, saturated)
}
