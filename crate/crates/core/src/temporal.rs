//! Working temporal cache for one (layer, head): the permanent reference
//! frame, a sliding window of recent frames, and a budgeted set of anchor
//! tokens chosen by decayed cumulative attention.

use std::cmp::Ordering;
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::kernel::half_roundtrip_counted;
use crate::token::{CachedToken, FrameTokens, Origin};

/// Ranking used for anchor selection: score descending, then the more recent
/// frame, then the lower token index.
pub fn anchor_order(a: &CachedToken, b: &CachedToken) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.id.frame_idx.cmp(&a.id.frame_idx))
        .then(a.id.token_idx.cmp(&b.id.token_idx))
}

#[derive(Debug, Clone)]
pub struct TemporalCache {
    gamma: f64,
    window_frames: usize,
    anchor_budget: usize,
    half_precision: bool,
    reference: Option<Vec<CachedToken>>,
    window: VecDeque<Vec<CachedToken>>,
    /// Kept sorted by [`anchor_order`].
    anchors: Vec<CachedToken>,
    last_frame: Option<i64>,
    half_saturations: u64,
}

impl TemporalCache {
    pub fn new(gamma: f64, window_frames: usize, anchor_budget: usize) -> Self {
        Self {
            gamma,
            window_frames,
            anchor_budget,
            half_precision: false,
            reference: None,
            window: VecDeque::new(),
            anchors: Vec::new(),
            last_frame: None,
            half_saturations: 0,
        }
    }

    /// Quantize keys and values to binary16 as they enter the cache.
    pub fn with_half_precision(mut self, on: bool) -> Self {
        self.half_precision = on;
        self
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn window_frames(&self) -> usize {
        self.window_frames
    }

    pub fn anchor_budget(&self) -> usize {
        self.anchor_budget
    }

    pub fn half_saturations(&self) -> u64 {
        self.half_saturations
    }

    pub fn has_reference(&self) -> bool {
        self.reference.is_some()
    }

    pub fn reference(&self) -> &[CachedToken] {
        self.reference.as_deref().unwrap_or(&[])
    }

    pub fn window(&self) -> impl Iterator<Item = &[CachedToken]> {
        self.window.iter().map(Vec::as_slice)
    }

    pub fn window_frame_count(&self) -> usize {
        self.window.len()
    }

    pub fn window_token_count(&self) -> usize {
        self.window.iter().map(Vec::len).sum()
    }

    pub fn anchors(&self) -> &[CachedToken] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.reference().len() + self.window_token_count() + self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn admit(&mut self, frame: &FrameTokens, origin: Origin) -> Vec<CachedToken> {
        let mut tokens = frame.to_tokens(origin);
        if self.half_precision {
            for t in &mut tokens {
                let (k, sk) = half_roundtrip_counted(&t.key);
                let (v, sv) = half_roundtrip_counted(&t.value);
                t.key = k;
                t.value = v;
                self.half_saturations += (sk + sv) as u64;
            }
        }
        tokens
    }

    fn check_next_frame(&mut self, frame_idx: u64) -> Result<()> {
        let got = frame_idx as i64;
        if let Some(prev) = self.last_frame {
            if got <= prev {
                return Err(Error::NonMonotoneFrames { prev, got });
            }
        }
        self.last_frame = Some(got);
        Ok(())
    }

    /// Installs the first frame as the permanent reference set.
    pub fn register_reference(&mut self, frame0: &FrameTokens) -> Result<()> {
        if self.reference.is_some() {
            return Err(Error::ReferenceAlreadyRegistered);
        }
        frame0.check_shape()?;
        self.check_next_frame(frame0.frame_idx)?;
        let tokens = self.admit(frame0, Origin::Reference);
        self.reference = Some(tokens);
        Ok(())
    }

    /// Appends frames with zero initial score. See [`Self::ingest_scored`].
    pub fn ingest_frames(&mut self, frames: &[FrameTokens]) -> Result<Vec<CachedToken>> {
        let total: usize = frames.iter().map(FrameTokens::len).sum();
        self.ingest_scored(frames, &vec![0.0; total])
    }

    /// Appends frames to the window, giving each new token its initial score
    /// (the attention mass it received in the pass that produced it), and
    /// returns the tokens of frames pushed out of the window, oldest first.
    pub fn ingest_scored(
        &mut self,
        frames: &[FrameTokens],
        initial_scores: &[f64],
    ) -> Result<Vec<CachedToken>> {
        let total: usize = frames.iter().map(FrameTokens::len).sum();
        if initial_scores.len() != total {
            return Err(Error::IndexMisalignment {
                expected: total,
                got: initial_scores.len(),
            });
        }
        check_mass(initial_scores)?;
        let mut scores = initial_scores.iter();
        for frame in frames {
            frame.check_shape()?;
            self.check_next_frame(frame.frame_idx)?;
            let mut tokens = self.admit(frame, Origin::Window);
            for t in &mut tokens {
                t.score = *scores.next().expect("length checked");
            }
            self.window.push_back(tokens);
        }
        let mut expelled = Vec::new();
        while self.window.len() > self.window_frames {
            expelled.extend(self.window.pop_front().expect("non-empty"));
        }
        Ok(expelled)
    }

    /// Applies `score ← γ·score + mass` to every cached token. `mass` must be
    /// aligned with [`Self::snapshot`] taken before this call.
    pub fn update_scores(&mut self, mass: &[f64]) -> Result<()> {
        if mass.len() != self.len() {
            return Err(Error::IndexMisalignment {
                expected: self.len(),
                got: mass.len(),
            });
        }
        check_mass(mass)?;
        let gamma = self.gamma;
        let tokens = self
            .reference
            .iter_mut()
            .flatten()
            .chain(self.window.iter_mut().flatten())
            .chain(self.anchors.iter_mut());
        for (t, m) in tokens.zip(mass) {
            t.score = gamma * t.score + m;
        }
        self.anchors.sort_by(anchor_order);
        Ok(())
    }

    /// Keeps the best `anchor_budget` tokens among the current anchors and
    /// the tokens just expelled from the window; returns the rest.
    pub fn select_anchors(&mut self, expelled: Vec<CachedToken>) -> Vec<CachedToken> {
        let mut candidates = std::mem::take(&mut self.anchors);
        candidates.extend(expelled);
        candidates.sort_by(anchor_order);
        let budget = self.anchor_budget.min(candidates.len());
        let evicted = candidates.split_off(budget);
        for t in &mut candidates {
            t.origin = Origin::Anchor;
        }
        self.anchors = candidates;
        evicted
    }

    /// Reference tokens, then window frames oldest first, then anchors by
    /// descending score.
    pub fn snapshot(&self) -> Vec<&CachedToken> {
        self.reference()
            .iter()
            .chain(self.window.iter().flatten())
            .chain(self.anchors.iter())
            .collect()
    }
}

fn check_mass(mass: &[f64]) -> Result<()> {
    match mass.iter().find(|m| !(**m >= 0.0 && m.is_finite())) {
        Some(m) => Err(Error::Precondition(format!(
            "attention mass must be finite and non-negative, got {m}"
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::TokenId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    fn frame(idx: u64, n: usize) -> FrameTokens {
        FrameTokens {
            frame_idx: idx,
            queries: vec![vec![idx as f64, 1.0]; n],
            keys: (0..n).map(|i| vec![idx as f64, i as f64]).collect(),
            values: (0..n).map(|i| vec![i as f64, idx as f64]).collect(),
            positions: vec![None; n],
        }
    }

    fn tok(frame: i64, idx: u64, score: f64) -> CachedToken {
        let mut t = CachedToken::fresh(TokenId::new(frame, idx), vec![1.0], vec![1.0], None);
        t.score = score;
        t
    }

    #[test]
    fn reference_registration() {
        let mut c = TemporalCache::new(0.9, 4, 8);
        c.register_reference(&frame(0, 3)).unwrap();
        assert_eq!(c.snapshot().len(), 3);
        assert!(c.reference().iter().all(|t| t.score == 0.0 && t.count == 1));
        assert!(matches!(
            c.register_reference(&frame(1, 3)),
            Err(Error::ReferenceAlreadyRegistered)
        ));
    }

    #[test]
    fn reference_survives_many_cycles() {
        let mut c = TemporalCache::new(0.9, 2, 3);
        c.register_reference(&frame(0, 3)).unwrap();
        let before: Vec<(Vec<f64>, Vec<f64>, TokenId)> = c
            .reference()
            .iter()
            .map(|t| (t.key.clone(), t.value.clone(), t.id))
            .collect();
        for f in 1..=100 {
            let mass = vec![0.25; c.len()];
            c.update_scores(&mass).unwrap();
            let expelled = c.ingest_scored(&[frame(f, 3)], &[1.0, 0.5, 0.1]).unwrap();
            c.select_anchors(expelled);
        }
        let after: Vec<_> = c
            .reference()
            .iter()
            .map(|t| (t.key.clone(), t.value.clone(), t.id))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn window_is_fifo() {
        let mut c = TemporalCache::new(0.9, 4, 0);
        let first: Vec<_> = (1..=4).map(|f| frame(f, 2)).collect();
        assert!(c.ingest_frames(&first).unwrap().is_empty());
        let second: Vec<_> = (5..=8).map(|f| frame(f, 2)).collect();
        let expelled = c.ingest_frames(&second).unwrap();
        let frames: Vec<i64> = expelled.iter().map(|t| t.id.frame_idx).collect();
        assert_eq!(frames, vec![1, 1, 2, 2, 3, 3, 4, 4]);
    }

    #[test]
    fn interleaved_chunks_match_queue_oracle() {
        let mut c = TemporalCache::new(0.9, 4, 0);
        let mut oracle: VecDeque<u64> = VecDeque::new();
        let mut next = 1;
        for size in [3, 2, 3, 1, 4, 2] {
            let frames: Vec<_> = (next..next + size).map(|f| frame(f, 1)).collect();
            next += size;
            let got: Vec<i64> = c
                .ingest_frames(&frames)
                .unwrap()
                .iter()
                .map(|t| t.id.frame_idx)
                .collect();
            oracle.extend(frames.iter().map(|f| f.frame_idx));
            let mut want = vec![];
            while oracle.len() > 4 {
                want.push(oracle.pop_front().unwrap() as i64);
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn non_monotone_frames_rejected() {
        let mut c = TemporalCache::new(0.9, 4, 0);
        c.ingest_frames(&[frame(3, 1)]).unwrap();
        assert!(matches!(
            c.ingest_frames(&[frame(3, 1)]),
            Err(Error::NonMonotoneFrames { prev: 3, got: 3 })
        ));
    }

    #[test]
    fn geometric_score_accumulation() {
        let mut c = TemporalCache::new(0.9, 4, 0);
        c.register_reference(&frame(0, 1)).unwrap();
        for _ in 0..3 {
            c.update_scores(&[1.0]).unwrap();
        }
        let s = c.reference()[0].score;
        assert!((s - 2.71).abs() < 1e-12);
        assert!((s - (1.0 - 0.9f64.powi(3)) / 0.1).abs() < 1e-12);
    }

    #[test]
    fn decay_only_and_memoryless() {
        let mut c = TemporalCache::new(0.9, 4, 0);
        c.ingest_scored(&[frame(1, 2)], &[2.0, 4.0]).unwrap();
        c.update_scores(&[0.0, 0.0]).unwrap();
        let s: Vec<f64> = c.snapshot().iter().map(|t| t.score).collect();
        assert_eq!(s, vec![0.9 * 2.0, 0.9 * 4.0]);

        let mut c = TemporalCache::new(0.0, 4, 0);
        c.ingest_scored(&[frame(1, 2)], &[2.0, 4.0]).unwrap();
        c.update_scores(&[0.3, 0.7]).unwrap();
        let s: Vec<f64> = c.snapshot().iter().map(|t| t.score).collect();
        assert_eq!(s, vec![0.3, 0.7]);
    }

    #[test]
    fn misaligned_mass_rejected() {
        let mut c = TemporalCache::new(0.9, 4, 0);
        c.register_reference(&frame(0, 2)).unwrap();
        assert!(matches!(
            c.update_scores(&[1.0]),
            Err(Error::IndexMisalignment {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn top_k_selection() {
        let mut c = TemporalCache::new(0.9, 4, 2);
        let evicted = c.select_anchors(vec![tok(1, 0, 5.0), tok(1, 1, 3.0), tok(1, 2, 1.0)]);
        assert_eq!(evicted.len(), 1);
        assert_eq!(evicted[0].score, 1.0);
        assert!(c.anchors().iter().all(|t| t.origin == Origin::Anchor));

        let mut c = TemporalCache::new(0.9, 4, 1);
        let evicted = c.select_anchors(vec![tok(3, 0, 2.0), tok(7, 0, 2.0)]);
        assert_eq!(c.anchors()[0].id.frame_idx, 7);
        assert_eq!(evicted[0].id.frame_idx, 3);

        let mut c = TemporalCache::new(0.9, 4, 5);
        assert!(c
            .select_anchors(vec![tok(1, 0, 1.0), tok(2, 0, 0.0)])
            .is_empty());
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let budget = rng.random_range(0..8);
            let mut c = TemporalCache::new(0.9, 4, budget);
            for round in 0..3 {
                let n = rng.random_range(0..10);
                let cands: Vec<CachedToken> = (0..n)
                    .map(|i| {
                        tok(
                            round * 10 + rng.random_range(0..3),
                            i,
                            rng.random_range(0..4) as f64,
                        )
                    })
                    .collect();
                let mut all = c.anchors().to_vec();
                all.extend(cands.clone());
                c.select_anchors(cands);
                let mut oracle = all.clone();
                oracle.sort_by(|a, b| {
                    b.score
                        .partial_cmp(&a.score)
                        .unwrap()
                        .then(b.id.frame_idx.cmp(&a.id.frame_idx))
                        .then(a.id.token_idx.cmp(&b.id.token_idx))
                });
                oracle.truncate(budget);
                let got: Vec<_> = c.anchors().iter().map(|t| (t.id, t.score)).collect();
                let want: Vec<_> = oracle.iter().map(|t| (t.id, t.score)).collect();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn snapshot_order_and_count() {
        let mut c = TemporalCache::new(0.9, 2, 3);
        c.register_reference(&frame(0, 2)).unwrap();
        assert_eq!(c.snapshot().len(), 2);
        let expelled = c
            .ingest_scored(
                &[frame(1, 2), frame(2, 2), frame(3, 2)],
                &[1.0, 5.0, 0.0, 0.0, 0.0, 0.0],
            )
            .unwrap();
        c.select_anchors(expelled);
        let snap = c.snapshot();
        assert_eq!(
            snap.len(),
            c.reference().len() + c.window_token_count() + c.anchors().len()
        );
        let frames: Vec<i64> = snap.iter().map(|t| t.id.frame_idx).collect();
        assert_eq!(frames, vec![0, 0, 2, 2, 3, 3, 1, 1]);
        assert_eq!(snap[6].score, 5.0);
        let again: Vec<TokenId> = c.snapshot().iter().map(|t| t.id).collect();
        assert_eq!(again, snap.iter().map(|t| t.id).collect::<Vec<_>>());
    }

    #[test]
    fn half_precision_quantizes_on_ingest() {
        let mut c = TemporalCache::new(0.9, 4, 0).with_half_precision(true);
        let mut f = frame(1, 1);
        f.keys[0] = vec![0.1, 1e6];
        c.ingest_frames(&[f]).unwrap();
        assert_eq!(c.snapshot()[0].key, vec![0.0999755859375, 65504.0]);
        assert_eq!(c.half_saturations(), 1);
    }
}
