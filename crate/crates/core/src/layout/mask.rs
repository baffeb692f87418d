use super::{Arrangement, LayoutSpec};

/// Allowed (query, key) attention pairs over `history_len` layout tokens
/// followed by `candidate_count` packed candidate tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    allowed: Vec<bool>,
    pub history_len: usize,
    pub candidate_count: usize,
}

impl VisibilityMask {
    /// History block causal; each candidate sees all history and itself.
    pub fn block_causal(history_len: usize, candidate_count: usize) -> Self {
        let n = history_len + candidate_count;
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            let row = &mut allowed[q * n..(q + 1) * n];
            if q < history_len {
                row[..=q].fill(true);
            } else {
                row[..history_len].fill(true);
                row[q] = true;
            }
        }
        Self { allowed, history_len, candidate_count }
    }

    /// Every position sees every position.
    pub fn full(len: usize) -> Self {
        Self { allowed: vec![true; len * len], history_len: len, candidate_count: 0 }
    }

    pub fn size(&self) -> usize {
        self.history_len + self.candidate_count
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size() + key]
    }

    /// Row-major flattened matrix.
    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn row(&self, query: usize) -> &[bool] {
        let n = self.size();
        &self.allowed[query * n..(query + 1) * n]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&b| b).count()
    }
}

/// Mask for `steps` interactions under `spec` plus `candidates` packed
/// candidate tokens.
pub fn build_mask(spec: &LayoutSpec, steps: usize, candidates: usize) -> VisibilityMask {
    assert!(steps >= 1, "build_mask needs at least one interaction");
    let len = spec.token_count(steps);
    let mask = VisibilityMask::block_causal(len, candidates);
    if spec.arrangement == Arrangement::Interleaved {
        // Same-step item token precedes its action token, so plain causality
        // already grants the action token that visibility.
        debug_assert!((0..steps).all(|t| mask.allowed(2 * t + 1, 2 * t)));
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_three_by_three() {
        let m = build_mask(&LayoutSpec::preset("LAC").unwrap(), 3, 0);
        assert_eq!(m.count_allowed(), 6);
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(m.allowed(q, k), k <= q);
            }
        }
    }

    #[test]
    fn two_history_two_candidates() {
        let m = build_mask(&LayoutSpec::preset("LAC").unwrap(), 2, 2);
        assert_eq!(m.count_allowed(), 9);
        assert_eq!(m.row(2), &[true, true, true, false]);
        assert_eq!(m.row(3), &[true, true, false, true]);
    }

    #[test]
    fn first_row_sees_only_itself() {
        for (t, c) in [(1, 0), (3, 4), (5, 1)] {
            let m = build_mask(&LayoutSpec::preset("INTERLEAVED").unwrap(), t, c);
            assert_eq!(m.row(0).iter().filter(|&&b| b).count(), 1);
            assert!(m.allowed(0, 0));
            assert!((0..m.size()).all(|q| m.row(q).iter().any(|&b| b)));
        }
    }

    #[test]
    fn interleaved_history_is_twice_as_long() {
        let m = build_mask(&LayoutSpec::preset("INTERLEAVED").unwrap(), 4, 3);
        assert_eq!((m.history_len, m.size()), (8, 11));
    }
}
