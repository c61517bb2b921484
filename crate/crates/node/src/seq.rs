use std::collections::BTreeSet;

/// Set of sequence numbers (starting at 1) kept as a contiguous watermark plus
/// the sparse values above it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeqTracker {
    through: u64,
    above: BTreeSet<u64>,
}

impl SeqTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` if `seq` was not seen before.
    pub fn insert(&mut self, seq: u64) -> bool {
        if seq == 0 || seq <= self.through || !self.above.insert(seq) {
            return false;
        }
        while self.above.remove(&(self.through + 1)) {
            self.through += 1;
        }
        true
    }

    pub fn contains(&self, seq: u64) -> bool {
        seq != 0 && (seq <= self.through || self.above.contains(&seq))
    }

    /// Every seq in `1..=contiguous()` has been seen.
    pub fn contiguous(&self) -> u64 {
        self.through
    }

    pub fn highest(&self) -> u64 {
        self.above.last().copied().unwrap_or(self.through)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn out_of_order() {
        let mut t = SeqTracker::new();
        assert!(t.insert(3));
        assert!(t.insert(1));
        assert_eq!(t.contiguous(), 1);
        assert!(!t.insert(3));
        assert!(t.insert(2));
        assert_eq!(t.contiguous(), 3);
        assert_eq!(t.highest(), 3);
        assert!(!t.contains(4));
    }

    proptest! {
        #[test]
        fn matches_hash_set(seqs in prop::collection::vec(1u64..64, 0..200)) {
            let mut t = SeqTracker::new();
            let mut oracle = HashSet::new();
            for s in seqs {
                prop_assert_eq!(t.insert(s), oracle.insert(s));
            }
            for s in 0..70 {
                prop_assert_eq!(t.contains(s), s >= 1 && oracle.contains(&s));
            }
        }
    }
}
