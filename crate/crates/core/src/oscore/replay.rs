use std::collections::BTreeSet;

/// Sliding replay window over received partial IVs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayWindow {
    size: u64,
    synchronized: bool,
    highest: Option<u64>,
    /// Nothing below this is accepted; raised by `synchronize`.
    floor: u64,
    seen: BTreeSet<u64>,
}

impl ReplayWindow {
    /// A window that accepts any sequence number not seen before.
    pub fn new(size: u64) -> Self {
        ReplayWindow { size: size.max(1), synchronized: true, highest: None, floor: 0, seen: BTreeSet::new() }
    }

    /// A window that must be initialized (for example by an Echo exchange)
    /// before it accepts anything.
    pub fn unsynchronized(size: u64) -> Self {
        ReplayWindow { synchronized: false, ..Self::new(size) }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn is_synchronized(&self) -> bool {
        self.synchronized
    }

    pub fn highest(&self) -> Option<u64> {
        self.highest
    }

    /// Initializes the window so that `seq` counts as received and nothing
    /// older is accepted.
    pub fn synchronize(&mut self, seq: u64) {
        self.synchronized = true;
        self.floor = seq + 1;
        self.highest = Some(seq);
        self.seen.clear();
        self.seen.insert(seq);
    }

    /// Would `seq` be accepted?
    pub fn check(&self, seq: u64) -> bool {
        if !self.synchronized || seq < self.floor {
            return false;
        }
        match self.highest {
            None => true,
            Some(h) if seq > h => true,
            Some(h) => h - seq < self.size && !self.seen.contains(&seq),
        }
    }

    /// Records `seq`; returns false (and changes nothing) if it is a replay
    /// or too old.
    pub fn accept(&mut self, seq: u64) -> bool {
        if !self.check(seq) {
            return false;
        }
        self.seen.insert(seq);
        if self.highest.is_none_or(|h| seq > h) {
            self.highest = Some(seq);
            let floor = seq.saturating_sub(self.size - 1);
            self.seen = self.seen.split_off(&floor);
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn in_window_reordering() {
        let mut w = ReplayWindow::new(32);
        assert!(w.accept(5));
        assert!(w.accept(3));
        assert!(!w.accept(3));
        assert!(w.accept(40));
        assert!(!w.accept(8), "below window");
        assert!(w.accept(9));
        assert!(!w.accept(40));
    }

    #[test]
    fn unsynchronized_rejects_until_initialized() {
        let mut w = ReplayWindow::unsynchronized(32);
        assert!(!w.accept(0));
        w.synchronize(7);
        assert!(!w.accept(7));
        assert!(!w.accept(6));
        assert!(w.accept(9));
        assert!(w.accept(8));
    }

    proptest! {
        #[test]
        fn matches_reference_model(seqs in prop::collection::vec(0u64..200, 0..400), size in 1u64..80) {
            let mut w = ReplayWindow::new(size);
            let mut accepted = std::collections::HashSet::new();
            let mut max: Option<u64> = None;
            for s in seqs {
                let expect = match max {
                    None => true,
                    Some(m) => s > m || (m - s < size && !accepted.contains(&s)),
                };
                prop_assert_eq!(w.accept(s), expect);
                if expect {
                    prop_assert!(accepted.insert(s));
                    max = Some(max.map_or(s, |m| m.max(s)));
                }
            }
        }
    }
}
