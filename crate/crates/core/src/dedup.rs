//! At-most-once delivery per `(sender, seq)`.
//!
//! Sequence numbers are `incarnation << 32 | counter`. A sender that restarts
//! bumps its incarnation, which resets the receiver's window for it.

use alloc::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::round::NodeId;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
struct Window {
    incarnation: u32,
    /// Every counter below this was delivered or has aged out.
    floor: u32,
    above: BTreeSet<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct DedupFilter {
    capacity: usize,
    senders: BTreeMap<NodeId, Window>,
}

impl DedupFilter {
    /// `capacity` bounds how many out-of-order counters are remembered per
    /// sender; older ones are treated as delivered.
    pub fn new(capacity: usize) -> Self {
        DedupFilter {
            capacity: capacity.max(1),
            senders: BTreeMap::new(),
        }
    }

    /// Returns `true` the first time `(from, seq)` is seen.
    pub fn accept(&mut self, from: NodeId, seq: u64) -> bool {
        let incarnation = (seq >> 32) as u32;
        let counter = seq as u32;
        let w = self.senders.entry(from).or_insert(Window {
            incarnation,
            floor: 0,
            above: BTreeSet::new(),
        });
        if incarnation < w.incarnation {
            return false;
        }
        if incarnation > w.incarnation {
            *w = Window {
                incarnation,
                floor: 0,
                above: BTreeSet::new(),
            };
        }
        if counter < w.floor || !w.above.insert(counter) {
            return false;
        }
        while w.above.remove(&w.floor) {
            w.floor += 1;
        }
        while w.above.len() > self.capacity {
            let oldest = w.above.pop_first().expect("non-empty");
            w.floor = oldest + 1;
            while w.above.remove(&w.floor) {
                w.floor += 1;
            }
        }
        true
    }
}

/// Produces sequence numbers for one sender incarnation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct SeqGen {
    incarnation: u32,
    counter: u32,
}

impl SeqGen {
    pub fn new(incarnation: u32) -> Self {
        SeqGen { incarnation, counter: 0 }
    }

    pub fn next(&mut self) -> u64 {
        let seq = ((self.incarnation as u64) << 32) | self.counter as u64;
        self.counter = self.counter.checked_add(1).expect("sequence space exhausted");
        seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    const A: NodeId = NodeId(1);

    #[test]
    fn rejects_repeats_in_any_order() {
        let mut f = DedupFilter::new(64);
        for s in [3, 0, 2, 1, 5] {
            assert!(f.accept(A, s));
        }
        for s in [0, 1, 2, 3, 5] {
            assert!(!f.accept(A, s));
        }
        assert!(f.accept(A, 4));
        assert!(f.accept(NodeId(2), 0));
    }

    #[test]
    fn new_incarnation_resets_and_old_one_is_refused() {
        let mut f = DedupFilter::new(8);
        let mut g0 = SeqGen::new(0);
        let a = g0.next();
        assert!(f.accept(A, a));
        let mut g1 = SeqGen::new(1);
        assert!(f.accept(A, g1.next()));
        assert!(!f.accept(A, g0.next()));
    }

    proptest! {
        /// Against a set of everything delivered so far: with capacity at
        /// least the stream length, the filter is exact.
        #[test]
        fn exact_within_capacity(stream in proptest::collection::vec(0u64..40, 0..200)) {
            let mut f = DedupFilter::new(64);
            let mut seen = alloc::collections::BTreeSet::new();
            for s in stream {
                prop_assert_eq!(f.accept(A, s), seen.insert(s));
            }
        }

        /// With a small window nothing is ever delivered twice.
        #[test]
        fn never_delivers_twice(stream in proptest::collection::vec(0u64..100, 0..300)) {
            let mut f = DedupFilter::new(4);
            let delivered: Vec<u64> = stream.into_iter().filter(|s| f.accept(A, *s)).collect();
            let unique: alloc::collections::BTreeSet<_> = delivered.iter().collect();
            prop_assert_eq!(unique.len(), delivered.len());
        }
    }
}
