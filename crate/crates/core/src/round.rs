//! Rounds (ballots) and node identifiers.
//!
//! A round is the triple `(counter, owner, sub)` ordered lexicographically.
//! The proposer that owns `(c, p, s)` also owns `(c, p, s + 1)`, which is what
//! lets a leader advance to the next round without losing ownership.

use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of any node in a deployment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundError {
    /// The bottom round has no owner and therefore no successor.
    Bottom,
}

impl fmt::Display for RoundError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoundError::Bottom => f.write_str("the bottom round has no successor"),
        }
    }
}

/// A totally ordered round.
///
/// Field order matters: the derived `Ord` compares `counter`, then `owner`,
/// then `sub`. Bottom is encoded as `counter == -1` and sorts below every real
/// round.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Round {
    counter: i64,
    owner: NodeId,
    sub: u64,
}

impl Round {
    /// The distinguished round below every real round (`-1` in the usual
    /// integer presentation of Paxos).
    pub const BOTTOM: Round = Round {
        counter: -1,
        owner: NodeId(0),
        sub: 0,
    };

    pub fn new(counter: u64, owner: NodeId, sub: u64) -> Self {
        assert!(counter <= i64::MAX as u64, "round counter overflow");
        Round {
            counter: counter as i64,
            owner,
            sub,
        }
    }

    pub fn is_bottom(&self) -> bool {
        self.counter < 0
    }

    /// The counter, or `None` for bottom.
    pub fn counter(&self) -> Option<u64> {
        (!self.is_bottom()).then_some(self.counter as u64)
    }

    pub fn owner(&self) -> Option<NodeId> {
        (!self.is_bottom()).then_some(self.owner)
    }

    pub fn sub(&self) -> u64 {
        self.sub
    }

    pub fn is_owned_by(&self, id: NodeId) -> bool {
        !self.is_bottom() && self.owner == id
    }

    /// The next round owned by the same proposer: `(counter, owner, sub + 1)`.
    pub fn successor(&self) -> Result<Round, RoundError> {
        if self.is_bottom() {
            return Err(RoundError::Bottom);
        }
        Ok(Round {
            sub: self.sub + 1,
            ..*self
        })
    }

    /// The smallest round of the form `(c, owner, 0)` that is strictly larger
    /// than `seen`. Used when a proposer starts a fresh leadership term.
    pub fn first_above(seen: Round, owner: NodeId) -> Round {
        if seen.is_bottom() {
            return Round::new(0, owner, 0);
        }
        let c = seen.counter as u64;
        if owner > seen.owner {
            Round::new(c, owner, 0)
        } else {
            Round::new(c + 1, owner, 0)
        }
    }
}

/// Lexicographic comparison on `(counter, owner, sub)`; bottom is least.
pub fn round_compare(a: &Round, b: &Round) -> Ordering {
    a.cmp(b)
}

impl Default for Round {
    fn default() -> Self {
        Round::BOTTOM
    }
}

impl fmt::Debug for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_bottom() {
            f.write_str("⊥")
        } else {
            write!(f, "({},{},{})", self.counter, self.owner.0, self.sub)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: NodeId = NodeId(1);
    const B: NodeId = NodeId(2);

    #[test]
    fn ordering_matches_the_tuple_display() {
        assert_eq!(
            round_compare(&Round::new(0, A, 0), &Round::new(0, A, 1)),
            Ordering::Less
        );
        assert_eq!(
            round_compare(&Round::new(1, A, 0), &Round::new(1, A, 0)),
            Ordering::Equal
        );
        assert_eq!(
            round_compare(&Round::new(0, B, 3), &Round::new(1, A, 0)),
            Ordering::Less
        );
        // every a-round with counter 0 precedes every b-round with counter 0
        assert!(Round::new(0, A, 1_000_000) < Round::new(0, B, 0));
    }

    #[test]
    fn bottom_is_least() {
        assert!(Round::BOTTOM < Round::new(0, NodeId(0), 0));
        assert!(Round::BOTTOM.is_bottom());
        assert_eq!(Round::BOTTOM.successor(), Err(RoundError::Bottom));
        assert_eq!(Round::BOTTOM.owner(), None);
    }

    #[test]
    fn successor_examples() {
        assert_eq!(Round::new(0, A, 0).successor(), Ok(Round::new(0, A, 1)));
        assert_eq!(Round::new(3, B, 7).successor(), Ok(Round::new(3, B, 8)));
    }

    #[test]
    fn first_above_is_owned_and_larger() {
        let seen = Round::new(4, B, 9);
        let r = Round::first_above(seen, A);
        assert_eq!(r, Round::new(5, A, 0));
        let r = Round::first_above(Round::new(4, A, 9), B);
        assert_eq!(r, Round::new(4, B, 0));
        assert_eq!(Round::first_above(Round::BOTTOM, A), Round::new(0, A, 0));
    }

    fn arb_round() -> impl Strategy<Value = Round> {
        prop_oneof![
            1 => Just(Round::BOTTOM),
            9 => (0u64..1000, 0u32..8, 0u64..1000).prop_map(|(c, o, s)| Round::new(c, NodeId(o), s)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn successor_is_strictly_greater_and_same_owner(r in arb_round().prop_filter("real", |r| !r.is_bottom())) {
            let s = r.successor().unwrap();
            prop_assert_eq!(round_compare(&r, &s), Ordering::Less);
            prop_assert_eq!(s.owner(), r.owner());
        }

        #[test]
        fn first_above_is_strictly_greater(seen in arb_round(), owner in 0u32..8) {
            let r = Round::first_above(seen, NodeId(owner));
            prop_assert!(r > seen);
            prop_assert!(r.is_owned_by(NodeId(owner)));
        }
    }

    /// Total-order laws checked by enumeration over a small universe.
    #[test]
    fn compare_is_a_total_order_on_a_small_universe() {
        let mut universe = alloc::vec![Round::BOTTOM];
        for c in 0..3 {
            for o in 0..3 {
                for s in 0..3 {
                    universe.push(Round::new(c, NodeId(o), s));
                }
            }
        }
        let key = |r: &Round| -> (i64, u32, u64) {
            if r.is_bottom() {
                (-1, 0, 0)
            } else {
                (r.counter, r.owner.0, r.sub)
            }
        };
        for a in &universe {
            for b in &universe {
                let ab = round_compare(a, b);
                // agrees with the tuple order
                assert_eq!(ab, key(a).cmp(&key(b)));
                // antisymmetry and totality
                assert_eq!(ab, round_compare(b, a).reverse());
                if ab == Ordering::Equal {
                    assert_eq!(a, b);
                }
                for c in &universe {
                    if ab != Ordering::Greater && round_compare(b, c) != Ordering::Greater {
                        assert_ne!(round_compare(a, c), Ordering::Greater);
                    }
                }
            }
        }
    }
}
