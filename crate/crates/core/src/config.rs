//! Acceptor configurations and their quorum systems.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::round::NodeId;

/// Opaque configuration label. Two rounds may use the same label when a
/// leader re-uses an earlier configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConfigId(pub u64);

pub type Quorum = BTreeSet<NodeId>;

/// A set of acceptors with explicit Phase 1 and Phase 2 quorum families.
///
/// Construction does not validate; call [`Configuration::validate`] (or use a
/// constructor like [`Configuration::majority`]) before handing it to a
/// proposer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration {
    id: ConfigId,
    acceptors: BTreeSet<NodeId>,
    phase1_quorums: Vec<Quorum>,
    phase2_quorums: Vec<Quorum>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuorumPhase {
    Phase1,
    Phase2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoAcceptors,
    EmptyFamily(QuorumPhase),
    EmptyQuorum { phase: QuorumPhase, index: usize },
    NotASubset { phase: QuorumPhase, index: usize },
    /// A Phase 1 quorum and a Phase 2 quorum with no acceptor in common.
    Disjoint { phase1: Quorum, phase2: Quorum },
}

/// Every way a configuration fails its invariants.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ViolationReport {
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn disjoint_pairs(&self) -> impl Iterator<Item = (&Quorum, &Quorum)> {
        self.violations.iter().filter_map(|v| match v {
            Violation::Disjoint { phase1, phase2 } => Some((phase1, phase2)),
            _ => None,
        })
    }
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} configuration violation(s)", self.violations.len())?;
        for v in &self.violations {
            write!(f, "; {:?}", v)?;
        }
        Ok(())
    }
}

impl Configuration {
    pub fn new(
        id: ConfigId,
        acceptors: impl IntoIterator<Item = NodeId>,
        phase1_quorums: Vec<Quorum>,
        phase2_quorums: Vec<Quorum>,
    ) -> Self {
        Configuration {
            id,
            acceptors: acceptors.into_iter().collect(),
            phase1_quorums,
            phase2_quorums,
        }
    }

    /// Both quorum families are every subset of size `floor(n/2) + 1`.
    pub fn majority(id: ConfigId, acceptors: impl IntoIterator<Item = NodeId>) -> Self {
        let acceptors: Vec<NodeId> = acceptors.into_iter().collect();
        let size = acceptors.len() / 2 + 1;
        let quorums = subsets_of_size(&acceptors, size);
        Configuration::new(id, acceptors, quorums.clone(), quorums)
    }

    /// Singleton Phase 1 quorums and one unanimous Phase 2 quorum, the
    /// configuration that lets Fast Paxos run on `f + 1` acceptors.
    pub fn unanimous(id: ConfigId, acceptors: impl IntoIterator<Item = NodeId>) -> Self {
        let acceptors: BTreeSet<NodeId> = acceptors.into_iter().collect();
        let phase1 = acceptors.iter().map(|a| [*a].into_iter().collect()).collect();
        let phase2 = alloc::vec![acceptors.clone()];
        Configuration::new(id, acceptors, phase1, phase2)
    }

    pub fn id(&self) -> ConfigId {
        self.id
    }

    pub fn acceptors(&self) -> &BTreeSet<NodeId> {
        &self.acceptors
    }

    pub fn phase1_quorums(&self) -> &[Quorum] {
        &self.phase1_quorums
    }

    pub fn phase2_quorums(&self) -> &[Quorum] {
        &self.phase2_quorums
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.acceptors.contains(&id)
    }

    /// True if `responders` contains some Phase 1 quorum. Nodes outside the
    /// configuration are ignored.
    pub fn is_phase1_quorum(&self, responders: &BTreeSet<NodeId>) -> bool {
        self.phase1_quorums.iter().any(|q| q.is_subset(responders))
    }

    pub fn is_phase2_quorum(&self, responders: &BTreeSet<NodeId>) -> bool {
        self.phase2_quorums.iter().any(|q| q.is_subset(responders))
    }

    /// Picks a Phase 2 quorum by index (modulo the family size); used by
    /// thrifty leaders with a random index.
    pub fn phase2_quorum_at(&self, index: u64) -> &Quorum {
        let n = self.phase2_quorums.len() as u64;
        &self.phase2_quorums[(index % n) as usize]
    }

    /// Checks every configuration invariant and lists all violations.
    pub fn validate(&self) -> Result<(), ViolationReport> {
        let mut report = ViolationReport::default();
        if self.acceptors.is_empty() {
            report.violations.push(Violation::NoAcceptors);
        }
        for (phase, family) in [
            (QuorumPhase::Phase1, &self.phase1_quorums),
            (QuorumPhase::Phase2, &self.phase2_quorums),
        ] {
            if family.is_empty() {
                report.violations.push(Violation::EmptyFamily(phase));
            }
            for (index, q) in family.iter().enumerate() {
                if q.is_empty() {
                    report.violations.push(Violation::EmptyQuorum { phase, index });
                }
                if !q.is_subset(&self.acceptors) {
                    report.violations.push(Violation::NotASubset { phase, index });
                }
            }
        }
        for p1 in &self.phase1_quorums {
            for p2 in &self.phase2_quorums {
                if p1.is_disjoint(p2) {
                    report.violations.push(Violation::Disjoint {
                        phase1: p1.clone(),
                        phase2: p2.clone(),
                    });
                }
            }
        }
        if report.violations.is_empty() {
            Ok(())
        } else {
            Err(report)
        }
    }
}

pub fn validate_configuration(config: &Configuration) -> Result<(), ViolationReport> {
    config.validate()
}

/// All `size`-element subsets of `items`, in lexicographic index order.
pub fn subsets_of_size(items: &[NodeId], size: usize) -> Vec<Quorum> {
    fn go(items: &[NodeId], size: usize, start: usize, cur: &mut Vec<NodeId>, out: &mut Vec<Quorum>) {
        if cur.len() == size {
            out.push(cur.iter().copied().collect());
            return;
        }
        for i in start..items.len() {
            if items.len() - i < size - cur.len() {
                break;
            }
            cur.push(items[i]);
            go(items, size, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if size <= items.len() {
        go(items, size, 0, &mut Vec::new(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ids(xs: &[u32]) -> Vec<NodeId> {
        xs.iter().map(|x| NodeId(*x)).collect()
    }

    fn set(xs: &[u32]) -> Quorum {
        xs.iter().map(|x| NodeId(*x)).collect()
    }

    /// Independent oracle: brute-force pairwise intersection using bitmasks
    /// over acceptor indices.
    fn bitmask_disjoint_pairs(p1: &[u32], p2: &[u32]) -> usize {
        p1.iter()
            .flat_map(|a| p2.iter().map(move |b| (a, b)))
            .filter(|(a, b)| *a & *b == 0)
            .count()
    }

    fn masks_of_size(n: usize, k: u32) -> Vec<u32> {
        (0u32..(1 << n)).filter(|m| m.count_ones() == k).collect()
    }

    fn from_mask(m: u32) -> Quorum {
        (0..32).filter(|i| m & (1 << i) != 0).map(NodeId).collect()
    }

    #[test]
    fn majority_of_three_is_valid() {
        let c = Configuration::majority(ConfigId(0), ids(&[1, 2, 3]));
        assert_eq!(c.phase1_quorums().len(), 3);
        assert!(c.phase1_quorums().iter().all(|q| q.len() == 2));
        assert_eq!(c.validate(), Ok(()));
    }

    #[test]
    fn disjoint_singletons_are_reported() {
        let c = Configuration::new(ConfigId(0), ids(&[1, 2]), vec![set(&[1])], vec![set(&[2])]);
        let report = c.validate().unwrap_err();
        let pairs: Vec<_> = report.disjoint_pairs().collect();
        assert_eq!(pairs, vec![(&set(&[1]), &set(&[2]))]);
    }

    #[test]
    fn three_of_four_against_two_of_four() {
        // oracle: count disjoint (P1, P2) pairs by brute force
        let p1 = masks_of_size(4, 3);
        let p2 = masks_of_size(4, 2);
        let expected_disjoint = bitmask_disjoint_pairs(&p1, &p2);
        assert_eq!(expected_disjoint, 0, "3 + 2 > 4, so no pair can be disjoint");

        let c = Configuration::new(
            ConfigId(0),
            ids(&[0, 1, 2, 3]),
            p1.iter().map(|m| from_mask(*m)).collect(),
            p2.iter().map(|m| from_mask(*m)).collect(),
        );
        assert_eq!(c.validate(), Ok(()));
        assert_eq!(c.validate().err().map(|r| r.disjoint_pairs().count()).unwrap_or(0), expected_disjoint);
    }

    #[test]
    fn two_of_four_against_two_of_four_has_disjoint_pairs() {
        let p = masks_of_size(4, 2);
        let expected = bitmask_disjoint_pairs(&p, &p);
        assert_eq!(expected, 6);
        let fam: Vec<Quorum> = p.iter().map(|m| from_mask(*m)).collect();
        let c = Configuration::new(ConfigId(0), ids(&[0, 1, 2, 3]), fam.clone(), fam);
        assert_eq!(c.validate().unwrap_err().disjoint_pairs().count(), expected);
    }

    #[test]
    fn majority_systems_validate_for_f_up_to_four() {
        for f in 1..=4usize {
            let n = 2 * f + 1;
            let acceptors: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
            let c = Configuration::majority(ConfigId(f as u64), acceptors);
            assert!(c.phase1_quorums().iter().all(|q| q.len() == f + 1));
            assert_eq!(c.validate(), Ok(()), "f = {f}");
        }
    }

    #[test]
    fn structural_violations() {
        let c = Configuration::new(ConfigId(0), ids(&[1, 2]), vec![], vec![set(&[3])]);
        let v = c.validate().unwrap_err().violations;
        assert!(v.contains(&Violation::EmptyFamily(QuorumPhase::Phase1)));
        assert!(v.contains(&Violation::NotASubset {
            phase: QuorumPhase::Phase2,
            index: 0
        }));
    }

    #[test]
    fn unanimous_configuration() {
        let c = Configuration::unanimous(ConfigId(0), ids(&[1, 2]));
        assert_eq!(c.validate(), Ok(()));
        assert!(c.is_phase1_quorum(&set(&[2])));
        assert!(!c.is_phase2_quorum(&set(&[2])));
        assert!(c.is_phase2_quorum(&set(&[1, 2])));
    }

    #[test]
    fn quorum_checks_ignore_outsiders() {
        let c = Configuration::majority(ConfigId(0), ids(&[1, 2, 3]));
        assert!(c.is_phase2_quorum(&set(&[1, 3, 9])));
        assert!(!c.is_phase2_quorum(&set(&[1, 9])));
    }
}
