//! The safety oracle. It never trusts what nodes claim is chosen: a value is
//! chosen in a slot at round `i` exactly when some Phase 2 quorum of round
//! `i`'s configuration voted for it there.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use mmpaxos_core::{Configuration, Event, Instance, NodeId, Round, Slot, Time, Value};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// Two values chosen in one slot.
    ConflictingChoice {
        instance: Instance,
        slot: Slot,
        first: (Round, Value),
        second: (Round, Value),
    },
    /// A round proposed a value other than the one chosen in a lower round.
    UnsafeProposal {
        instance: Instance,
        slot: Slot,
        chosen: (Round, Value),
        proposed: (Round, Value),
    },
    /// Two replicas executed different values in one slot.
    DivergentExecution { slot: Slot, a: (NodeId, Value), b: (NodeId, Value) },
    /// A replica executed a value that was never chosen there.
    ExecutedUnchosen { node: NodeId, slot: Slot, value: Value },
    /// A round was announced with two configurations, or a matchmaker
    /// returned a configuration other than the one registered.
    ConfigMismatch { round: Round, node: NodeId },
    Halt { node: NodeId, time: Time, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ConflictingChoice {
                instance,
                slot,
                first,
                second,
            } => write!(
                f,
                "{instance:?} slot {slot}: {:?} chosen in {} and {:?} chosen in {}",
                first.1, first.0, second.1, second.0
            ),
            Violation::UnsafeProposal {
                instance,
                slot,
                chosen,
                proposed,
            } => write!(
                f,
                "{instance:?} slot {slot}: {} proposed {:?} but {} chose {:?}",
                proposed.0, proposed.1, chosen.0, chosen.1
            ),
            Violation::DivergentExecution { slot, a, b } => {
                write!(f, "slot {slot}: node {} executed {:?}, node {} executed {:?}", a.0, a.1, b.0, b.1)
            }
            Violation::ExecutedUnchosen { node, slot, value } => {
                write!(f, "node {node} executed {value:?} at {slot}, which was never chosen")
            }
            Violation::ConfigMismatch { round, node } => {
                write!(f, "conflicting configurations for round {round} reported by {node}")
            }
            Violation::Halt { node, time, reason } => write!(f, "node {node} halted at {time}: {reason}"),
        }
    }
}

type VoteKey = (Instance, Slot, Round, Value);

#[derive(Debug, Default)]
pub struct Oracle {
    configs: HashMap<(Instance, Round), Configuration>,
    voters: HashMap<VoteKey, BTreeSet<NodeId>>,
    /// Votes cast before their round's configuration was seen.
    orphans: Vec<(NodeId, VoteKey)>,
    /// Every value chosen per slot, with the lowest round it was chosen in.
    chosen: HashMap<(Instance, Slot), BTreeMap<Value, Round>>,
    proposals: HashMap<(Instance, Slot), BTreeSet<(Round, Value)>>,
    executed: BTreeMap<Slot, (NodeId, Value)>,
    executed_by: Vec<(NodeId, Slot, Value)>,
    violations: Vec<Violation>,
}

impl Oracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, time: Time, node: NodeId, event: &Event) {
        match event {
            Event::RoundConfig { instance, round, config } => {
                match self.configs.get(&(*instance, *round)) {
                    Some(c) if c != config => self.violations.push(Violation::ConfigMismatch { round: *round, node }),
                    Some(_) => {}
                    None => {
                        self.configs.insert((*instance, *round), config.clone());
                        let orphans = std::mem::take(&mut self.orphans);
                        for (voter, key) in orphans {
                            self.vote(voter, key);
                        }
                    }
                }
            }
            Event::Voted {
                instance,
                slot,
                round,
                value,
            } => self.vote(node, (*instance, *slot, *round, value.clone())),
            Event::Proposed {
                instance,
                slot,
                round,
                value: Some(value),
            } => {
                self.proposals
                    .entry((*instance, *slot))
                    .or_default()
                    .insert((*round, value.clone()));
            }
            Event::MatchReplied { history, .. } => {
                for (r, c) in history {
                    if self.configs.get(&(Instance::Log, *r)).is_some_and(|known| known != c) {
                        self.violations.push(Violation::ConfigMismatch { round: *r, node });
                    }
                }
            }
            Event::Executed { slot, value } => {
                match self.executed.get(slot) {
                    Some((other, v)) if v != value => self.violations.push(Violation::DivergentExecution {
                        slot: *slot,
                        a: (*other, v.clone()),
                        b: (node, value.clone()),
                    }),
                    Some(_) => {}
                    None => {
                        self.executed.insert(*slot, (node, value.clone()));
                    }
                }
                self.executed_by.push((node, *slot, value.clone()));
            }
            Event::ConsistencyHalt { reason } => self.violations.push(Violation::Halt {
                node,
                time,
                reason: reason.clone(),
            }),
            _ => {}
        }
    }

    fn vote(&mut self, voter: NodeId, key: VoteKey) {
        let (instance, slot, round, value) = key.clone();
        let Some(config) = self.configs.get(&(instance, round)) else {
            self.orphans.push((voter, key));
            return;
        };
        if !config.contains(voter) {
            return;
        }
        let voters = self.voters.entry(key).or_default();
        if !voters.insert(voter) || !config.is_phase2_quorum(voters) {
            return;
        }
        let per_slot = self.chosen.entry((instance, slot)).or_default();
        let first = per_slot.iter().next().map(|(v, r)| (*r, v.clone()));
        let lowest = per_slot.entry(value.clone()).or_insert(round);
        *lowest = (*lowest).min(round);
        if let Some(first) = first {
            if first.1 != value {
                self.violations.push(Violation::ConflictingChoice {
                    instance,
                    slot,
                    first,
                    second: (round, value),
                });
            }
        }
    }

    pub fn chosen(&self, instance: Instance, slot: Slot) -> Option<&Value> {
        self.chosen.get(&(instance, slot)).and_then(|m| m.keys().next())
    }

    pub fn chosen_count(&self, instance: Instance) -> usize {
        self.chosen.keys().filter(|(i, _)| *i == instance).count()
    }

    /// Runs the end-of-trace checks and returns every violation found.
    pub fn finish(mut self) -> Vec<Violation> {
        for ((instance, slot), proposals) in &self.proposals {
            let Some(chosen) = self.chosen.get(&(*instance, *slot)) else { continue };
            for (value, round) in chosen {
                for (pr, pv) in proposals {
                    if pr > round && pv != value {
                        self.violations.push(Violation::UnsafeProposal {
                            instance: *instance,
                            slot: *slot,
                            chosen: (*round, value.clone()),
                            proposed: (*pr, pv.clone()),
                        });
                    }
                }
            }
        }
        for (node, slot, value) in &self.executed_by {
            let ok = self
                .chosen
                .get(&(Instance::Log, *slot))
                .is_some_and(|m| m.contains_key(value));
            if !ok {
                self.violations.push(Violation::ExecutedUnchosen {
                    node: *node,
                    slot: *slot,
                    value: value.clone(),
                });
            }
        }
        self.violations
    }
}

/// Feeds a whole trace through a fresh oracle.
pub fn check_safety<'a>(records: impl IntoIterator<Item = (Time, NodeId, &'a Event)>) -> Vec<Violation> {
    let mut o = Oracle::new();
    for (t, n, e) in records {
        o.observe(t, n, e);
    }
    o.finish()
}
