//! Acceptors: one promised round spanning every log slot, plus per-slot votes.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::message::Message;
use crate::process::{Event, JournalRecord, Outbox};
use crate::round::{NodeId, Round};
use crate::value::{Instance, Slot, SlotRange, Value, Vote};

/// Seeded bugs used to show that the safety oracle has teeth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AcceptorMutation {
    #[default]
    None,
    /// Votes in `Phase2A` rounds below the promise.
    AcceptLowerRounds,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Phase1Reply {
    pub votes: Vec<(Slot, Vote)>,
    pub chosen: Vec<SlotRange>,
}

/// Returned instead of a reply when a message's round is below the promise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rejected {
    pub promised: Round,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub struct AcceptorState {
    promised: Round,
    votes: BTreeMap<Slot, Vote>,
    /// Disjoint, non-adjacent intervals of slots known chosen, keyed by first
    /// slot.
    hints: BTreeMap<Slot, Slot>,
    /// Fast mode: the round in which "any" was authorized, and by whom.
    any: Option<(Round, NodeId)>,
    mutation: AcceptorMutation,
}

impl AcceptorState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mutation(mutation: AcceptorMutation) -> Self {
        AcceptorState {
            mutation,
            ..Self::default()
        }
    }

    pub fn promised(&self) -> Round {
        self.promised
    }

    pub fn vote(&self, slot: Slot) -> Option<&Vote> {
        self.votes.get(&slot)
    }

    pub fn votes(&self) -> &BTreeMap<Slot, Vote> {
        &self.votes
    }

    pub fn is_hinted(&self, slot: Slot) -> bool {
        self.hints
            .range(..=slot)
            .next_back()
            .is_some_and(|(_, last)| slot <= *last)
    }

    /// Replies with every vote at or above `first_slot` when `round` is at
    /// least the promise.
    ///
    /// Equality is accepted so that a leader whose bypassed `Phase2A` reached
    /// this acceptor first still gets its `Phase1B`.
    pub fn handle_phase1a(&mut self, round: Round, first_slot: Slot) -> Result<Phase1Reply, Rejected> {
        if round < self.promised {
            return Err(Rejected { promised: self.promised });
        }
        self.promised = round;
        let votes = self.votes.range(first_slot..).map(|(s, v)| (*s, v.clone())).collect();
        let chosen = self
            .hints
            .iter()
            .filter(|(_, last)| **last >= first_slot)
            .map(|(first, last)| SlotRange::new((*first).max(first_slot), *last))
            .collect();
        Ok(Phase1Reply { votes, chosen })
    }

    pub fn handle_phase2a(&mut self, round: Round, slot: Slot, value: Value) -> Result<(), Rejected> {
        if round < self.promised && self.mutation != AcceptorMutation::AcceptLowerRounds {
            return Err(Rejected { promised: self.promised });
        }
        self.promised = self.promised.max(round);
        self.votes.insert(slot, Vote { round, value });
        Ok(())
    }

    /// Marks `range` as chosen. Idempotent.
    pub fn record_chosen_hint(&mut self, range: SlotRange) {
        let mut first = range.first;
        let mut last = range.last;
        let overlapping: Vec<Slot> = self
            .hints
            .range(..=last.next())
            .filter(|(_, l)| l.next() >= first)
            .map(|(f, _)| *f)
            .collect();
        for f in overlapping {
            let l = self.hints.remove(&f).unwrap_or(f);
            first = first.min(f);
            last = last.max(l);
        }
        self.hints.insert(first, last);
    }

    /// Fast mode: authorizes a vote for the first client value seen in `round`.
    pub fn handle_phase2a_any(&mut self, round: Round, from: NodeId) -> Result<(), Rejected> {
        if round < self.promised {
            return Err(Rejected { promised: self.promised });
        }
        self.promised = round;
        self.any = Some((round, from));
        Ok(())
    }

    /// Fast mode: votes for `value` in slot 0 if "any" is outstanding in the
    /// current round and nothing was voted there yet. Returns the round and
    /// the proposer to notify.
    pub fn handle_fast_value(&mut self, value: Value) -> Option<(Round, NodeId)> {
        let (round, from) = self.any?;
        if round != self.promised {
            return None;
        }
        if self.votes.get(&Slot(0)).is_some_and(|v| v.round == round) {
            return None;
        }
        self.votes.insert(Slot(0), Vote { round, value });
        self.any = None;
        Some((round, from))
    }

    pub fn apply_record(&mut self, record: &JournalRecord) {
        match record {
            JournalRecord::Promise { round } => self.promised = self.promised.max(*round),
            JournalRecord::Vote { slot, round, value } => {
                self.promised = self.promised.max(*round);
                self.votes.insert(
                    *slot,
                    Vote {
                        round: *round,
                        value: value.clone(),
                    },
                );
            }
            JournalRecord::Hint { range } => self.record_chosen_hint(*range),
            _ => {}
        }
    }

    /// Handles the acceptor's share of the message algebra. Returns `false`
    /// for messages that are not acceptor business.
    pub fn on_message(&mut self, instance: Instance, from: NodeId, msg: &Message, out: &mut Outbox) -> bool {
        let before = self.promised;
        match msg {
            Message::Phase1A { round, first_slot } => match self.handle_phase1a(*round, *first_slot) {
                Ok(reply) => {
                    self.journal_promise(before, out);
                    out.send(
                        from,
                        Message::Phase1B {
                            round: *round,
                            votes: reply.votes,
                            chosen: reply.chosen,
                        },
                    );
                }
                Err(r) => out.send(from, Message::Nack { round: r.promised }),
            },
            Message::Phase2A { round, slot, value } => match self.handle_phase2a(*round, *slot, value.clone()) {
                Ok(()) => {
                    out.record(JournalRecord::Vote {
                        slot: *slot,
                        round: *round,
                        value: value.clone(),
                    });
                    out.emit(Event::Voted {
                        instance,
                        slot: *slot,
                        round: *round,
                        value: value.clone(),
                    });
                    out.send(from, Message::Phase2B { round: *round, slot: *slot });
                }
                Err(r) => out.send(from, Message::Nack { round: r.promised }),
            },
            Message::ChosenHint { round, range } => {
                if !(self.is_hinted(range.first) && self.is_hinted(range.last)) {
                    self.record_chosen_hint(*range);
                    out.record(JournalRecord::Hint { range: *range });
                }
                out.send(from, Message::ChosenHintAck { round: *round, range: *range });
            }
            Message::Phase2AAny { round } => match self.handle_phase2a_any(*round, from) {
                Ok(()) => self.journal_promise(before, out),
                Err(r) => out.send(from, Message::Nack { round: r.promised }),
            },
            Message::FastValue { value } => {
                if let Some((round, proposer)) = self.handle_fast_value(value.clone()) {
                    out.record(JournalRecord::Vote {
                        slot: Slot(0),
                        round,
                        value: value.clone(),
                    });
                    out.emit(Event::Voted {
                        instance,
                        slot: Slot(0),
                        round,
                        value: value.clone(),
                    });
                    out.send(
                        proposer,
                        Message::FastPhase2B {
                            round,
                            value: value.clone(),
                        },
                    );
                }
            }
            _ => return false,
        }
        true
    }

    fn journal_promise(&self, before: Round, out: &mut Outbox) {
        if self.promised != before {
            out.record(JournalRecord::Promise { round: self.promised });
        }
    }
}
