use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::round::{NodeId, Round};

/// A log position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Slot(pub u64);

impl Slot {
    pub fn next(self) -> Slot {
        Slot(self.0 + 1)
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// The slot after an optional watermark, i.e. the first slot not known to be
/// covered. `None` means nothing is covered yet.
pub fn slot_after(watermark: Option<Slot>) -> Slot {
    watermark.map_or(Slot(0), Slot::next)
}

/// An inclusive range of slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotRange {
    pub first: Slot,
    pub last: Slot,
}

impl SlotRange {
    pub fn new(first: Slot, last: Slot) -> Self {
        debug_assert!(first <= last);
        SlotRange { first, last }
    }

    pub fn single(slot: Slot) -> Self {
        SlotRange { first: slot, last: slot }
    }

    pub fn contains(&self, slot: Slot) -> bool {
        self.first <= slot && slot <= self.last
    }
}

/// A state machine command submitted by a client.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Command {
    pub client: NodeId,
    pub seq: u64,
    pub payload: Vec<u8>,
}

/// What a log slot (or a single-decree instance) can hold.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Value {
    /// Fills a hole; executes nothing.
    Noop,
    Command(Command),
    /// A matchmaker set, chosen by the instance that arbitrates matchmaker
    /// reconfiguration.
    Matchmakers(Vec<NodeId>),
}

impl Value {
    pub fn command(client: NodeId, seq: u64, payload: impl Into<Vec<u8>>) -> Value {
        Value::Command(Command {
            client,
            seq,
            payload: payload.into(),
        })
    }

    pub fn is_noop(&self) -> bool {
        matches!(self, Value::Noop)
    }

    pub fn payload(&self) -> &[u8] {
        match self {
            Value::Command(c) => &c.payload,
            _ => &[],
        }
    }
}

/// An acceptor's vote: the round it voted in and the value.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Vote {
    pub round: Round,
    pub value: Value,
}

/// Which consensus instance a vote belongs to. The main replicated log is
/// `Log`; each matchmaker set arbitrates its own successor with a separate
/// single-decree instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Instance {
    Log,
    MatchmakerEpoch(u64),
}
