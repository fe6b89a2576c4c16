//! What every role's state machine looks like to a host.
//!
//! Hosts (the simulator and the TCP runtime) feed messages and clock ticks to
//! a [`Process`]; the process answers by filling an [`Outbox`]. Journal
//! records in the outbox must be made durable before any of its messages are
//! sent.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::Configuration;
use crate::message::{LogEntry, Message};
use crate::round::{NodeId, Round};
use crate::value::{Instance, Slot, SlotRange, Value};

/// Virtual or wall-clock time in host-defined units.
pub type Time = u64;

pub trait Process {
    fn on_message(&mut self, now: Time, from: NodeId, msg: Message, out: &mut Outbox);
    fn on_tick(&mut self, now: Time, out: &mut Outbox);
}

/// Observable facts emitted by state machines. The simulator's oracle and the
/// benchmark read these; nodes never read them back.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    /// A proposer fixed `config` as the configuration of `round`.
    RoundConfig { instance: Instance, round: Round, config: Configuration },
    Voted { instance: Instance, slot: Slot, round: Round, value: Value },
    /// `value == None` is the Fast Paxos "any" proposal.
    Proposed { instance: Instance, slot: Slot, round: Round, value: Option<Value> },
    MatchReplied { round: Round, gc_watermark: Round, history: Vec<LogEntry> },
    Executed { slot: Slot, value: Value },
    Reply { seq: u64, latency: Time },
    Elected { round: Round },
    Steady { round: Round },
    SteppedDown { round: Round },
    /// Configurations of rounds below `below` may be shut down.
    Retire { below: Round },
    GcIssued { round: Round },
    Queued { client: NodeId, seq: u64 },
    Learned { instance: Instance, value: Value },
    MatchmakersActivated { epoch: u64, members: Vec<NodeId> },
    ConsistencyHalt { reason: String },
    ReconfigRejected,
}

/// Durable state changes, replayed on restart.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JournalRecord {
    Promise { round: Round },
    Vote { slot: Slot, round: Round, value: Value },
    Hint { range: SlotRange },
    MmAccept { round: Round, config: Configuration },
    MmGc { watermark: Round },
    MmStop,
    MmBootstrap { log: Vec<LogEntry>, gc_watermark: Round },
    MmActivate { epoch: u64 },
    Chosen { slot: Slot, value: Value },
    LeaderRound { round: Round },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Outbox {
    pub sends: Vec<(NodeId, Message)>,
    pub records: Vec<JournalRecord>,
    pub events: Vec<Event>,
}

impl Outbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, to: NodeId, msg: Message) {
        self.sends.push((to, msg));
    }

    pub fn broadcast<'a>(&mut self, to: impl IntoIterator<Item = &'a NodeId>, msg: Message) {
        for id in to {
            self.sends.push((*id, msg.clone()));
        }
    }

    pub fn record(&mut self, r: JournalRecord) {
        self.records.push(r);
    }

    pub fn emit(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn is_empty(&self) -> bool {
        self.sends.is_empty() && self.records.is_empty() && self.events.is_empty()
    }

    pub fn clear(&mut self) {
        self.sends.clear();
        self.records.clear();
        self.events.clear();
    }
}

/// Protocol timers, in host time units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Timing {
    pub heartbeat: Time,
    /// `None` disables automatic elections; leaders then change only on
    /// `ElectNow`.
    pub election_timeout: Option<Time>,
    pub resend: Time,
    pub client_timeout: Time,
}

impl Timing {
    /// Defaults for the simulator, where one unit is one millisecond.
    pub const SIM: Timing = Timing {
        heartbeat: 10,
        election_timeout: Some(50),
        resend: 20,
        client_timeout: 60,
    };

    /// Defaults for the TCP runtime, in microseconds.
    pub const NET: Timing = Timing {
        heartbeat: 100_000,
        election_timeout: Some(500_000),
        resend: 50_000,
        client_timeout: 200_000,
    };
}
