//! Protocol state machines for Matchmaker Paxos and Matchmaker MultiPaxos.
//!
//! Every role is a deterministic [`Process`]: hosts feed it messages and
//! ticks and it fills an [`Outbox`] with sends, journal records and
//! observable events. Nothing here does IO, so the same code runs under the
//! simulator and the TCP runtime.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod acceptor;
pub mod client;
pub mod config;
pub mod dedup;
pub mod election;
pub mod leader;
pub mod matchmaker;
pub mod message;
pub mod mmreconfig;
pub mod node;
pub mod process;
pub mod proposer;
pub mod replica;
pub mod round;
pub mod util;
pub mod value;
pub mod wire;

pub use acceptor::{AcceptorMutation, AcceptorState};
pub use config::{ConfigId, Configuration, Quorum};
pub use leader::{Leader, LeaderConfig, LeaderOptions};
pub use matchmaker::{MatchmakerMutation, MatchmakerNode, MatchmakerState};
pub use message::{Envelope, LogEntry, Message, MessageKind};
pub use mmreconfig::{merge_stop_replies, MergeResult, MmReconfigDriver};
pub use node::{Node, NodeSpec};
pub use process::{Event, JournalRecord, Outbox, Process, Time, Timing};
pub use proposer::{GcMode, Proposer, ProposerOptions};
pub use round::{NodeId, Round};
pub use value::{Command, Instance, Slot, SlotRange, Value, Vote};
