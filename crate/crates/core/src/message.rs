//! The message algebra shared by every role.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::Configuration;
use crate::round::{NodeId, Round};
use crate::value::{Slot, SlotRange, Value, Vote};

/// A matchmaker log entry as carried in `MatchB`, `StopB` and bootstrap
/// messages.
pub type LogEntry = (Round, Configuration);

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Message {
    // Matchmaking.
    MatchA { round: Round, config: Configuration },
    MatchB { round: Round, gc_watermark: Round, history: Vec<LogEntry> },
    GarbageA { round: Round },
    GarbageB { round: Round },

    // Phase 1 and Phase 2.
    Phase1A { round: Round, first_slot: Slot },
    Phase1B { round: Round, votes: Vec<(Slot, Vote)>, chosen: Vec<SlotRange> },
    Phase2A { round: Round, slot: Slot, value: Value },
    Phase2B { round: Round, slot: Slot },
    /// Tells acceptors that `range` is chosen and stored on `f + 1` replicas.
    ChosenHint { round: Round, range: SlotRange },
    ChosenHintAck { round: Round, range: SlotRange },

    // Fast Paxos variant (single decree).
    Phase2AAny { round: Round },
    FastValue { value: Value },
    FastPhase2B { round: Round, value: Value },

    // Matchmaker reconfiguration.
    StopA,
    StopB { log: Vec<LogEntry>, gc_watermark: Round },
    Bootstrap { log: Vec<LogEntry>, gc_watermark: Round },
    BootstrapAck,
    Activate { epoch: u64 },
    ActivateAck { epoch: u64 },

    // Clients and replicas.
    ClientRequest { seq: u64, payload: Vec<u8> },
    ClientReply { seq: u64, payload: Vec<u8> },
    Redirect { leader: Option<NodeId> },
    Chosen { slot: Slot, value: Value },
    PrefixPersisted { slot: Option<Slot> },
    WatermarkQuery,
    WatermarkReply { executed: Option<Slot> },
    FetchLog { from: Slot, to: Slot },
    LogEntries { entries: Vec<(Slot, Value)> },
    ReplyRequest { client: NodeId, seq: u64 },

    // Plumbing.
    Nack { round: Round },
    Heartbeat { round: Round, chosen_watermark: Option<Slot> },
    LeaderElect { round: Round },

    // Operator and discovery inputs.
    Reconfigure { config: Configuration },
    ElectNow,
    ReconfigureMatchmakers { members: Vec<NodeId> },
    MatchmakerView { epoch: u64, members: Vec<NodeId> },
}

/// Coarse message classes used by fault plans (e.g. "delay every Phase1B").
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    MatchA,
    MatchB,
    GarbageA,
    GarbageB,
    Phase1A,
    Phase1B,
    Phase2A,
    Phase2B,
    ChosenHint,
    ChosenHintAck,
    Phase2AAny,
    FastValue,
    FastPhase2B,
    StopA,
    StopB,
    Bootstrap,
    BootstrapAck,
    Activate,
    ActivateAck,
    ClientRequest,
    ClientReply,
    Redirect,
    Chosen,
    PrefixPersisted,
    WatermarkQuery,
    WatermarkReply,
    FetchLog,
    LogEntries,
    ReplyRequest,
    Nack,
    Heartbeat,
    LeaderElect,
    Reconfigure,
    ElectNow,
    ReconfigureMatchmakers,
    MatchmakerView,
}

impl MessageKind {
    pub const ALL: [MessageKind; 36] = [
        MessageKind::MatchA,
        MessageKind::MatchB,
        MessageKind::GarbageA,
        MessageKind::GarbageB,
        MessageKind::Phase1A,
        MessageKind::Phase1B,
        MessageKind::Phase2A,
        MessageKind::Phase2B,
        MessageKind::ChosenHint,
        MessageKind::ChosenHintAck,
        MessageKind::Phase2AAny,
        MessageKind::FastValue,
        MessageKind::FastPhase2B,
        MessageKind::StopA,
        MessageKind::StopB,
        MessageKind::Bootstrap,
        MessageKind::BootstrapAck,
        MessageKind::Activate,
        MessageKind::ActivateAck,
        MessageKind::ClientRequest,
        MessageKind::ClientReply,
        MessageKind::Redirect,
        MessageKind::Chosen,
        MessageKind::PrefixPersisted,
        MessageKind::WatermarkQuery,
        MessageKind::WatermarkReply,
        MessageKind::FetchLog,
        MessageKind::LogEntries,
        MessageKind::ReplyRequest,
        MessageKind::Nack,
        MessageKind::Heartbeat,
        MessageKind::LeaderElect,
        MessageKind::Reconfigure,
        MessageKind::ElectNow,
        MessageKind::ReconfigureMatchmakers,
        MessageKind::MatchmakerView,
    ];

    /// Stable one-byte tag used in wire frames.
    pub fn tag(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_tag(tag: u8) -> Option<MessageKind> {
        tag.checked_sub(1).and_then(|i| Self::ALL.get(i as usize).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::MatchA => "MatchA",
            MessageKind::MatchB => "MatchB",
            MessageKind::GarbageA => "GarbageA",
            MessageKind::GarbageB => "GarbageB",
            MessageKind::Phase1A => "Phase1A",
            MessageKind::Phase1B => "Phase1B",
            MessageKind::Phase2A => "Phase2A",
            MessageKind::Phase2B => "Phase2B",
            MessageKind::ChosenHint => "ChosenHint",
            MessageKind::ChosenHintAck => "ChosenHintAck",
            MessageKind::Phase2AAny => "Phase2AAny",
            MessageKind::FastValue => "FastValue",
            MessageKind::FastPhase2B => "FastPhase2B",
            MessageKind::StopA => "StopA",
            MessageKind::StopB => "StopB",
            MessageKind::Bootstrap => "Bootstrap",
            MessageKind::BootstrapAck => "BootstrapAck",
            MessageKind::Activate => "Activate",
            MessageKind::ActivateAck => "ActivateAck",
            MessageKind::ClientRequest => "ClientRequest",
            MessageKind::ClientReply => "ClientReply",
            MessageKind::Redirect => "Redirect",
            MessageKind::Chosen => "Chosen",
            MessageKind::PrefixPersisted => "PrefixPersisted",
            MessageKind::WatermarkQuery => "WatermarkQuery",
            MessageKind::WatermarkReply => "WatermarkReply",
            MessageKind::FetchLog => "FetchLog",
            MessageKind::LogEntries => "LogEntries",
            MessageKind::ReplyRequest => "ReplyRequest",
            MessageKind::Nack => "Nack",
            MessageKind::Heartbeat => "Heartbeat",
            MessageKind::LeaderElect => "LeaderElect",
            MessageKind::Reconfigure => "Reconfigure",
            MessageKind::ElectNow => "ElectNow",
            MessageKind::ReconfigureMatchmakers => "ReconfigureMatchmakers",
            MessageKind::MatchmakerView => "MatchmakerView",
        }
    }

    pub fn from_name(name: &str) -> Option<MessageKind> {
        Self::ALL.iter().copied().find(|k| k.name().eq_ignore_ascii_case(name))
    }
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::MatchA { .. } => MessageKind::MatchA,
            Message::MatchB { .. } => MessageKind::MatchB,
            Message::GarbageA { .. } => MessageKind::GarbageA,
            Message::GarbageB { .. } => MessageKind::GarbageB,
            Message::Phase1A { .. } => MessageKind::Phase1A,
            Message::Phase1B { .. } => MessageKind::Phase1B,
            Message::Phase2A { .. } => MessageKind::Phase2A,
            Message::Phase2B { .. } => MessageKind::Phase2B,
            Message::ChosenHint { .. } => MessageKind::ChosenHint,
            Message::ChosenHintAck { .. } => MessageKind::ChosenHintAck,
            Message::Phase2AAny { .. } => MessageKind::Phase2AAny,
            Message::FastValue { .. } => MessageKind::FastValue,
            Message::FastPhase2B { .. } => MessageKind::FastPhase2B,
            Message::StopA => MessageKind::StopA,
            Message::StopB { .. } => MessageKind::StopB,
            Message::Bootstrap { .. } => MessageKind::Bootstrap,
            Message::BootstrapAck => MessageKind::BootstrapAck,
            Message::Activate { .. } => MessageKind::Activate,
            Message::ActivateAck { .. } => MessageKind::ActivateAck,
            Message::ClientRequest { .. } => MessageKind::ClientRequest,
            Message::ClientReply { .. } => MessageKind::ClientReply,
            Message::Redirect { .. } => MessageKind::Redirect,
            Message::Chosen { .. } => MessageKind::Chosen,
            Message::PrefixPersisted { .. } => MessageKind::PrefixPersisted,
            Message::WatermarkQuery => MessageKind::WatermarkQuery,
            Message::WatermarkReply { .. } => MessageKind::WatermarkReply,
            Message::FetchLog { .. } => MessageKind::FetchLog,
            Message::LogEntries { .. } => MessageKind::LogEntries,
            Message::ReplyRequest { .. } => MessageKind::ReplyRequest,
            Message::Nack { .. } => MessageKind::Nack,
            Message::Heartbeat { .. } => MessageKind::Heartbeat,
            Message::LeaderElect { .. } => MessageKind::LeaderElect,
            Message::Reconfigure { .. } => MessageKind::Reconfigure,
            Message::ElectNow => MessageKind::ElectNow,
            Message::ReconfigureMatchmakers { .. } => MessageKind::ReconfigureMatchmakers,
            Message::MatchmakerView { .. } => MessageKind::MatchmakerView,
        }
    }
}

/// A message plus the sender metadata hosts use for deduplication.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Envelope {
    pub from: NodeId,
    /// Monotone per sender.
    pub seq: u64,
    pub msg: Message,
}
