//! Matchmakers: a round-indexed log of configurations with a garbage
//! collection watermark, plus stop and bootstrap support for replacing the
//! matchmaker set.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::acceptor::AcceptorState;
use crate::config::Configuration;
use crate::message::{LogEntry, Message};
use crate::process::{Event, JournalRecord, Outbox, Process, Time};
use crate::round::{NodeId, Round};
use crate::value::Instance;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchmakerMutation {
    #[default]
    None,
    /// Skips the monotonicity check and registers any round.
    NonMonotone,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MatchOutcome {
    Reply { gc_watermark: Round, history: Vec<LogEntry> },
    /// The round is below the watermark or below a logged round. Carries the
    /// largest round the proposer must exceed.
    Ignored { highest: Round },
    /// Stopped or not yet activated.
    Inactive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BootstrapError {
    NotFresh,
}

impl fmt::Display for BootstrapError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("matchmaker already holds state")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MatchmakerState {
    log: BTreeMap<Round, Configuration>,
    gc_watermark: Round,
    stopped: bool,
    active: bool,
    bootstrapped: bool,
    mutation: MatchmakerMutation,
}

impl MatchmakerState {
    /// A member of the initial matchmaker set, active from the start.
    pub fn new() -> Self {
        MatchmakerState {
            log: BTreeMap::new(),
            gc_watermark: Round::BOTTOM,
            stopped: false,
            active: true,
            bootstrapped: false,
            mutation: MatchmakerMutation::None,
        }
    }

    /// A spare node that waits for bootstrap and activation.
    pub fn spare() -> Self {
        MatchmakerState {
            active: false,
            ..Self::new()
        }
    }

    pub fn with_mutation(mut self, mutation: MatchmakerMutation) -> Self {
        self.mutation = mutation;
        self
    }

    pub fn log(&self) -> &BTreeMap<Round, Configuration> {
        &self.log
    }

    pub fn gc_watermark(&self) -> Round {
        self.gc_watermark
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn is_active(&self) -> bool {
        self.active && !self.stopped
    }

    pub fn is_bootstrapped(&self) -> bool {
        self.bootstrapped
    }

    fn is_fresh(&self) -> bool {
        self.log.is_empty() && self.gc_watermark.is_bottom() && !self.active && !self.bootstrapped
    }

    fn entries(&self) -> Vec<LogEntry> {
        self.log.iter().map(|(r, c)| (*r, c.clone())).collect()
    }

    pub fn handle_match_a(&mut self, round: Round, config: Configuration) -> MatchOutcome {
        if !self.is_active() {
            return MatchOutcome::Inactive;
        }
        let highest = self.log.keys().next_back().copied().unwrap_or(Round::BOTTOM);
        let history = match self.mutation {
            MatchmakerMutation::None => {
                if highest == round && round >= self.gc_watermark && self.log.get(&round) == Some(&config) {
                    // a retransmitted request: answer it again
                    let history = self.log.range(..round).map(|(r, c)| (*r, c.clone())).collect();
                    return MatchOutcome::Reply {
                        gc_watermark: self.gc_watermark,
                        history,
                    };
                }
                if round < self.gc_watermark || highest >= round {
                    return MatchOutcome::Ignored {
                        highest: highest.max(self.gc_watermark),
                    };
                }
                self.entries()
            }
            MatchmakerMutation::NonMonotone => self.log.range(..round).map(|(r, c)| (*r, c.clone())).collect(),
        };
        self.log.insert(round, config);
        MatchOutcome::Reply {
            gc_watermark: self.gc_watermark,
            history,
        }
    }

    /// Deletes entries below `round` and raises the watermark. Returns `false`
    /// when stopped.
    pub fn handle_garbage_a(&mut self, round: Round) -> bool {
        if self.stopped {
            return false;
        }
        self.log = self.log.split_off(&round);
        self.gc_watermark = self.gc_watermark.max(round);
        true
    }

    pub fn handle_stop_a(&mut self) -> (Vec<LogEntry>, Round) {
        self.stopped = true;
        (self.entries(), self.gc_watermark)
    }

    pub fn bootstrap(&mut self, log: Vec<LogEntry>, gc_watermark: Round) -> Result<(), BootstrapError> {
        if !self.is_fresh() {
            return Err(BootstrapError::NotFresh);
        }
        self.log = log.into_iter().filter(|(r, _)| *r >= gc_watermark).collect();
        self.gc_watermark = gc_watermark;
        self.bootstrapped = true;
        Ok(())
    }

    pub fn activate(&mut self) {
        self.active = true;
    }

    pub fn apply_record(&mut self, record: &JournalRecord) {
        match record {
            JournalRecord::MmAccept { round, config } => {
                self.log.insert(*round, config.clone());
            }
            JournalRecord::MmGc { watermark } => {
                self.handle_garbage_a(*watermark);
            }
            JournalRecord::MmStop => self.stopped = true,
            JournalRecord::MmBootstrap { log, gc_watermark } => {
                let _ = self.bootstrap(log.clone(), *gc_watermark);
            }
            JournalRecord::MmActivate { .. } => self.active = true,
            _ => {}
        }
    }
}

impl Default for MatchmakerState {
    fn default() -> Self {
        Self::new()
    }
}

/// A matchmaker process. It also hosts the acceptor of the single-decree
/// instance that picks this set's successor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MatchmakerNode {
    state: MatchmakerState,
    epoch: u64,
    successor_acceptor: AcceptorState,
}

impl MatchmakerNode {
    pub fn new(state: MatchmakerState, epoch: u64) -> Self {
        MatchmakerNode {
            state,
            epoch,
            successor_acceptor: AcceptorState::new(),
        }
    }

    pub fn state(&self) -> &MatchmakerState {
        &self.state
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn apply_record(&mut self, record: &JournalRecord) {
        match record {
            JournalRecord::Promise { .. } | JournalRecord::Vote { .. } => {
                self.successor_acceptor.apply_record(record)
            }
            JournalRecord::MmActivate { epoch } => {
                self.epoch = *epoch;
                self.state.apply_record(record);
            }
            _ => self.state.apply_record(record),
        }
    }
}

impl Process for MatchmakerNode {
    fn on_message(&mut self, _now: Time, from: NodeId, msg: Message, out: &mut Outbox) {
        let instance = Instance::MatchmakerEpoch(self.epoch);
        if self.successor_acceptor.on_message(instance, from, &msg, out) {
            return;
        }
        match msg {
            Message::MatchA { round, config } => match self.state.handle_match_a(round, config.clone()) {
                MatchOutcome::Reply { gc_watermark, history } => {
                    out.record(JournalRecord::MmAccept { round, config });
                    out.emit(Event::MatchReplied {
                        round,
                        gc_watermark,
                        history: history.clone(),
                    });
                    out.send(
                        from,
                        Message::MatchB {
                            round,
                            gc_watermark,
                            history,
                        },
                    );
                }
                MatchOutcome::Ignored { highest } => out.send(from, Message::Nack { round: highest }),
                MatchOutcome::Inactive => {}
            },
            Message::GarbageA { round } => {
                if self.state.is_active() && self.state.handle_garbage_a(round) {
                    out.record(JournalRecord::MmGc { watermark: round });
                    out.send(from, Message::GarbageB { round });
                }
            }
            Message::StopA => {
                if !self.state.stopped {
                    out.record(JournalRecord::MmStop);
                }
                let (log, gc_watermark) = self.state.handle_stop_a();
                out.send(from, Message::StopB { log, gc_watermark });
            }
            Message::Bootstrap { log, gc_watermark } => {
                if self.state.bootstrap(log.clone(), gc_watermark).is_ok() {
                    out.record(JournalRecord::MmBootstrap { log, gc_watermark });
                }
                if self.state.is_bootstrapped() {
                    out.send(from, Message::BootstrapAck);
                }
            }
            Message::Activate { epoch }
                if self.state.is_bootstrapped() => {
                    if !self.state.active {
                        self.state.activate();
                        self.epoch = epoch;
                        out.record(JournalRecord::MmActivate { epoch });
                    }
                    out.send(from, Message::ActivateAck { epoch });
                }
            _ => {}
        }
    }

    fn on_tick(&mut self, _now: Time, _out: &mut Outbox) {}
}
