//! Single-decree proposer: Matchmaking, Phase 1 across every prior
//! configuration, Phase 2 in the proposer's own configuration, and garbage
//! collection. Also runs the Fast Paxos variant and, with a fixed
//! configuration and no matchmakers, plain Paxos.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::config::Configuration;
use crate::message::{LogEntry, Message};
use crate::process::{Event, JournalRecord, Outbox, Process, Time};
use crate::round::{NodeId, Round};
use crate::value::{Instance, Slot, Value, Vote};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GcMode {
    #[default]
    Off,
    Guarded,
    /// Seeded bug: sends `GarbageA` as soon as matchmaking finishes, with no
    /// scenario check.
    Unguarded,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub struct ProposerOptions {
    /// Configurations in rounds below the largest vote seen need no quorum.
    pub round_pruning: bool,
    /// Fast Paxos: propose "any" when no value is constrained.
    pub fast: bool,
    pub gc: GcMode,
    /// Concurrent matchmaking: Phase 1 starts against these guessed prior
    /// configurations while matchmaking is in flight. Configurations the
    /// matchmakers report that are not covered are contacted afterwards.
    pub prior_guess: Vec<Configuration>,
    /// Retry with a larger round after a `Nack` or a resend timeout.
    pub auto_retry: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Phase {
    Idle,
    Matchmaking,
    Phase1,
    Phase2,
    Chosen,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProposerError {
    WrongPhase(Phase),
    MismatchedRound { expected: Round, got: Round },
    /// No garbage collection scenario holds.
    NoGcScenario,
    ModeMismatch,
}

impl fmt::Display for ProposerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProposerError::WrongPhase(p) => write!(f, "operation not allowed in phase {p:?}"),
            ProposerError::MismatchedRound { expected, got } => {
                write!(f, "reply for round {got}, expected {expected}")
            }
            ProposerError::NoGcScenario => f.write_str("no garbage collection scenario holds"),
            ProposerError::ModeMismatch => f.write_str("fast mode requires a unanimous configuration"),
        }
    }
}

/// What a proposer sends in Phase 2.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Proposal {
    Value(Value),
    Any,
}

/// Union of matchmaker histories, pruned below the largest watermark.
pub fn merge_histories<'a>(replies: impl IntoIterator<Item = (Round, &'a [LogEntry])>) -> Vec<LogEntry> {
    let mut max_w = Round::BOTTOM;
    let mut merged: BTreeMap<Round, Configuration> = BTreeMap::new();
    for (w, h) in replies {
        max_w = max_w.max(w);
        for (r, c) in h {
            merged.insert(*r, c.clone());
        }
    }
    merged.into_iter().filter(|(r, _)| *r >= max_w).collect()
}

/// Decides the Phase 2 proposal from Phase 1 votes. `k` is the largest vote
/// round; classic mode adopts its value, fast mode proposes "any" unless
/// exactly one value was voted in round `k`.
pub fn choose_proposal<'a>(
    votes: impl IntoIterator<Item = &'a Vote>,
    own: Option<&Value>,
    fast: bool,
) -> (Round, Option<Proposal>) {
    let mut k = Round::BOTTOM;
    let mut at_k: BTreeSet<&Value> = BTreeSet::new();
    for v in votes {
        if v.round > k {
            k = v.round;
            at_k.clear();
        }
        if v.round == k && !k.is_bottom() {
            at_k.insert(&v.value);
        }
    }
    let proposal = if fast {
        if at_k.len() == 1 {
            Some(Proposal::Value(at_k.into_iter().next().cloned().unwrap()))
        } else {
            Some(Proposal::Any)
        }
    } else if let Some(v) = at_k.into_iter().next() {
        Some(Proposal::Value(v.clone()))
    } else {
        own.cloned().map(Proposal::Value)
    };
    (k, proposal)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Proposer {
    id: NodeId,
    instance: Instance,
    matchmakers: Vec<NodeId>,
    /// Plain Paxos over one configuration; matchmaking is skipped.
    fixed: Option<Configuration>,
    opts: ProposerOptions,
    round: Round,
    highest_seen: Round,
    phase: Phase,
    value: Option<Value>,
    config: Option<Configuration>,
    match_replies: BTreeMap<NodeId, (Round, Vec<LogEntry>)>,
    history: Vec<LogEntry>,
    contacted: BTreeSet<NodeId>,
    p1_replies: BTreeMap<NodeId, Option<Vote>>,
    k: Round,
    proposal: Option<Proposal>,
    p2_acks: BTreeSet<NodeId>,
    fast_votes: BTreeMap<NodeId, Value>,
    chosen: Option<Value>,
    chosen_round: Round,
    gc_round: Option<Round>,
    gc_acks: BTreeSet<NodeId>,
    retired: bool,
    last_send: Time,
    resend: Time,
    start: Option<(Time, Option<Value>, Configuration)>,
}

impl Proposer {
    pub fn new(id: NodeId, instance: Instance, matchmakers: Vec<NodeId>, opts: ProposerOptions) -> Self {
        Proposer {
            id,
            instance,
            matchmakers,
            fixed: None,
            opts,
            round: Round::BOTTOM,
            highest_seen: Round::BOTTOM,
            phase: Phase::Idle,
            value: None,
            config: None,
            match_replies: BTreeMap::new(),
            history: Vec::new(),
            contacted: BTreeSet::new(),
            p1_replies: BTreeMap::new(),
            k: Round::BOTTOM,
            proposal: None,
            p2_acks: BTreeSet::new(),
            fast_votes: BTreeMap::new(),
            chosen: None,
            chosen_round: Round::BOTTOM,
            gc_round: None,
            gc_acks: BTreeSet::new(),
            retired: false,
            last_send: 0,
            resend: 20,
            start: None,
        }
    }

    /// Plain Paxos with a single fixed configuration.
    pub fn fixed(id: NodeId, instance: Instance, config: Configuration) -> Self {
        let mut p = Proposer::new(id, instance, Vec::new(), ProposerOptions::default());
        p.fixed = Some(config);
        p.opts.auto_retry = true;
        p
    }

    /// Starts `begin_round` automatically on the first tick at or after `at`.
    pub fn with_start(mut self, at: Time, value: Option<Value>, config: Configuration) -> Self {
        self.start = Some((at, value, config));
        self
    }

    pub fn with_resend(mut self, resend: Time) -> Self {
        self.resend = resend;
        self
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn history(&self) -> &[LogEntry] {
        &self.history
    }

    pub fn chosen(&self) -> Option<&Value> {
        self.chosen.as_ref()
    }

    pub fn proposal(&self) -> Option<&Proposal> {
        self.proposal.as_ref()
    }

    pub fn largest_vote_round(&self) -> Round {
        self.k
    }

    pub fn is_retired(&self) -> bool {
        self.retired
    }

    fn f(&self) -> usize {
        self.matchmakers.len().saturating_sub(1) / 2
    }

    fn next_round(&self) -> Round {
        if self.round.is_bottom() || self.highest_seen > self.round {
            Round::first_above(self.highest_seen.max(self.round), self.id)
        } else {
            self.round.successor().unwrap_or_else(|_| Round::first_above(self.round, self.id))
        }
    }

    fn all_history_acceptors(&self) -> BTreeSet<NodeId> {
        self.history.iter().flat_map(|(_, c)| c.acceptors().iter().copied()).collect()
    }

    /// Picks the next owned round and sends `MatchA`. `value` may be absent
    /// to run matchmaking proactively.
    pub fn begin_round(
        &mut self,
        now: Time,
        value: Option<Value>,
        config: Configuration,
        out: &mut Outbox,
    ) -> Result<(), ProposerError> {
        if self.phase != Phase::Idle {
            return Err(ProposerError::WrongPhase(self.phase));
        }
        if self.opts.fast && config.phase2_quorums().len() != 1 {
            return Err(ProposerError::ModeMismatch);
        }
        if value.is_some() {
            self.value = value;
        }
        self.round = self.next_round();
        self.highest_seen = self.highest_seen.max(self.round);
        self.config = Some(config.clone());
        self.match_replies.clear();
        self.history.clear();
        self.contacted.clear();
        self.p1_replies.clear();
        self.k = Round::BOTTOM;
        self.proposal = None;
        self.p2_acks.clear();
        self.fast_votes.clear();
        self.last_send = now;
        out.record(JournalRecord::LeaderRound { round: self.round });
        out.emit(Event::RoundConfig {
            instance: self.instance,
            round: self.round,
            config: config.clone(),
        });
        if let Some(fixed) = self.fixed.clone() {
            self.phase = Phase::Phase1;
            self.history = alloc::vec![(Round::BOTTOM, fixed)];
            self.send_phase1a(out);
            return Ok(());
        }
        self.phase = Phase::Matchmaking;
        out.broadcast(&self.matchmakers, Message::MatchA { round: self.round, config });
        let guess: BTreeSet<NodeId> = self
            .opts
            .prior_guess
            .iter()
            .flat_map(|c| c.acceptors().iter().copied())
            .collect();
        for a in guess {
            self.contacted.insert(a);
            out.send(
                a,
                Message::Phase1A {
                    round: self.round,
                    first_slot: Slot(0),
                },
            );
        }
        Ok(())
    }

    /// Supplies the value after a proactive `begin_round`.
    pub fn propose(&mut self, value: Value, out: &mut Outbox) {
        if self.value.is_none() {
            self.value = Some(value);
        }
        if self.phase == Phase::Phase2 && self.proposal.is_none() {
            self.proposal = self.value.clone().map(Proposal::Value);
            self.send_phase2a(out);
        }
    }

    pub fn on_match_b(
        &mut self,
        from: NodeId,
        round: Round,
        gc_watermark: Round,
        history: Vec<LogEntry>,
        out: &mut Outbox,
    ) -> Result<(), ProposerError> {
        if round != self.round {
            return Err(ProposerError::MismatchedRound {
                expected: self.round,
                got: round,
            });
        }
        if self.phase != Phase::Matchmaking {
            return Err(ProposerError::WrongPhase(self.phase));
        }
        if !self.matchmakers.contains(&from) {
            return Ok(());
        }
        self.match_replies.insert(from, (gc_watermark, history));
        if self.match_replies.len() < self.f() + 1 {
            return Ok(());
        }
        self.history = merge_histories(self.match_replies.values().map(|(w, h)| (*w, h.as_slice())));
        self.phase = Phase::Phase1;
        if self.opts.gc == GcMode::Unguarded {
            self.send_garbage_a(out);
        }
        self.send_phase1a(out);
        self.try_finish_phase1(out);
        Ok(())
    }

    fn send_phase1a(&mut self, out: &mut Outbox) {
        for a in self.all_history_acceptors() {
            if self.contacted.insert(a) {
                out.send(
                    a,
                    Message::Phase1A {
                        round: self.round,
                        first_slot: Slot(0),
                    },
                );
            }
        }
    }

    pub fn on_phase1b(&mut self, from: NodeId, round: Round, votes: Vec<(Slot, Vote)>, out: &mut Outbox) {
        if round != self.round || !matches!(self.phase, Phase::Matchmaking | Phase::Phase1) {
            return;
        }
        let vote = votes.into_iter().find(|(s, _)| *s == Slot(0)).map(|(_, v)| v);
        self.p1_replies.insert(from, vote);
        if self.phase == Phase::Phase1 {
            self.try_finish_phase1(out);
        }
    }

    fn responders(&self) -> BTreeSet<NodeId> {
        self.p1_replies.keys().copied().collect()
    }

    fn phase1_covered(&self, k: Round) -> bool {
        let responders = self.responders();
        self.history
            .iter()
            .filter(|(j, _)| !(self.opts.round_pruning && *j < k))
            .all(|(_, c)| c.is_phase1_quorum(&responders))
    }

    fn try_finish_phase1(&mut self, out: &mut Outbox) {
        let (k, proposal) = choose_proposal(self.p1_replies.values().flatten(), self.value.as_ref(), self.opts.fast);
        if !self.phase1_covered(k) {
            return;
        }
        self.on_phase1b_complete(k, proposal, out);
    }

    fn on_phase1b_complete(&mut self, k: Round, proposal: Option<Proposal>, out: &mut Outbox) {
        self.k = k;
        self.phase = Phase::Phase2;
        self.proposal = proposal;
        if self.proposal.is_some() {
            self.send_phase2a(out);
        }
    }

    fn send_phase2a(&mut self, out: &mut Outbox) {
        let Some(config) = self.config.clone() else { return };
        let Some(proposal) = self.proposal.clone() else { return };
        let value = match &proposal {
            Proposal::Value(v) => Some(v.clone()),
            Proposal::Any => None,
        };
        out.emit(Event::Proposed {
            instance: self.instance,
            slot: Slot(0),
            round: self.round,
            value: value.clone(),
        });
        let msg = match value {
            Some(value) => Message::Phase2A {
                round: self.round,
                slot: Slot(0),
                value,
            },
            None => Message::Phase2AAny { round: self.round },
        };
        out.broadcast(config.acceptors(), msg);
    }

    pub fn on_phase2b(&mut self, from: NodeId, round: Round, out: &mut Outbox) {
        if round != self.round || self.phase != Phase::Phase2 {
            return;
        }
        let Some(Proposal::Value(v)) = self.proposal.clone() else { return };
        let config = self.config.as_ref().expect("config set in phase 2");
        if !config.contains(from) {
            return;
        }
        self.p2_acks.insert(from);
        if config.is_phase2_quorum(&self.p2_acks) {
            self.on_chosen(v, out);
        }
    }

    pub fn on_fast_phase2b(&mut self, now: Time, from: NodeId, round: Round, value: Value, out: &mut Outbox) {
        if round != self.round || self.phase != Phase::Phase2 {
            return;
        }
        let config = self.config.clone().expect("config set in phase 2");
        if !config.contains(from) {
            return;
        }
        self.fast_votes.insert(from, value.clone());
        let agreeing: BTreeSet<NodeId> = self
            .fast_votes
            .iter()
            .filter(|(_, v)| **v == value)
            .map(|(a, _)| *a)
            .collect();
        if config.is_phase2_quorum(&agreeing) {
            self.on_chosen(value, out);
        } else if self.fast_votes.len() == config.acceptors().len() {
            // A collision: no value can gather a unanimous vote in this round.
            self.phase = Phase::Idle;
            let _ = self.begin_round(now, None, config, out);
        }
    }

    fn on_chosen(&mut self, v: Value, out: &mut Outbox) {
        self.phase = Phase::Chosen;
        self.chosen_round = self.round;
        self.chosen = Some(v.clone());
        out.emit(Event::Learned {
            instance: self.instance,
            value: v,
        });
        if self.opts.gc == GcMode::Guarded {
            let _ = self.maybe_issue_gc(out);
        }
    }

    pub fn on_nack(&mut self, now: Time, round: Round, out: &mut Outbox) {
        self.highest_seen = self.highest_seen.max(round);
        if round > self.round && !matches!(self.phase, Phase::Idle | Phase::Chosen) {
            self.phase = Phase::Idle;
            if self.opts.auto_retry {
                self.retry(now, out);
            }
        }
    }

    /// Abandons the current round and starts the next one with the same value
    /// and configuration.
    pub fn retry(&mut self, now: Time, out: &mut Outbox) {
        if self.phase == Phase::Chosen {
            return;
        }
        let Some(config) = self.config.clone() else { return };
        self.phase = Phase::Idle;
        let _ = self.begin_round(now, None, config, out);
    }

    /// Scenario 1: chosen in this round. Scenario 2: Phase 1 found no vote.
    pub fn gc_scenario_holds(&self) -> bool {
        match self.phase {
            Phase::Chosen => self.chosen_round == self.round,
            Phase::Phase2 => self.k.is_bottom(),
            _ => false,
        }
    }

    pub fn maybe_issue_gc(&mut self, out: &mut Outbox) -> Result<(), ProposerError> {
        if self.opts.gc != GcMode::Unguarded && !self.gc_scenario_holds() {
            return Err(ProposerError::NoGcScenario);
        }
        self.send_garbage_a(out);
        Ok(())
    }

    /// Scenario 3: a value chosen in an earlier round is stored on `f + 1`
    /// replicas and a Phase 2 quorum of this round's configuration was told.
    pub fn issue_gc_after_replication(
        &mut self,
        replicated_on: usize,
        replicas: usize,
        hinted: &BTreeSet<NodeId>,
        out: &mut Outbox,
    ) -> Result<(), ProposerError> {
        let config = self.config.as_ref().ok_or(ProposerError::NoGcScenario)?;
        if self.phase == Phase::Idle
            || self.phase == Phase::Matchmaking
            || replicated_on < replicas / 2 + 1
            || !config.is_phase2_quorum(hinted)
        {
            return Err(ProposerError::NoGcScenario);
        }
        self.send_garbage_a(out);
        Ok(())
    }

    fn send_garbage_a(&mut self, out: &mut Outbox) {
        if self.fixed.is_some() {
            return;
        }
        self.gc_round = Some(self.round);
        self.gc_acks.clear();
        out.emit(Event::GcIssued { round: self.round });
        out.broadcast(&self.matchmakers, Message::GarbageA { round: self.round });
    }

    pub fn on_garbage_b(&mut self, from: NodeId, round: Round, out: &mut Outbox) {
        if Some(round) != self.gc_round || self.retired {
            return;
        }
        self.gc_acks.insert(from);
        if self.gc_acks.len() > self.f() {
            self.retired = true;
            out.emit(Event::Retire { below: round });
        }
    }

    fn resend(&mut self, out: &mut Outbox) {
        match self.phase {
            Phase::Matchmaking => {
                let missing: Vec<NodeId> = self
                    .matchmakers
                    .iter()
                    .filter(|m| !self.match_replies.contains_key(m))
                    .copied()
                    .collect();
                let config = self.config.clone().expect("config set while matchmaking");
                out.broadcast(&missing, Message::MatchA { round: self.round, config });
            }
            Phase::Phase1 => self.send_phase1a(out),
            Phase::Phase2 => {
                let Some(config) = self.config.clone() else { return };
                let missing: Vec<NodeId> = config
                    .acceptors()
                    .iter()
                    .filter(|a| !self.p2_acks.contains(a) && !self.fast_votes.contains_key(a))
                    .copied()
                    .collect();
                let msg = match &self.proposal {
                    Some(Proposal::Value(v)) => Message::Phase2A {
                        round: self.round,
                        slot: Slot(0),
                        value: v.clone(),
                    },
                    Some(Proposal::Any) => Message::Phase2AAny { round: self.round },
                    None => return,
                };
                out.broadcast(&missing, msg);
            }
            Phase::Idle | Phase::Chosen => {}
        }
    }

    pub fn apply_record(&mut self, record: &JournalRecord) {
        if let JournalRecord::LeaderRound { round } = record {
            self.highest_seen = self.highest_seen.max(*round);
            self.round = self.round.max(*round);
        }
    }
}

impl Process for Proposer {
    fn on_message(&mut self, now: Time, from: NodeId, msg: Message, out: &mut Outbox) {
        match msg {
            Message::MatchB {
                round,
                gc_watermark,
                history,
            } => {
                let _ = self.on_match_b(from, round, gc_watermark, history, out);
            }
            Message::Phase1B { round, votes, .. } => self.on_phase1b(from, round, votes, out),
            Message::Phase2B { round, .. } => self.on_phase2b(from, round, out),
            Message::FastPhase2B { round, value } => self.on_fast_phase2b(now, from, round, value, out),
            Message::GarbageB { round } => self.on_garbage_b(from, round, out),
            Message::Nack { round } => self.on_nack(now, round, out),
            _ => {}
        }
    }

    fn on_tick(&mut self, now: Time, out: &mut Outbox) {
        if let Some((at, _, _)) = &self.start {
            if now >= *at {
                let (_, value, config) = self.start.take().unwrap();
                let _ = self.begin_round(now, value, config, out);
                return;
            }
        }
        if now >= self.last_send + self.resend && !matches!(self.phase, Phase::Idle | Phase::Chosen) {
            self.last_send = now;
            if self.opts.auto_retry && self.phase != Phase::Phase2 {
                self.retry(now, out);
            } else {
                self.resend(out);
            }
        }
    }
}
