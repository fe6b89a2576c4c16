//! The MultiPaxos leader: slot assignment, Phase 1 over the log suffix,
//! reconfiguration by advancing to the next owned round, and garbage
//! collection of old configurations.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::Configuration;
use crate::election::{ElectionState, Tick};
use crate::message::{LogEntry, Message};
use crate::process::{Event, JournalRecord, Outbox, Process, Time, Timing};
use crate::proposer::{merge_histories, GcMode};
use crate::round::{NodeId, Round};
use crate::util::mix64;
use crate::value::{slot_after, Command, Instance, Slot, SlotRange, Value, Vote};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeaderOptions {
    /// Keep serving commands in the old round while matchmaking.
    pub proactive: bool,
    /// Serve commands in the new round as soon as matchmaking finishes.
    pub bypass: bool,
    pub gc: GcMode,
    /// Send each `Phase2A` to one Phase 2 quorum instead of every acceptor.
    pub thrifty: bool,
}

impl LeaderOptions {
    pub const ALL: LeaderOptions = LeaderOptions {
        proactive: true,
        bypass: true,
        gc: GcMode::Guarded,
        thrifty: false,
    };

    pub const NONE: LeaderOptions = LeaderOptions {
        proactive: false,
        bypass: false,
        gc: GcMode::Off,
        thrifty: false,
    };
}

impl Default for LeaderOptions {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeaderConfig {
    pub id: NodeId,
    pub proposers: Vec<NodeId>,
    pub matchmakers: Vec<NodeId>,
    pub replicas: Vec<NodeId>,
    pub initial_config: Configuration,
    pub initial_leader: bool,
    pub timing: Timing,
    pub opts: LeaderOptions,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
enum Entry {
    Pending {
        round: Round,
        value: Value,
        acks: BTreeSet<NodeId>,
        sent: Time,
    },
    Chosen(Value),
    /// Known chosen from a hint; the value lives on the replicas.
    ChosenElsewhere,
}

impl Entry {
    fn is_chosen(&self) -> bool {
        !matches!(self, Entry::Pending { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
enum Stage {
    Matchmaking {
        replies: BTreeMap<NodeId, (Round, Vec<LogEntry>)>,
        /// Present when this leadership is fresh and must learn the chosen
        /// prefix from the replicas.
        watermarks: Option<BTreeMap<NodeId, Option<Slot>>>,
    },
    Phase1 {
        history: Vec<LogEntry>,
        first_slot: Slot,
        replies: BTreeMap<NodeId, (Vec<(Slot, Vote)>, Vec<SlotRange>)>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
struct Setup {
    round: Round,
    config: Configuration,
    stage: Stage,
    /// Set when Phase 1 is bypassed: slots from here on go to the new round.
    bypass_from: Option<Slot>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
enum GcStage {
    /// Waiting for slots up to the boundary to be chosen and persisted.
    Waiting,
    Hinting(BTreeSet<NodeId>),
    Collecting(BTreeSet<NodeId>),
    Done,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
struct GcPlan {
    round: Round,
    config: Configuration,
    /// Largest slot that may have been chosen in a round below `round`.
    boundary: Option<Slot>,
    stage: GcStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Route {
    Round(Round),
    Queue,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReconfigureError {
    NotSteady,
    Superseded(Round),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Leader {
    id: NodeId,
    proposers: Vec<NodeId>,
    replicas: Vec<NodeId>,
    timing: Timing,
    opts: LeaderOptions,
    seed: u64,
    matchmakers: Vec<NodeId>,
    mm_epoch: u64,
    election: ElectionState,
    highest_seen: Round,
    leading: bool,
    active: Option<(Round, Configuration)>,
    setup: Option<Setup>,
    target: Configuration,
    round_configs: BTreeMap<Round, Configuration>,
    log: BTreeMap<Slot, Entry>,
    chosen_watermark: Option<Slot>,
    next_slot: Slot,
    queue: VecDeque<Command>,
    clients: BTreeMap<NodeId, (u64, Option<Slot>)>,
    persisted: BTreeMap<NodeId, Option<Slot>>,
    gc: Option<GcPlan>,
    last_resend: Time,
}

fn majority_f(n: usize) -> usize {
    n.saturating_sub(1) / 2
}

impl Leader {
    pub fn new(cfg: LeaderConfig) -> Self {
        Leader {
            id: cfg.id,
            election: ElectionState::new(cfg.id, cfg.proposers.clone(), cfg.timing, cfg.initial_leader),
            proposers: cfg.proposers,
            replicas: cfg.replicas,
            timing: cfg.timing,
            opts: cfg.opts,
            seed: cfg.seed,
            matchmakers: cfg.matchmakers,
            mm_epoch: 0,
            highest_seen: Round::BOTTOM,
            leading: false,
            active: None,
            setup: None,
            target: cfg.initial_config,
            round_configs: BTreeMap::new(),
            log: BTreeMap::new(),
            chosen_watermark: None,
            next_slot: Slot(0),
            queue: VecDeque::new(),
            clients: BTreeMap::new(),
            persisted: BTreeMap::new(),
            gc: None,
            last_resend: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn is_leading(&self) -> bool {
        self.leading
    }

    pub fn is_steady(&self) -> bool {
        self.leading && self.setup.is_none() && self.active.is_some()
    }

    /// The round Phase 2 currently runs in.
    pub fn active_round(&self) -> Option<Round> {
        self.active.as_ref().map(|(r, _)| *r)
    }

    pub fn active_config(&self) -> Option<&Configuration> {
        self.active.as_ref().map(|(_, c)| c)
    }

    pub fn chosen_watermark(&self) -> Option<Slot> {
        self.chosen_watermark
    }

    pub fn next_slot(&self) -> Slot {
        self.next_slot
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn matchmakers(&self) -> &[NodeId] {
        &self.matchmakers
    }

    pub fn gc_done(&self) -> bool {
        matches!(self.gc, Some(GcPlan { stage: GcStage::Done, .. }))
    }

    pub fn known_leader(&self) -> Option<NodeId> {
        self.election.leader()
    }

    fn current_round(&self) -> Round {
        match (&self.setup, &self.active) {
            (Some(s), _) => s.round,
            (None, Some((r, _))) => *r,
            _ => Round::BOTTOM,
        }
    }

    fn mm_f(&self) -> usize {
        majority_f(self.matchmakers.len())
    }

    fn replica_f(&self) -> usize {
        majority_f(self.replicas.len())
    }

    fn designated_replica(&self, slot: Slot) -> NodeId {
        self.replicas[(slot.0 % self.replicas.len() as u64) as usize]
    }

    // ---- leadership and rounds ----

    fn start_leadership(&mut self, now: Time, round: Round, out: &mut Outbox) {
        let round = round.max(Round::first_above(self.highest_seen, self.id));
        self.leading = true;
        self.active = None;
        self.log.clear();
        self.queue.clear();
        self.clients.clear();
        self.persisted.clear();
        self.gc = None;
        self.chosen_watermark = None;
        self.next_slot = Slot(0);
        self.election.claim(now, round);
        out.emit(Event::Elected { round });
        let others: Vec<NodeId> = self.election.others().copied().collect();
        out.broadcast(&others, Message::LeaderElect { round });
        let config = self.target.clone();
        self.start_setup(now, round, config, true, out);
    }

    fn start_setup(&mut self, now: Time, round: Round, config: Configuration, fresh: bool, out: &mut Outbox) {
        self.highest_seen = self.highest_seen.max(round);
        self.last_resend = now;
        self.round_configs.insert(round, config.clone());
        out.record(JournalRecord::LeaderRound { round });
        out.emit(Event::RoundConfig {
            instance: Instance::Log,
            round,
            config: config.clone(),
        });
        out.broadcast(&self.matchmakers, Message::MatchA { round, config: config.clone() });
        if fresh {
            out.broadcast(&self.replicas, Message::WatermarkQuery);
        }
        self.setup = Some(Setup {
            round,
            config,
            stage: Stage::Matchmaking {
                replies: BTreeMap::new(),
                watermarks: fresh.then(BTreeMap::new),
            },
            bypass_from: None,
        });
    }

    fn step_down(&mut self, now: Time, seen: Round, out: &mut Outbox) {
        self.highest_seen = self.highest_seen.max(seen);
        if !self.leading {
            return;
        }
        let round = self.current_round();
        self.leading = false;
        self.active = None;
        self.setup = None;
        self.log.clear();
        self.queue.clear();
        self.clients.clear();
        self.persisted.clear();
        self.gc = None;
        self.election.resign(now);
        out.emit(Event::SteppedDown { round });
    }

    /// Advances to the successor round with `config`. Only legal in steady
    /// state.
    pub fn reconfigure(&mut self, now: Time, config: Configuration, out: &mut Outbox) -> Result<(), ReconfigureError> {
        self.target = config.clone();
        if !self.is_steady() {
            out.emit(Event::ReconfigRejected);
            return Err(ReconfigureError::NotSteady);
        }
        let (round, _) = self.active.clone().expect("steady");
        if self.highest_seen > round {
            out.emit(Event::ReconfigRejected);
            return Err(ReconfigureError::Superseded(self.highest_seen));
        }
        let next = round.successor().expect("own rounds are never bottom");
        self.start_setup(now, next, config, false, out);
        Ok(())
    }

    /// Bypass is sound when every round between the active round and the new
    /// one belongs to this leader, i.e. they share counter and owner.
    fn bypass_eligible(&self, setup: &Setup) -> bool {
        self.opts.bypass
            && self
                .active
                .as_ref()
                .is_some_and(|(r, _)| r.counter() == setup.round.counter() && r.owner() == setup.round.owner())
    }

    // ---- matchmaking and phase 1 ----

    fn on_match_b(&mut self, now: Time, from: NodeId, round: Round, w: Round, history: Vec<LogEntry>, out: &mut Outbox) {
        if !self.matchmakers.contains(&from) {
            return;
        }
        let Some(setup) = self.setup.as_mut() else { return };
        if setup.round != round {
            return;
        }
        if let Stage::Matchmaking { replies, .. } = &mut setup.stage {
            replies.insert(from, (w, history));
        }
        self.try_finish_matchmaking(now, out);
    }

    fn on_watermark_reply(&mut self, now: Time, from: NodeId, executed: Option<Slot>, out: &mut Outbox) {
        let Some(setup) = self.setup.as_mut() else { return };
        if let Stage::Matchmaking {
            watermarks: Some(w), ..
        } = &mut setup.stage
        {
            if self.replicas.contains(&from) {
                w.insert(from, executed);
            }
        }
        self.try_finish_matchmaking(now, out);
    }

    fn try_finish_matchmaking(&mut self, now: Time, out: &mut Outbox) {
        let (mm_need, replica_need) = (self.mm_f() + 1, self.replica_f() + 1);
        let Some(setup) = self.setup.as_ref() else { return };
        let Stage::Matchmaking { replies, watermarks } = &setup.stage else { return };
        if replies.len() < mm_need || watermarks.as_ref().is_some_and(|w| w.len() < replica_need) {
            return;
        }
        let history = merge_histories(replies.values().map(|(w, h)| (*w, h.as_slice())));
        if let Some(w) = watermarks {
            let discovered = w.values().copied().max().flatten();
            self.chosen_watermark = self.chosen_watermark.max(discovered);
            self.next_slot = self.next_slot.max(slot_after(self.chosen_watermark));
        }
        let first_slot = slot_after(self.chosen_watermark);
        let round = setup.round;
        let config = setup.config.clone();
        let bypass = self.bypass_eligible(setup);
        let acceptors: BTreeSet<NodeId> = history.iter().flat_map(|(_, c)| c.acceptors().iter().copied()).collect();
        let setup = self.setup.as_mut().expect("checked above");
        setup.stage = Stage::Phase1 {
            history,
            first_slot,
            replies: BTreeMap::new(),
        };
        if bypass {
            setup.bypass_from = Some(self.next_slot);
        }
        if self.opts.gc == GcMode::Unguarded {
            self.gc = Some(GcPlan {
                round,
                config,
                boundary: None,
                stage: GcStage::Collecting(BTreeSet::new()),
            });
            out.emit(Event::GcIssued { round });
            out.broadcast(&self.matchmakers, Message::GarbageA { round });
        }
        out.broadcast(&acceptors, Message::Phase1A { round, first_slot });
        if bypass {
            self.drain_queue(now, out);
        }
        self.try_finish_phase1(now, out);
    }

    fn on_phase1b(
        &mut self,
        now: Time,
        from: NodeId,
        round: Round,
        votes: Vec<(Slot, Vote)>,
        chosen: Vec<SlotRange>,
        out: &mut Outbox,
    ) {
        let Some(setup) = self.setup.as_mut() else { return };
        if setup.round != round {
            return;
        }
        if let Stage::Phase1 { replies, .. } = &mut setup.stage {
            replies.insert(from, (votes, chosen));
            self.try_finish_phase1(now, out);
        }
    }

    fn try_finish_phase1(&mut self, now: Time, out: &mut Outbox) {
        let Some(setup) = self.setup.as_ref() else { return };
        let Stage::Phase1 {
            history,
            first_slot,
            replies,
        } = &setup.stage
        else {
            return;
        };
        let responders: BTreeSet<NodeId> = replies.keys().copied().collect();
        if !history.iter().all(|(_, c)| c.is_phase1_quorum(&responders)) {
            return;
        }
        let round = setup.round;
        let first_slot = *first_slot;
        let bypass_from = setup.bypass_from;
        let limit = bypass_from.unwrap_or(Slot(u64::MAX));

        let mut best: BTreeMap<Slot, Vote> = BTreeMap::new();
        let mut hints: Vec<SlotRange> = Vec::new();
        for (votes, chosen) in replies.values() {
            for (slot, vote) in votes {
                if vote.round >= round || *slot < first_slot || *slot >= limit {
                    continue;
                }
                match best.get(slot) {
                    Some(b) if b.round >= vote.round => {}
                    _ => {
                        best.insert(*slot, vote.clone());
                    }
                }
            }
            hints.extend(chosen.iter().filter(|r| r.first < limit).copied());
        }
        let hinted = |s: Slot| hints.iter().any(|r| r.contains(s));

        let region_end: Option<Slot> = match bypass_from {
            Some(b) => b.0.checked_sub(1).map(Slot),
            None => {
                let max_vote = best.keys().next_back().copied();
                let max_hint = hints.iter().map(|r| r.last).max();
                let max_own = self.next_slot.0.checked_sub(1).map(Slot);
                max_vote.max(max_hint).max(max_own)
            }
        };

        if let Some(end) = region_end {
            let mut s = first_slot;
            while s <= end {
                match self.log.get(&s) {
                    Some(e) if e.is_chosen() => {}
                    _ if hinted(s) => {
                        self.log.insert(s, Entry::ChosenElsewhere);
                    }
                    own => {
                        let value = match (best.get(&s), own) {
                            (Some(v), _) => v.value.clone(),
                            (None, Some(Entry::Pending { value, .. })) => value.clone(),
                            _ => Value::Noop,
                        };
                        self.propose(now, s, round, value, out);
                    }
                }
                s = s.next();
            }
            self.next_slot = self.next_slot.max(end.next());
        }
        self.advance_watermark(out);

        let setup = self.setup.take().expect("checked above");
        self.active = Some((round, setup.config.clone()));
        out.emit(Event::Steady { round });
        self.drain_queue(now, out);

        if self.opts.gc == GcMode::Guarded {
            let boundary = first_slot.0.checked_sub(1).map(Slot).max(region_end);
            self.gc = Some(GcPlan {
                round,
                config: setup.config,
                boundary,
                stage: GcStage::Waiting,
            });
            self.check_gc(out);
        }
    }

    // ---- commands ----

    fn route(&self) -> Route {
        match (&self.setup, &self.active) {
            (None, Some((r, _))) => Route::Round(*r),
            (Some(s), active) => {
                if s.bypass_from.is_some() {
                    Route::Round(s.round)
                } else if matches!(s.stage, Stage::Matchmaking { .. }) && self.opts.proactive {
                    active.as_ref().map_or(Route::Queue, |(r, _)| Route::Round(*r))
                } else {
                    Route::Queue
                }
            }
            (None, None) => Route::Queue,
        }
    }

    fn on_client_request(&mut self, now: Time, client: NodeId, seq: u64, payload: Vec<u8>, out: &mut Outbox) {
        if !self.leading {
            out.send(
                client,
                Message::Redirect {
                    leader: self.election.leader(),
                },
            );
            return;
        }
        if let Some((last, slot)) = self.clients.get(&client) {
            if seq < *last {
                return;
            }
            if seq == *last {
                if let Some(slot) = slot {
                    let chosen_here = self.log.get(slot).is_none_or(Entry::is_chosen);
                    if chosen_here {
                        out.send(self.designated_replica(*slot), Message::ReplyRequest { client, seq });
                    }
                }
                return;
            }
        }
        let cmd = Command { client, seq, payload };
        match self.route() {
            Route::Queue => {
                self.clients.insert(client, (seq, None));
                out.emit(Event::Queued { client, seq });
                self.queue.push_back(cmd);
            }
            Route::Round(round) => self.assign(now, round, cmd, out),
        }
    }

    fn assign(&mut self, now: Time, round: Round, cmd: Command, out: &mut Outbox) {
        let slot = self.next_slot;
        self.next_slot = slot.next();
        self.clients.insert(cmd.client, (cmd.seq, Some(slot)));
        self.propose(now, slot, round, Value::Command(cmd), out);
    }

    fn drain_queue(&mut self, now: Time, out: &mut Outbox) {
        while let Route::Round(round) = self.route() {
            let Some(cmd) = self.queue.pop_front() else { break };
            self.assign(now, round, cmd, out);
        }
    }

    fn propose(&mut self, now: Time, slot: Slot, round: Round, value: Value, out: &mut Outbox) {
        let config = self.round_configs.get(&round).expect("own round has a configuration").clone();
        out.emit(Event::Proposed {
            instance: Instance::Log,
            slot,
            round,
            value: Some(value.clone()),
        });
        let msg = Message::Phase2A {
            round,
            slot,
            value: value.clone(),
        };
        if self.opts.thrifty {
            let q = config.phase2_quorum_at(mix64(self.seed ^ slot.0.rotate_left(17) ^ round.sub()));
            out.broadcast(q, msg);
        } else {
            out.broadcast(config.acceptors(), msg);
        }
        self.log.insert(
            slot,
            Entry::Pending {
                round,
                value,
                acks: BTreeSet::new(),
                sent: now,
            },
        );
    }

    fn on_phase2b(&mut self, from: NodeId, round: Round, slot: Slot, out: &mut Outbox) {
        let Some(Entry::Pending {
            round: r, value, acks, ..
        }) = self.log.get_mut(&slot)
        else {
            return;
        };
        if *r != round {
            return;
        }
        let Some(config) = self.round_configs.get(&round) else { return };
        if !config.contains(from) {
            return;
        }
        acks.insert(from);
        if config.is_phase2_quorum(acks) {
            let value = value.clone();
            self.log.insert(slot, Entry::Chosen(value.clone()));
            out.broadcast(&self.replicas, Message::Chosen { slot, value });
            self.advance_watermark(out);
        }
    }

    fn advance_watermark(&mut self, out: &mut Outbox) {
        loop {
            let next = slot_after(self.chosen_watermark);
            match self.log.get(&next) {
                Some(e) if e.is_chosen() => self.chosen_watermark = Some(next),
                _ => break,
            }
        }
        self.check_gc(out);
    }

    // ---- garbage collection ----

    /// Largest slot persisted by `f + 1` replicas.
    fn persisted_quorum(&self) -> Option<Slot> {
        let mut v: Vec<Option<Slot>> = self.persisted.values().copied().collect();
        v.sort_by(|a, b| b.cmp(a));
        v.get(self.replica_f()).copied().flatten()
    }

    fn on_prefix_persisted(&mut self, from: NodeId, slot: Option<Slot>, out: &mut Outbox) {
        if !self.replicas.contains(&from) {
            return;
        }
        let e = self.persisted.entry(from).or_insert(None);
        *e = (*e).max(slot);
        let safe = self.persisted_quorum().min(self.chosen_watermark);
        if let Some(safe) = safe {
            let keep = self.log.split_off(&safe.next());
            self.log = keep;
        }
        self.check_gc(out);
    }

    fn check_gc(&mut self, out: &mut Outbox) {
        let ready = {
            let Some(plan) = self.gc.as_ref() else { return };
            if plan.stage != GcStage::Waiting {
                return;
            }
            match plan.boundary {
                None => true,
                Some(k) => self.chosen_watermark >= Some(k) && self.persisted_quorum() >= Some(k),
            }
        };
        if !ready {
            return;
        }
        let plan = self.gc.as_mut().expect("checked above");
        match plan.boundary {
            Some(k) => {
                plan.stage = GcStage::Hinting(BTreeSet::new());
                out.broadcast(
                    plan.config.acceptors(),
                    Message::ChosenHint {
                        round: plan.round,
                        range: SlotRange::new(Slot(0), k),
                    },
                );
            }
            None => {
                plan.stage = GcStage::Collecting(BTreeSet::new());
                out.emit(Event::GcIssued { round: plan.round });
                out.broadcast(&self.matchmakers, Message::GarbageA { round: plan.round });
            }
        }
    }

    fn on_hint_ack(&mut self, from: NodeId, round: Round, out: &mut Outbox) {
        let Some(plan) = self.gc.as_mut() else { return };
        if plan.round != round || !plan.config.contains(from) {
            return;
        }
        if let GcStage::Hinting(acks) = &mut plan.stage {
            acks.insert(from);
            if plan.config.is_phase2_quorum(acks) {
                plan.stage = GcStage::Collecting(BTreeSet::new());
                out.emit(Event::GcIssued { round });
                out.broadcast(&self.matchmakers, Message::GarbageA { round });
            }
        }
    }

    fn on_garbage_b(&mut self, from: NodeId, round: Round, out: &mut Outbox) {
        let need = self.mm_f() + 1;
        if !self.matchmakers.contains(&from) {
            return;
        }
        let Some(plan) = self.gc.as_mut() else { return };
        if plan.round != round {
            return;
        }
        if let GcStage::Collecting(acks) = &mut plan.stage {
            acks.insert(from);
            if acks.len() >= need {
                plan.stage = GcStage::Done;
                self.round_configs = self.round_configs.split_off(&round);
                out.emit(Event::Retire { below: round });
            }
        }
    }

    // ---- timers ----

    fn resend(&mut self, now: Time, out: &mut Outbox) {
        if let Some(setup) = &self.setup {
            match &setup.stage {
                Stage::Matchmaking { replies, watermarks } => {
                    for m in &self.matchmakers {
                        if !replies.contains_key(m) {
                            out.send(
                                *m,
                                Message::MatchA {
                                    round: setup.round,
                                    config: setup.config.clone(),
                                },
                            );
                        }
                    }
                    if let Some(w) = watermarks {
                        for r in &self.replicas {
                            if !w.contains_key(r) {
                                out.send(*r, Message::WatermarkQuery);
                            }
                        }
                    }
                }
                Stage::Phase1 {
                    history,
                    first_slot,
                    replies,
                } => {
                    let acceptors: BTreeSet<NodeId> =
                        history.iter().flat_map(|(_, c)| c.acceptors().iter().copied()).collect();
                    for a in acceptors.difference(&replies.keys().copied().collect()) {
                        out.send(
                            *a,
                            Message::Phase1A {
                                round: setup.round,
                                first_slot: *first_slot,
                            },
                        );
                    }
                }
            }
        }
        let resend = self.timing.resend;
        for (slot, entry) in self.log.iter_mut() {
            if let Entry::Pending {
                round,
                value,
                acks,
                sent,
            } = entry
            {
                if *sent + resend > now {
                    continue;
                }
                *sent = now;
                if let Some(config) = self.round_configs.get(round) {
                    for a in config.acceptors().iter().filter(|a| !acks.contains(a)) {
                        out.send(
                            *a,
                            Message::Phase2A {
                                round: *round,
                                slot: *slot,
                                value: value.clone(),
                            },
                        );
                    }
                }
            }
        }
        if let Some(plan) = &self.gc {
            match &plan.stage {
                GcStage::Hinting(acks) => {
                    if let Some(k) = plan.boundary {
                        for a in plan.config.acceptors().iter().filter(|a| !acks.contains(a)) {
                            out.send(
                                *a,
                                Message::ChosenHint {
                                    round: plan.round,
                                    range: SlotRange::new(Slot(0), k),
                                },
                            );
                        }
                    }
                }
                GcStage::Collecting(acks) => {
                    for m in self.matchmakers.iter().filter(|m| !acks.contains(m)) {
                        out.send(*m, Message::GarbageA { round: plan.round });
                    }
                }
                GcStage::Waiting | GcStage::Done => {}
            }
        }
    }

    fn on_matchmaker_view(&mut self, now: Time, epoch: u64, members: Vec<NodeId>, out: &mut Outbox) {
        if epoch <= self.mm_epoch {
            return;
        }
        self.mm_epoch = epoch;
        self.matchmakers = members;
        if let Some(plan) = self.gc.as_mut() {
            if let GcStage::Collecting(acks) = &mut plan.stage {
                acks.clear();
                out.broadcast(&self.matchmakers, Message::GarbageA { round: plan.round });
            }
        }
        let restart = match &self.setup {
            Some(Setup {
                round,
                config,
                stage: Stage::Matchmaking { watermarks, .. },
                ..
            }) => Some((*round, config.clone(), watermarks.is_some())),
            _ => None,
        };
        if let Some((round, config, fresh)) = restart {
            // The old set may have logged `round` before stopping, so the new
            // set would ignore it.
            let next = round.successor().expect("own rounds are never bottom");
            self.start_setup(now, next, config, fresh, out);
        }
    }

    pub fn apply_record(&mut self, record: &JournalRecord) {
        if let JournalRecord::LeaderRound { round } = record {
            self.highest_seen = self.highest_seen.max(*round);
        }
    }
}

impl Process for Leader {
    fn on_message(&mut self, now: Time, from: NodeId, msg: Message, out: &mut Outbox) {
        match msg {
            Message::ClientRequest { seq, payload } => self.on_client_request(now, from, seq, payload, out),
            Message::MatchB {
                round,
                gc_watermark,
                history,
            } => self.on_match_b(now, from, round, gc_watermark, history, out),
            Message::WatermarkReply { executed } => self.on_watermark_reply(now, from, executed, out),
            Message::Phase1B { round, votes, chosen } => self.on_phase1b(now, from, round, votes, chosen, out),
            Message::Phase2B { round, slot } => self.on_phase2b(from, round, slot, out),
            Message::ChosenHintAck { round, .. } => self.on_hint_ack(from, round, out),
            Message::GarbageB { round } => self.on_garbage_b(from, round, out),
            Message::PrefixPersisted { slot } => self.on_prefix_persisted(from, slot, out),
            Message::Nack { round } => {
                if round > self.current_round() {
                    self.step_down(now, round, out);
                }
                self.highest_seen = self.highest_seen.max(round);
            }
            Message::Heartbeat { round, .. } | Message::LeaderElect { round } => {
                if from == self.id {
                    return;
                }
                if self.leading && round > self.current_round() {
                    self.step_down(now, round, out);
                }
                self.highest_seen = self.highest_seen.max(round);
                if !self.leading {
                    self.election.observe(now, from, round);
                }
            }
            Message::Reconfigure { config } => {
                let _ = self.reconfigure(now, config, out);
            }
            Message::ElectNow => {
                if !self.leading {
                    let round = Round::first_above(self.highest_seen, self.id);
                    self.start_leadership(now, round, out);
                }
            }
            Message::MatchmakerView { epoch, members } => self.on_matchmaker_view(now, epoch, members, out),
            Message::FetchLog { from: first, to } => {
                let entries: Vec<(Slot, Value)> = self
                    .log
                    .range(first..=to)
                    .filter_map(|(s, e)| match e {
                        Entry::Chosen(v) => Some((*s, v.clone())),
                        _ => None,
                    })
                    .take(crate::replica::FETCH_BATCH as usize)
                    .collect();
                if !entries.is_empty() {
                    out.send(from, Message::LogEntries { entries });
                }
            }
            _ => {}
        }
    }

    fn on_tick(&mut self, now: Time, out: &mut Outbox) {
        match self.election.tick(now, self.leading, self.highest_seen) {
            Tick::SendHeartbeat => {
                let hb = Message::Heartbeat {
                    round: self.current_round(),
                    chosen_watermark: self.chosen_watermark,
                };
                let others: Vec<NodeId> = self.election.others().copied().collect();
                out.broadcast(&others, hb.clone());
                out.broadcast(&self.replicas, hb);
            }
            Tick::Candidate(round) => self.start_leadership(now, round, out),
            Tick::Idle => {}
        }
        if self.leading && now >= self.last_resend + self.timing.resend {
            self.last_resend = now;
            self.resend(now, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigId;
    use crate::message::MessageKind;
    use alloc::vec;

    const L: NodeId = NodeId(1);
    const MMS: [NodeId; 3] = [NodeId(20), NodeId(21), NodeId(22)];
    const REPLICAS: [NodeId; 3] = [NodeId(30), NodeId(31), NodeId(32)];
    const CLIENT: NodeId = NodeId(100);

    fn cfg(id: u64, base: u32) -> Configuration {
        Configuration::majority(ConfigId(id), [NodeId(base), NodeId(base + 1), NodeId(base + 2)])
    }

    fn leader(opts: LeaderOptions) -> Leader {
        Leader::new(LeaderConfig {
            id: L,
            proposers: vec![L, NodeId(2)],
            matchmakers: MMS.to_vec(),
            replicas: REPLICAS.to_vec(),
            initial_config: cfg(0, 10),
            initial_leader: true,
            timing: Timing::SIM,
            opts,
            seed: 7,
        })
    }

    fn kinds(out: &Outbox, kind: MessageKind) -> Vec<(NodeId, Message)> {
        out.sends.iter().filter(|(_, m)| m.kind() == kind).cloned().collect()
    }

    fn deliver_match_b(l: &mut Leader, history: Vec<LogEntry>, out: &mut Outbox) {
        let round = l.current_round();
        for m in &MMS[..2] {
            l.on_message(0, *m, Message::MatchB { round, gc_watermark: Round::BOTTOM, history: history.clone() }, out);
        }
    }

    fn deliver_watermarks(l: &mut Leader, w: Option<Slot>, out: &mut Outbox) {
        for r in &REPLICAS[..2] {
            l.on_message(0, *r, Message::WatermarkReply { executed: w }, out);
        }
    }

    /// Elects `L` on an empty history and returns it steady in its first round.
    fn steady(opts: LeaderOptions) -> Leader {
        let mut l = leader(opts);
        let mut out = Outbox::new();
        l.on_tick(0, &mut out);
        assert!(l.is_leading());
        deliver_match_b(&mut l, vec![], &mut out);
        deliver_watermarks(&mut l, None, &mut out);
        assert!(l.is_steady());
        l
    }

    fn request(l: &mut Leader, seq: u64, out: &mut Outbox) {
        l.on_message(0, CLIENT, Message::ClientRequest { seq, payload: vec![seq as u8] }, out);
    }

    fn phase2a_slots(out: &Outbox) -> BTreeSet<(Round, Slot)> {
        kinds(out, MessageKind::Phase2A)
            .into_iter()
            .map(|(_, m)| match m {
                Message::Phase2A { round, slot, .. } => (round, slot),
                _ => unreachable!(),
            })
            .collect()
    }

    #[test]
    fn election_repairs_the_maybe_region_and_fills_holes() {
        let old = Round::new(0, NodeId(2), 0);
        let mut l = leader(LeaderOptions::ALL);
        l.highest_seen = old;
        let mut out = Outbox::new();
        l.on_tick(0, &mut out);
        let round = l.current_round();
        deliver_match_b(&mut l, vec![(old, cfg(0, 10))], &mut out);
        deliver_watermarks(&mut l, Some(Slot(2)), &mut out);
        let p1 = kinds(&out, MessageKind::Phase1A);
        assert!(p1.iter().all(|(_, m)| *m == Message::Phase1A { round, first_slot: Slot(3) }));
        out.clear();
        let d = Value::command(NodeId(7), 1, b"d".to_vec());
        let e = Value::command(NodeId(7), 2, b"e".to_vec());
        l.on_message(
            0,
            NodeId(10),
            Message::Phase1B {
                round,
                votes: vec![(Slot(3), Vote { round: old, value: d.clone() })],
                chosen: vec![],
            },
            &mut out,
        );
        l.on_message(
            0,
            NodeId(11),
            Message::Phase1B {
                round,
                votes: vec![(Slot(5), Vote { round: old, value: e.clone() })],
                chosen: vec![],
            },
            &mut out,
        );
        assert!(l.is_steady());
        let proposed: BTreeMap<Slot, Value> = kinds(&out, MessageKind::Phase2A)
            .into_iter()
            .map(|(_, m)| match m {
                Message::Phase2A { slot, value, .. } => (slot, value),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(
            proposed,
            [(Slot(3), d), (Slot(4), Value::Noop), (Slot(5), e)].into_iter().collect()
        );
        assert_eq!(l.next_slot(), Slot(6));
    }

    #[test]
    fn empty_history_goes_straight_to_steady() {
        let mut l = leader(LeaderOptions::ALL);
        let mut out = Outbox::new();
        l.on_tick(0, &mut out);
        deliver_match_b(&mut l, vec![], &mut out);
        out.clear();
        deliver_watermarks(&mut l, None, &mut out);
        assert!(l.is_steady());
        assert!(kinds(&out, MessageKind::Phase2A).is_empty());
    }

    #[test]
    fn hinted_slots_are_not_reproposed() {
        let old = Round::new(0, NodeId(2), 0);
        let mut l = leader(LeaderOptions::ALL);
        l.highest_seen = old;
        let mut out = Outbox::new();
        l.on_tick(0, &mut out);
        let round = l.current_round();
        deliver_match_b(&mut l, vec![(old, cfg(0, 10))], &mut out);
        deliver_watermarks(&mut l, None, &mut out);
        out.clear();
        for a in [NodeId(10), NodeId(11)] {
            l.on_message(
                0,
                a,
                Message::Phase1B {
                    round,
                    votes: vec![],
                    chosen: vec![SlotRange::new(Slot(0), Slot(1))],
                },
                &mut out,
            );
        }
        assert!(kinds(&out, MessageKind::Phase2A).is_empty());
        assert_eq!(l.chosen_watermark(), Some(Slot(1)));
    }

    #[test]
    fn steady_assigns_consecutive_slots() {
        let mut l = steady(LeaderOptions::ALL);
        let round = l.active_round().unwrap();
        let mut out = Outbox::new();
        l.next_slot = Slot(8);
        request(&mut l, 1, &mut out);
        assert_eq!(phase2a_slots(&out), [(round, Slot(8))].into_iter().collect());
    }

    #[test]
    fn proactive_matchmaking_serves_the_old_round() {
        let mut l = steady(LeaderOptions::ALL);
        let old = l.active_round().unwrap();
        let mut out = Outbox::new();
        l.reconfigure(0, cfg(1, 40), &mut out).unwrap();
        out.clear();
        request(&mut l, 1, &mut out);
        let sent = kinds(&out, MessageKind::Phase2A);
        assert_eq!(phase2a_slots(&out), [(old, Slot(0))].into_iter().collect());
        assert!(sent.iter().all(|(to, _)| cfg(0, 10).contains(*to)));
    }

    #[test]
    fn bypass_serves_the_new_round_after_matchmaking() {
        let mut l = steady(LeaderOptions::ALL);
        let old = l.active_round().unwrap();
        let mut out = Outbox::new();
        request(&mut l, 1, &mut out);
        l.reconfigure(0, cfg(1, 40), &mut out).unwrap();
        let new = old.successor().unwrap();
        deliver_match_b(&mut l, vec![(old, cfg(0, 10))], &mut out);
        out.clear();
        request(&mut l, 2, &mut out);
        assert_eq!(phase2a_slots(&out), [(new, Slot(1))].into_iter().collect());
        assert!(kinds(&out, MessageKind::Phase2A).iter().all(|(to, _)| cfg(1, 40).contains(*to)));
        assert_eq!(l.queued(), 0);
    }

    #[test]
    fn without_bypass_phase1_commands_queue() {
        let opts = LeaderOptions {
            bypass: false,
            ..LeaderOptions::ALL
        };
        let mut l = steady(opts);
        let old = l.active_round().unwrap();
        let mut out = Outbox::new();
        l.reconfigure(0, cfg(1, 40), &mut out).unwrap();
        deliver_match_b(&mut l, vec![(old, cfg(0, 10))], &mut out);
        out.clear();
        request(&mut l, 1, &mut out);
        assert!(kinds(&out, MessageKind::Phase2A).is_empty());
        assert_eq!(l.queued(), 1);
        let new = l.current_round();
        for a in [NodeId(10), NodeId(11)] {
            l.on_message(0, a, Message::Phase1B { round: new, votes: vec![], chosen: vec![] }, &mut out);
        }
        assert_eq!(l.queued(), 0);
        assert_eq!(l.active_round(), Some(new));
        assert!(phase2a_slots(&out).contains(&(new, Slot(0))));
    }

    #[test]
    fn reconfigure_to_the_same_configuration_is_legal() {
        let mut l = steady(LeaderOptions::ALL);
        let old = l.active_round().unwrap();
        let mut out = Outbox::new();
        l.reconfigure(0, cfg(0, 10), &mut out).unwrap();
        deliver_match_b(&mut l, vec![(old, cfg(0, 10))], &mut out);
        let new = l.current_round();
        for a in [NodeId(10), NodeId(11)] {
            l.on_message(0, a, Message::Phase1B { round: new, votes: vec![], chosen: vec![] }, &mut out);
        }
        assert_eq!(l.active_round(), Some(old.successor().unwrap()));
        assert_eq!(l.active_config(), Some(&cfg(0, 10)));
    }

    #[test]
    fn reconfigure_outside_steady_is_rejected() {
        let mut l = steady(LeaderOptions::ALL);
        let mut out = Outbox::new();
        l.reconfigure(0, cfg(1, 40), &mut out).unwrap();
        assert_eq!(l.reconfigure(0, cfg(2, 50), &mut out), Err(ReconfigureError::NotSteady));
    }

    fn choose(l: &mut Leader, round: Round, slot: Slot, out: &mut Outbox) {
        for a in [NodeId(10), NodeId(11)] {
            l.on_message(0, a, Message::Phase2B { round, slot }, out);
        }
    }

    #[test]
    fn chosen_watermark_advances_over_contiguous_slots() {
        let mut l = steady(LeaderOptions::ALL);
        let round = l.active_round().unwrap();
        let mut out = Outbox::new();
        for seq in 1..=4 {
            request(&mut l, seq, &mut out);
        }
        choose(&mut l, round, Slot(0), &mut out);
        choose(&mut l, round, Slot(1), &mut out);
        choose(&mut l, round, Slot(3), &mut out);
        assert_eq!(l.chosen_watermark(), Some(Slot(1)));
        out.clear();
        choose(&mut l, round, Slot(2), &mut out);
        assert_eq!(l.chosen_watermark(), Some(Slot(3)));
        assert_eq!(kinds(&out, MessageKind::Chosen).len(), 3);
        out.clear();
        choose(&mut l, round, Slot(2), &mut out);
        assert!(kinds(&out, MessageKind::Chosen).is_empty());
    }

    #[test]
    fn gc_after_reconfiguration_waits_for_replicas() {
        let mut l = steady(LeaderOptions::ALL);
        let old = l.active_round().unwrap();
        let mut out = Outbox::new();
        request(&mut l, 1, &mut out);
        choose(&mut l, old, Slot(0), &mut out);
        l.reconfigure(0, cfg(1, 40), &mut out).unwrap();
        deliver_match_b(&mut l, vec![(old, cfg(0, 10))], &mut out);
        let new = l.current_round();
        for a in [NodeId(10), NodeId(11)] {
            l.on_message(0, a, Message::Phase1B { round: new, votes: vec![], chosen: vec![] }, &mut out);
        }
        out.clear();
        // replica acks withheld: nothing happens
        l.on_tick(1000, &mut out);
        assert!(kinds(&out, MessageKind::ChosenHint).is_empty());
        assert!(kinds(&out, MessageKind::GarbageA).is_empty());
        for r in &REPLICAS[..2] {
            l.on_message(0, *r, Message::PrefixPersisted { slot: Some(Slot(0)) }, &mut out);
        }
        let hints = kinds(&out, MessageKind::ChosenHint);
        assert_eq!(hints.len(), 3);
        out.clear();
        for a in [NodeId(40), NodeId(41)] {
            l.on_message(0, a, Message::ChosenHintAck { round: new, range: SlotRange::new(Slot(0), Slot(0)) }, &mut out);
        }
        assert!(kinds(&out, MessageKind::GarbageA).iter().all(|(_, m)| *m == Message::GarbageA { round: new }));
        assert_eq!(kinds(&out, MessageKind::GarbageA).len(), 3);
        out.clear();
        for m in &MMS[..2] {
            l.on_message(0, *m, Message::GarbageB { round: new }, &mut out);
        }
        assert!(out.events.contains(&Event::Retire { below: new }));
        assert!(l.gc_done());
    }

    #[test]
    fn first_round_gc_is_a_watermark_bump() {
        let mut l = leader(LeaderOptions::ALL);
        let mut out = Outbox::new();
        l.on_tick(0, &mut out);
        deliver_match_b(&mut l, vec![], &mut out);
        out.clear();
        deliver_watermarks(&mut l, None, &mut out);
        let round = l.active_round().unwrap();
        assert!(kinds(&out, MessageKind::GarbageA).iter().all(|(_, m)| *m == Message::GarbageA { round }));
        assert_eq!(kinds(&out, MessageKind::GarbageA).len(), 3);
    }

    #[test]
    fn thrifty_sends_to_one_quorum_and_falls_back_on_resend() {
        let opts = LeaderOptions {
            thrifty: true,
            ..LeaderOptions::ALL
        };
        let mut l = steady(opts);
        let mut out = Outbox::new();
        request(&mut l, 1, &mut out);
        assert_eq!(kinds(&out, MessageKind::Phase2A).len(), 2);
        out.clear();
        l.on_tick(1000, &mut out);
        assert_eq!(kinds(&out, MessageKind::Phase2A).len(), 3);
    }

    #[test]
    fn duplicate_requests_are_not_reproposed() {
        let mut l = steady(LeaderOptions::ALL);
        let round = l.active_round().unwrap();
        let mut out = Outbox::new();
        request(&mut l, 1, &mut out);
        request(&mut l, 1, &mut out);
        assert_eq!(phase2a_slots(&out).len(), 1);
        choose(&mut l, round, Slot(0), &mut out);
        out.clear();
        request(&mut l, 1, &mut out);
        assert_eq!(kinds(&out, MessageKind::ReplyRequest), vec![(REPLICAS[0], Message::ReplyRequest { client: CLIENT, seq: 1 })]);
    }

    #[test]
    fn higher_nack_steps_down_and_redirects() {
        let mut l = steady(LeaderOptions::ALL);
        let mut out = Outbox::new();
        l.on_message(0, NodeId(10), Message::Nack { round: Round::new(9, NodeId(2), 0) }, &mut out);
        assert!(!l.is_leading());
        out.clear();
        request(&mut l, 1, &mut out);
        assert_eq!(kinds(&out, MessageKind::Redirect).len(), 1);
    }

    #[test]
    fn view_change_during_matchmaking_restarts_with_the_successor() {
        let mut l = leader(LeaderOptions::ALL);
        let mut out = Outbox::new();
        l.on_tick(0, &mut out);
        let first = l.current_round();
        out.clear();
        l.on_message(0, NodeId(99), Message::MatchmakerView { epoch: 1, members: vec![NodeId(23), NodeId(24), NodeId(25)] }, &mut out);
        assert_eq!(l.current_round(), first.successor().unwrap());
        let targets: BTreeSet<NodeId> = kinds(&out, MessageKind::MatchA).into_iter().map(|(to, _)| to).collect();
        assert_eq!(targets, [NodeId(23), NodeId(24), NodeId(25)].into_iter().collect());
    }
}
