//! Replacing the whole matchmaker set: stop the old set, merge what a quorum
//! of it knows, agree on the new set with single-decree Paxos among the old
//! matchmakers, then bootstrap and activate the new set.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use serde::Serialize;

use crate::config::{ConfigId, Configuration};
use crate::message::{LogEntry, Message};
use crate::process::{Event, Outbox, Process, Time, Timing};
use crate::proposer::Proposer;
use crate::round::{NodeId, Round};
use crate::value::{Instance, Value};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MergeResult {
    pub log: BTreeMap<Round, Configuration>,
    pub gc_watermark: Round,
}

impl MergeResult {
    pub fn entries(&self) -> Vec<LogEntry> {
        self.log.iter().map(|(r, c)| (*r, c.clone())).collect()
    }
}

/// Two stopped matchmakers disagree on the configuration of one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeConflict {
    pub round: Round,
}

/// Takes the largest watermark and the union of the logs above it.
pub fn merge_stop_replies<'a>(
    replies: impl IntoIterator<Item = (&'a [LogEntry], Round)>,
) -> Result<MergeResult, MergeConflict> {
    let mut log: BTreeMap<Round, Configuration> = BTreeMap::new();
    let mut gc_watermark = Round::BOTTOM;
    for (entries, w) in replies {
        gc_watermark = gc_watermark.max(w);
        for (round, config) in entries {
            match log.get(round) {
                Some(c) if c != config => return Err(MergeConflict { round: *round }),
                Some(_) => {}
                None => {
                    log.insert(*round, config.clone());
                }
            }
        }
    }
    let log = log.split_off(&gc_watermark);
    Ok(MergeResult { log, gc_watermark })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
enum Stage {
    Stopping(BTreeMap<NodeId, (Vec<LogEntry>, Round)>),
    Choosing,
    Activating {
        epoch: u64,
        members: Vec<NodeId>,
        boot_acks: BTreeSet<NodeId>,
        activate_acks: BTreeSet<NodeId>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
struct Operation {
    old: Vec<NodeId>,
    target: Vec<NodeId>,
    merged: Option<MergeResult>,
    paxos: Option<Proposer>,
    stage: Stage,
}

/// Drives matchmaker reconfiguration and publishes the current matchmaker
/// set to proposers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MmReconfigDriver {
    id: NodeId,
    proposers: Vec<NodeId>,
    timing: Timing,
    epoch: u64,
    members: Vec<NodeId>,
    op: Option<Operation>,
    /// Old matchmakers that may be shut down.
    retired: Vec<NodeId>,
    last_send: Time,
    last_view: Time,
}

fn majority(n: usize) -> usize {
    n / 2 + 1
}

impl MmReconfigDriver {
    pub fn new(id: NodeId, proposers: Vec<NodeId>, members: Vec<NodeId>, timing: Timing) -> Self {
        MmReconfigDriver {
            id,
            proposers,
            timing,
            epoch: 0,
            members,
            op: None,
            retired: Vec::new(),
            last_send: 0,
            last_view: 0,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn retired(&self) -> &[NodeId] {
        &self.retired
    }

    pub fn in_progress(&self) -> bool {
        self.op.is_some()
    }

    /// Starts replacing the current set with `target`. Returns `false` if an
    /// operation is already running.
    pub fn start(&mut self, now: Time, target: Vec<NodeId>, out: &mut Outbox) -> bool {
        if self.op.is_some() {
            return false;
        }
        let mut sorted = target.clone();
        sorted.sort();
        let mut current = self.members.clone();
        current.sort();
        if sorted == current {
            return true;
        }
        self.last_send = now;
        out.broadcast(&self.members, Message::StopA);
        self.op = Some(Operation {
            old: self.members.clone(),
            target,
            merged: None,
            paxos: None,
            stage: Stage::Stopping(BTreeMap::new()),
        });
        true
    }

    fn on_stop_b(&mut self, now: Time, from: NodeId, log: Vec<LogEntry>, w: Round, out: &mut Outbox) {
        let Some(op) = self.op.as_mut() else { return };
        let Stage::Stopping(replies) = &mut op.stage else { return };
        if !op.old.contains(&from) {
            return;
        }
        replies.insert(from, (log, w));
        if replies.len() < majority(op.old.len()) {
            return;
        }
        match merge_stop_replies(replies.values().map(|(l, w)| (l.as_slice(), *w))) {
            Ok(merged) => op.merged = Some(merged),
            Err(MergeConflict { round }) => {
                out.emit(Event::ConsistencyHalt {
                    reason: format!("stopped matchmakers disagree on round {round}"),
                });
                self.op = None;
                return;
            }
        }
        let config = Configuration::majority(ConfigId(u64::MAX - self.epoch), op.old.iter().copied());
        let mut paxos = Proposer::fixed(self.id, Instance::MatchmakerEpoch(self.epoch), config.clone())
            .with_resend(self.timing.resend);
        let _ = paxos.begin_round(now, Some(Value::Matchmakers(op.target.clone())), config, out);
        op.paxos = Some(paxos);
        op.stage = Stage::Choosing;
        self.check_chosen(now, out);
    }

    fn check_chosen(&mut self, now: Time, out: &mut Outbox) {
        let Some(op) = self.op.as_mut() else { return };
        if op.stage != Stage::Choosing {
            return;
        }
        let Some(Value::Matchmakers(members)) = op.paxos.as_ref().and_then(|p| p.chosen()).cloned() else {
            return;
        };
        out.emit(Event::Learned {
            instance: Instance::MatchmakerEpoch(self.epoch),
            value: Value::Matchmakers(members.clone()),
        });
        op.stage = Stage::Activating {
            epoch: self.epoch + 1,
            members,
            boot_acks: BTreeSet::new(),
            activate_acks: BTreeSet::new(),
        };
        self.last_send = now;
        self.send_activation(out);
    }

    fn send_activation(&self, out: &mut Outbox) {
        let Some(Operation {
            merged: Some(merged),
            stage:
                Stage::Activating {
                    epoch,
                    members,
                    boot_acks,
                    activate_acks,
                },
            ..
        }) = &self.op
        else {
            return;
        };
        for m in members {
            if !boot_acks.contains(m) {
                out.send(
                    *m,
                    Message::Bootstrap {
                        log: merged.entries(),
                        gc_watermark: merged.gc_watermark,
                    },
                );
            } else if !activate_acks.contains(m) {
                out.send(*m, Message::Activate { epoch: *epoch });
            }
        }
    }

    fn on_bootstrap_ack(&mut self, from: NodeId, out: &mut Outbox) {
        let Some(Operation {
            stage: Stage::Activating {
                epoch, members, boot_acks, ..
            },
            ..
        }) = self.op.as_mut()
        else {
            return;
        };
        if members.contains(&from) && boot_acks.insert(from) {
            out.send(from, Message::Activate { epoch: *epoch });
        }
    }

    fn on_activate_ack(&mut self, now: Time, from: NodeId, epoch: u64, out: &mut Outbox) {
        let Some(Operation {
            old,
            stage:
                Stage::Activating {
                    epoch: target,
                    members,
                    activate_acks,
                    ..
                },
            ..
        }) = self.op.as_mut()
        else {
            return;
        };
        if epoch != *target || !members.contains(&from) {
            return;
        }
        activate_acks.insert(from);
        let newly_active = activate_acks.len() == majority(members.len());
        let all = activate_acks.len() == members.len();
        let (members, old) = (members.clone(), old.clone());
        if newly_active {
            self.epoch = epoch;
            self.members = members.clone();
            out.emit(Event::MatchmakersActivated {
                epoch,
                members: members.clone(),
            });
            self.publish(now, out);
        }
        if all {
            self.retired = old;
            self.op = None;
        }
    }

    fn publish(&mut self, now: Time, out: &mut Outbox) {
        self.last_view = now;
        out.broadcast(
            &self.proposers,
            Message::MatchmakerView {
                epoch: self.epoch,
                members: self.members.clone(),
            },
        );
    }
}

impl Process for MmReconfigDriver {
    fn on_message(&mut self, now: Time, from: NodeId, msg: Message, out: &mut Outbox) {
        match msg {
            Message::ReconfigureMatchmakers { members } => {
                self.start(now, members, out);
            }
            Message::StopB { log, gc_watermark } => self.on_stop_b(now, from, log, gc_watermark, out),
            Message::BootstrapAck => self.on_bootstrap_ack(from, out),
            Message::ActivateAck { epoch } => self.on_activate_ack(now, from, epoch, out),
            m @ (Message::Phase1B { .. } | Message::Phase2B { .. } | Message::Nack { .. }) => {
                if let Some(p) = self.op.as_mut().and_then(|op| op.paxos.as_mut()) {
                    p.on_message(now, from, m, out);
                }
                self.check_chosen(now, out);
            }
            _ => {}
        }
    }

    fn on_tick(&mut self, now: Time, out: &mut Outbox) {
        if now >= self.last_view + self.timing.heartbeat * 5 {
            self.publish(now, out);
        }
        if let Some(p) = self.op.as_mut().and_then(|op| op.paxos.as_mut()) {
            p.on_tick(now, out);
        }
        if now < self.last_send + self.timing.resend {
            return;
        }
        self.last_send = now;
        let Some(op) = &self.op else { return };
        match &op.stage {
            Stage::Stopping(replies) => {
                for m in op.old.iter().filter(|m| !replies.contains_key(m)) {
                    out.send(*m, Message::StopA);
                }
            }
            Stage::Choosing => {}
            Stage::Activating { .. } => self.send_activation(out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matchmaker::{MatchmakerNode, MatchmakerState};
    use alloc::collections::VecDeque;
    use alloc::vec;

    fn c(i: u64) -> Configuration {
        Configuration::majority(ConfigId(i), [NodeId(10 + i as u32), NodeId(20 + i as u32), NodeId(30 + i as u32)])
    }

    fn r(i: i64) -> Round {
        Round::new(i as u64, NodeId(1), 0)
    }

    #[test]
    fn merges_three_logs() {
        let l0 = vec![(r(0), c(0)), (r(1), c(1)), (r(4), c(4))];
        let l1 = vec![(r(2), c(2))];
        let l2 = vec![(r(1), c(1)), (r(2), c(2))];
        let merged = merge_stop_replies([(l0.as_slice(), r(0)), (l1.as_slice(), r(2)), (l2.as_slice(), r(1))]).unwrap();
        assert_eq!(merged.gc_watermark, r(2));
        assert_eq!(merged.entries(), vec![(r(2), c(2)), (r(4), c(4))]);
    }

    #[test]
    fn empty_and_identical_logs() {
        let empty: Vec<LogEntry> = vec![];
        let m = merge_stop_replies([(empty.as_slice(), r(0)), (empty.as_slice(), r(0))]).unwrap();
        assert!(m.log.is_empty());
        assert_eq!(m.gc_watermark, r(0));
        let l = vec![(r(1), c(1)), (r(3), c(3))];
        let m = merge_stop_replies([(l.as_slice(), Round::BOTTOM), (l.as_slice(), Round::BOTTOM)]).unwrap();
        assert_eq!(m.entries(), l);
    }

    #[test]
    fn conflicting_configs_are_reported() {
        let a = vec![(r(1), c(1))];
        let b = vec![(r(1), c(2))];
        assert_eq!(
            merge_stop_replies([(a.as_slice(), Round::BOTTOM), (b.as_slice(), Round::BOTTOM)]),
            Err(MergeConflict { round: r(1) })
        );
    }

    const DRIVER: NodeId = NodeId(90);
    const PROPOSER: NodeId = NodeId(1);

    /// Delivers every message in FIFO order between the driver and the
    /// matchmakers, dropping messages to `down`.
    fn run(
        driver: &mut MmReconfigDriver,
        mms: &mut BTreeMap<NodeId, MatchmakerNode>,
        down: &[NodeId],
        mut queue: VecDeque<(NodeId, NodeId, Message)>,
        events: &mut Vec<Event>,
    ) {
        let mut steps = 0;
        while let Some((from, to, msg)) = queue.pop_front() {
            steps += 1;
            assert!(steps < 10_000);
            let mut out = Outbox::new();
            if to == DRIVER {
                driver.on_message(0, from, msg, &mut out);
            } else if let Some(m) = mms.get_mut(&to) {
                if down.contains(&to) {
                    continue;
                }
                m.on_message(0, from, msg, &mut out);
            } else {
                continue;
            }
            events.extend(out.events);
            queue.extend(out.sends.into_iter().map(|(t, m)| (to, t, m)));
        }
    }

    fn setup() -> (MmReconfigDriver, BTreeMap<NodeId, MatchmakerNode>) {
        let old = [NodeId(20), NodeId(21), NodeId(22)];
        let new = [NodeId(23), NodeId(24), NodeId(25)];
        let mut mms = BTreeMap::new();
        for (i, m) in old.iter().enumerate() {
            let mut state = MatchmakerState::new();
            state.handle_match_a(r(i as i64), c(i as u64));
            mms.insert(*m, MatchmakerNode::new(state, 0));
        }
        for m in new {
            mms.insert(m, MatchmakerNode::new(MatchmakerState::spare(), 0));
        }
        (MmReconfigDriver::new(DRIVER, vec![PROPOSER], old.to_vec(), Timing::SIM), mms)
    }

    fn kickoff(driver: &mut MmReconfigDriver, target: Vec<NodeId>) -> VecDeque<(NodeId, NodeId, Message)> {
        let mut out = Outbox::new();
        assert!(driver.start(0, target, &mut out));
        out.sends.into_iter().map(|(t, m)| (DRIVER, t, m)).collect()
    }

    #[test]
    fn replaces_the_set_with_one_old_matchmaker_down() {
        let (mut driver, mut mms) = setup();
        let new = vec![NodeId(23), NodeId(24), NodeId(25)];
        let q = kickoff(&mut driver, new.clone());
        let mut events = Vec::new();
        run(&mut driver, &mut mms, &[NodeId(22)], q, &mut events);
        assert_eq!(driver.epoch(), 1);
        assert_eq!(driver.members(), new.as_slice());
        assert!(events.contains(&Event::MatchmakersActivated { epoch: 1, members: new.clone() }));
        for m in &new {
            let node = &mms[m];
            assert!(node.state().is_active());
            assert_eq!(node.epoch(), 1);
            // logs of the two live old matchmakers
            assert_eq!(node.state().log().keys().copied().collect::<Vec<_>>(), vec![r(0), r(1)]);
        }
        assert!(mms[&NodeId(20)].state().is_stopped());
        assert_eq!(driver.retired(), &[NodeId(20), NodeId(21), NodeId(22)]);
    }

    #[test]
    fn identity_reconfiguration_is_a_no_op() {
        let (mut driver, _) = setup();
        let mut out = Outbox::new();
        assert!(driver.start(0, vec![NodeId(22), NodeId(21), NodeId(20)], &mut out));
        assert!(out.is_empty());
        assert!(!driver.in_progress());
    }

    #[test]
    fn competing_drivers_activate_one_set() {
        let (mut a, mut mms) = setup();
        let mut b = MmReconfigDriver::new(NodeId(91), vec![PROPOSER], a.members().to_vec(), Timing::SIM);
        for m in [NodeId(26), NodeId(27), NodeId(28)] {
            mms.insert(m, MatchmakerNode::new(MatchmakerState::spare(), 0));
        }
        let set_a = vec![NodeId(23), NodeId(24), NodeId(25)];
        let set_b = vec![NodeId(26), NodeId(27), NodeId(28)];
        let mut qa = kickoff(&mut a, set_a.clone());
        let mut out = Outbox::new();
        b.start(0, set_b.clone(), &mut out);
        let mut qb: VecDeque<_> = out.sends.into_iter().map(|(t, m)| (NodeId(91), t, m)).collect();
        // interleave both drivers' traffic step by step
        let mut events = Vec::new();
        let mut steps = 0;
        while !qa.is_empty() || !qb.is_empty() {
            steps += 1;
            assert!(steps < 10_000);
            for q in [&mut qa, &mut qb] {
                let Some((from, to, msg)) = q.pop_front() else { continue };
                let mut out = Outbox::new();
                if to == DRIVER {
                    a.on_message(0, from, msg, &mut out);
                } else if to == NodeId(91) {
                    b.on_message(0, from, msg, &mut out);
                } else if let Some(m) = mms.get_mut(&to) {
                    m.on_message(0, from, msg, &mut out);
                }
                events.extend(out.events);
                q.extend(out.sends.into_iter().map(|(t, m)| (to, t, m)));
            }
            if qa.is_empty() && qb.is_empty() {
                let mut out = Outbox::new();
                a.on_tick(1_000_000 + steps * 100, &mut out);
                qa.extend(out.sends.into_iter().map(|(t, m)| (DRIVER, t, m)));
                let mut out = Outbox::new();
                b.on_tick(1_000_000 + steps * 100, &mut out);
                qb.extend(out.sends.into_iter().map(|(t, m)| (NodeId(91), t, m)));
            }
            if a.members() == b.members() && !a.in_progress() && !b.in_progress() {
                break;
            }
        }
        let activated: BTreeSet<Vec<NodeId>> = events
            .iter()
            .filter_map(|e| match e {
                Event::MatchmakersActivated { members, .. } => Some(members.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(activated.len(), 1, "{activated:?}");
        let winner = activated.into_iter().next().unwrap();
        assert!(winner == set_a || winner == set_b);
        let loser = if winner == set_a { &set_b } else { &set_a };
        assert!(loser.iter().all(|m| !mms[m].state().is_active()));
    }
}
