//! Heartbeat-based leader election.
//!
//! The leader heartbeats every `heartbeat` units. A follower that hears
//! nothing for `election_timeout` units (plus one heartbeat per rank, so the
//! highest id goes first) starts a candidacy in the lowest round it owns above
//! every round it has seen.

use alloc::vec::Vec;

use serde::Serialize;

use crate::process::{Time, Timing};
use crate::round::{NodeId, Round};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct ElectionState {
    id: NodeId,
    /// Proposers, sorted.
    peers: Vec<NodeId>,
    timing: Timing,
    leader: Option<NodeId>,
    leader_round: Round,
    last_heard: Option<Time>,
    last_heartbeat: Time,
    /// Start a candidacy on the first tick.
    initial: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tick {
    Idle,
    SendHeartbeat,
    Candidate(Round),
}

impl ElectionState {
    pub fn new(id: NodeId, mut peers: Vec<NodeId>, timing: Timing, initial: bool) -> Self {
        peers.sort();
        ElectionState {
            id,
            peers,
            timing,
            leader: None,
            leader_round: Round::BOTTOM,
            last_heard: None,
            last_heartbeat: 0,
            initial,
        }
    }

    pub fn leader(&self) -> Option<NodeId> {
        self.leader
    }

    pub fn leader_round(&self) -> Round {
        self.leader_round
    }

    pub fn peers(&self) -> &[NodeId] {
        &self.peers
    }

    pub fn others(&self) -> impl Iterator<Item = &NodeId> {
        let id = self.id;
        self.peers.iter().filter(move |p| **p != id)
    }

    /// Position counted from the highest id, which has rank 0.
    fn rank(&self) -> u64 {
        self.peers.iter().filter(|p| **p > self.id).count() as u64
    }

    pub fn deadline(&self) -> Option<Time> {
        let timeout = self.timing.election_timeout?;
        Some(self.last_heard? + timeout + self.rank() * self.timing.heartbeat)
    }

    /// Records evidence that `from` leads in `round`. Returns `true` if this
    /// changes who is believed to lead.
    pub fn observe(&mut self, now: Time, from: NodeId, round: Round) -> bool {
        if round < self.leader_round || !round.is_owned_by(from) {
            return false;
        }
        let changed = self.leader != Some(from);
        self.leader = Some(from);
        self.leader_round = round;
        self.last_heard = Some(now);
        changed
    }

    /// Called when this node wins or starts a candidacy itself.
    pub fn claim(&mut self, now: Time, round: Round) {
        self.leader = Some(self.id);
        self.leader_round = self.leader_round.max(round);
        self.last_heard = Some(now);
        self.last_heartbeat = now;
    }

    /// Called when this node stops leading.
    pub fn resign(&mut self, now: Time) {
        if self.leader == Some(self.id) {
            self.leader = None;
        }
        self.last_heard = Some(now);
    }

    pub fn tick(&mut self, now: Time, leading: bool, highest_seen: Round) -> Tick {
        if self.last_heard.is_none() {
            self.last_heard = Some(now);
        }
        if leading {
            if now >= self.last_heartbeat + self.timing.heartbeat {
                self.last_heartbeat = now;
                return Tick::SendHeartbeat;
            }
            return Tick::Idle;
        }
        if core::mem::take(&mut self.initial) {
            return Tick::Candidate(Round::first_above(highest_seen, self.id));
        }
        match self.deadline() {
            Some(deadline) if now >= deadline => {
                self.last_heard = Some(now);
                Tick::Candidate(Round::first_above(highest_seen.max(self.leader_round), self.id))
            }
            _ => Tick::Idle,
        }
    }
}
