//! Clients: closed loops or timed scripts of commands, with leader discovery
//! through redirects and retransmission on timeout.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::message::Message;
use crate::process::{Event, Outbox, Process, Time, Timing};
use crate::round::NodeId;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Workload {
    /// Issue the next command as soon as the previous one is answered,
    /// starting at `start` and stopping at `stop`.
    ClosedLoop { start: Time, stop: Time },
    /// Issue each payload at its time (or later, once the previous one is
    /// answered).
    Script(Vec<(Time, Vec<u8>)>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
struct Outstanding {
    seq: u64,
    payload: Vec<u8>,
    issued: Time,
    sent: Time,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Client {
    id: NodeId,
    proposers: Vec<NodeId>,
    timing: Timing,
    workload: Workload,
    next_script: usize,
    seq: u64,
    leader: Option<NodeId>,
    outstanding: Option<Outstanding>,
    completed: u64,
}

impl Client {
    pub fn new(id: NodeId, proposers: Vec<NodeId>, timing: Timing, workload: Workload) -> Self {
        Client {
            leader: proposers.first().copied(),
            id,
            proposers,
            timing,
            workload,
            next_script: 0,
            seq: 0,
            outstanding: None,
            completed: 0,
        }
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    pub fn is_waiting(&self) -> bool {
        self.outstanding.is_some()
    }

    fn next_payload(&mut self, now: Time) -> Option<Vec<u8>> {
        match &self.workload {
            Workload::ClosedLoop { start, stop } => {
                (now >= *start && now < *stop).then(|| format!("PUT c{} {}", self.id.0, self.seq + 1).into_bytes())
            }
            Workload::Script(items) => match items.get(self.next_script) {
                Some((at, payload)) if *at <= now => {
                    self.next_script += 1;
                    Some(payload.clone())
                }
                _ => None,
            },
        }
    }

    fn maybe_issue(&mut self, now: Time, out: &mut Outbox) {
        if self.outstanding.is_some() {
            return;
        }
        let Some(payload) = self.next_payload(now) else { return };
        self.seq += 1;
        let o = Outstanding {
            seq: self.seq,
            payload,
            issued: now,
            sent: now,
        };
        self.send(&o, out);
        self.outstanding = Some(o);
    }

    fn send(&self, o: &Outstanding, out: &mut Outbox) {
        let msg = Message::ClientRequest {
            seq: o.seq,
            payload: o.payload.clone(),
        };
        match self.leader {
            Some(l) => out.send(l, msg),
            None => out.broadcast(&self.proposers, msg),
        }
    }
}

impl Process for Client {
    fn on_message(&mut self, now: Time, _from: NodeId, msg: Message, out: &mut Outbox) {
        match msg {
            Message::ClientReply { seq, .. } => {
                if self.outstanding.as_ref().is_some_and(|o| o.seq == seq) {
                    let o = self.outstanding.take().expect("checked");
                    self.completed += 1;
                    out.emit(Event::Reply {
                        seq,
                        latency: now - o.issued,
                    });
                    self.maybe_issue(now, out);
                }
            }
            Message::Redirect { leader }
                if leader.is_some() && leader != self.leader => {
                    self.leader = leader;
                    if let Some(o) = self.outstanding.as_mut() {
                        o.sent = now;
                    }
                    if let Some(o) = &self.outstanding {
                        self.send(o, out);
                    }
                }
            _ => {}
        }
    }

    fn on_tick(&mut self, now: Time, out: &mut Outbox) {
        if let Some(o) = self.outstanding.as_mut() {
            if now >= o.sent + self.timing.client_timeout {
                o.sent = now;
                // the leader may have changed without telling us
                self.leader = None;
                let o = o.clone();
                self.send(&o, out);
            }
            return;
        }
        self.maybe_issue(now, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const P: [NodeId; 2] = [NodeId(1), NodeId(2)];

    fn closed() -> Client {
        Client::new(NodeId(100), P.to_vec(), Timing::SIM, Workload::ClosedLoop { start: 5, stop: 1000 })
    }

    #[test]
    fn closed_loop_issues_the_next_command_on_reply() {
        let mut c = closed();
        let mut out = Outbox::new();
        c.on_tick(0, &mut out);
        assert!(out.sends.is_empty());
        c.on_tick(5, &mut out);
        assert_eq!(out.sends.len(), 1);
        out.clear();
        c.on_message(9, NodeId(30), Message::ClientReply { seq: 1, payload: vec![] }, &mut out);
        assert_eq!(out.events, vec![Event::Reply { seq: 1, latency: 4 }]);
        assert!(matches!(out.sends[0].1, Message::ClientRequest { seq: 2, .. }));
    }

    #[test]
    fn stale_replies_are_ignored() {
        let mut c = closed();
        let mut out = Outbox::new();
        c.on_tick(5, &mut out);
        out.clear();
        c.on_message(6, NodeId(30), Message::ClientReply { seq: 0, payload: vec![] }, &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn timeout_broadcasts_and_redirect_narrows() {
        let mut c = closed();
        let mut out = Outbox::new();
        c.on_tick(5, &mut out);
        out.clear();
        c.on_tick(5 + Timing::SIM.client_timeout, &mut out);
        assert_eq!(out.sends.iter().map(|(to, _)| *to).collect::<Vec<_>>(), P.to_vec());
        out.clear();
        c.on_message(70, P[0], Message::Redirect { leader: Some(P[1]) }, &mut out);
        assert_eq!(out.sends.iter().map(|(to, _)| *to).collect::<Vec<_>>(), vec![P[1]]);
    }

    #[test]
    fn script_respects_times() {
        let mut c = Client::new(
            NodeId(100),
            P.to_vec(),
            Timing::SIM,
            Workload::Script(vec![(10, b"a".to_vec()), (12, b"b".to_vec())]),
        );
        let mut out = Outbox::new();
        c.on_tick(9, &mut out);
        assert!(out.sends.is_empty());
        c.on_tick(10, &mut out);
        c.on_tick(12, &mut out);
        assert_eq!(out.sends.len(), 1);
        c.on_message(13, NodeId(30), Message::ClientReply { seq: 1, payload: vec![] }, &mut out);
        assert_eq!(out.sends.len(), 2);
    }
}
