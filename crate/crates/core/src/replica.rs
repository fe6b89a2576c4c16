//! Replicas learn chosen slots, execute them in order against an application
//! state machine and answer clients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::message::Message;
use crate::process::{Event, JournalRecord, Outbox, Process, Time, Timing};
use crate::round::NodeId;
use crate::value::{slot_after, Slot, Value};

/// Largest batch answered to one `FetchLog`.
pub const FETCH_BATCH: u64 = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AppKind {
    /// Replies with an empty payload.
    Noop,
    /// A string key-value store: `PUT k v` and `GET k`.
    Kv,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum App {
    Noop,
    Kv(BTreeMap<Vec<u8>, Vec<u8>>),
}

impl App {
    pub fn new(kind: AppKind) -> Self {
        match kind {
            AppKind::Noop => App::Noop,
            AppKind::Kv => App::Kv(BTreeMap::new()),
        }
    }

    pub fn apply(&mut self, payload: &[u8]) -> Vec<u8> {
        let App::Kv(map) = self else { return Vec::new() };
        let mut parts = payload.splitn(3, |b| *b == b' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(b"PUT"), Some(k), Some(v)) => {
                map.insert(k.to_vec(), v.to_vec());
                b"OK".to_vec()
            }
            (Some(b"GET"), Some(k), None) => map.get(k).cloned().unwrap_or_default(),
            _ => b"ERR".to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Replica {
    id: NodeId,
    replicas: Vec<NodeId>,
    timing: Timing,
    log: BTreeMap<Slot, Value>,
    executed: Option<Slot>,
    app: App,
    /// Last executed sequence number and its reply, per client.
    clients: BTreeMap<NodeId, (u64, Vec<u8>)>,
    leader: Option<NodeId>,
    /// Chosen watermark advertised by the leader.
    known_chosen: Option<Slot>,
    halted: bool,
    last_fetch: Time,
    fetch_cursor: u64,
}

impl Replica {
    pub fn new(id: NodeId, replicas: Vec<NodeId>, app: AppKind, timing: Timing) -> Self {
        Replica {
            id,
            replicas,
            timing,
            log: BTreeMap::new(),
            executed: None,
            app: App::new(app),
            clients: BTreeMap::new(),
            leader: None,
            known_chosen: None,
            halted: false,
            last_fetch: 0,
            fetch_cursor: 0,
        }
    }

    pub fn executed(&self) -> Option<Slot> {
        self.executed
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn app(&self) -> &App {
        &self.app
    }

    pub fn value_at(&self, slot: Slot) -> Option<&Value> {
        self.log.get(&slot)
    }

    fn index(&self) -> Option<usize> {
        self.replicas.iter().position(|r| *r == self.id)
    }

    fn designated(&self, slot: Slot) -> bool {
        self.index() == Some((slot.0 % self.replicas.len() as u64) as usize)
    }

    /// Stores a chosen value. Returns `false` and halts if it contradicts
    /// what is already stored.
    fn learn(&mut self, slot: Slot, value: Value, out: &mut Outbox) -> bool {
        match self.log.get(&slot) {
            Some(v) if *v == value => true,
            Some(v) => {
                self.halted = true;
                out.emit(Event::ConsistencyHalt {
                    reason: format!("slot {slot}: stored {v:?}, learned {value:?}"),
                });
                false
            }
            None => {
                out.record(JournalRecord::Chosen { slot, value: value.clone() });
                self.log.insert(slot, value);
                true
            }
        }
    }

    /// Executes the contiguous prefix. With `out == None` nothing is sent or
    /// emitted (journal replay).
    fn execute(&mut self, mut out: Option<&mut Outbox>) -> bool {
        let mut progressed = false;
        while let Some(value) = self.log.get(&slot_after(self.executed)).cloned() {
            let slot = slot_after(self.executed);
            self.executed = Some(slot);
            progressed = true;
            if let Value::Command(cmd) = &value {
                let fresh = self.clients.get(&cmd.client).is_none_or(|(s, _)| cmd.seq > *s);
                if fresh {
                    let reply = self.app.apply(&cmd.payload);
                    self.clients.insert(cmd.client, (cmd.seq, reply));
                }
                if self.designated(slot) {
                    if let (Some(out), Some((seq, reply))) = (out.as_deref_mut(), self.clients.get(&cmd.client)) {
                        if *seq == cmd.seq {
                            out.send(
                                cmd.client,
                                Message::ClientReply {
                                    seq: *seq,
                                    payload: reply.clone(),
                                },
                            );
                        }
                    }
                }
            }
            if let Some(out) = out.as_deref_mut() {
                out.emit(Event::Executed { slot, value });
            }
        }
        progressed
    }

    fn learn_and_execute(&mut self, slot: Slot, value: Value, out: &mut Outbox) {
        if self.halted || !self.learn(slot, value, out) {
            return;
        }
        if self.execute(Some(out)) {
            if let Some(leader) = self.leader {
                out.send(leader, Message::PrefixPersisted { slot: self.executed });
            }
        }
    }

    fn maybe_fetch(&mut self, now: Time, out: &mut Outbox) {
        if self.known_chosen <= self.executed || now < self.last_fetch + self.timing.resend {
            return;
        }
        self.last_fetch = now;
        let from = slot_after(self.executed);
        let to = self.known_chosen.expect("ahead of executed");
        let peers: Vec<NodeId> = self.replicas.iter().copied().filter(|r| *r != self.id).collect();
        if !peers.is_empty() {
            let peer = peers[(self.fetch_cursor % peers.len() as u64) as usize];
            self.fetch_cursor += 1;
            out.send(peer, Message::FetchLog { from, to });
        }
        if let Some(leader) = self.leader {
            out.send(leader, Message::FetchLog { from, to });
        }
    }

    pub fn apply_record(&mut self, record: &JournalRecord) {
        if let JournalRecord::Chosen { slot, value } = record {
            self.log.entry(*slot).or_insert_with(|| value.clone());
            self.execute(None);
        }
    }
}

impl Process for Replica {
    fn on_message(&mut self, now: Time, from: NodeId, msg: Message, out: &mut Outbox) {
        match msg {
            Message::Chosen { slot, value } => {
                self.leader = Some(from);
                self.learn_and_execute(slot, value, out);
            }
            Message::LogEntries { entries } => {
                for (slot, value) in entries {
                    self.learn_and_execute(slot, value, out);
                }
            }
            Message::Heartbeat { chosen_watermark, .. } => {
                self.leader = Some(from);
                self.known_chosen = self.known_chosen.max(chosen_watermark);
                self.maybe_fetch(now, out);
            }
            Message::FetchLog { from: first, to } => {
                let last = Slot(to.0.min(first.0.saturating_add(FETCH_BATCH - 1)));
                let entries: Vec<(Slot, Value)> =
                    self.log.range(first..=last).map(|(s, v)| (*s, v.clone())).collect();
                if !entries.is_empty() {
                    out.send(from, Message::LogEntries { entries });
                }
            }
            Message::WatermarkQuery => out.send(from, Message::WatermarkReply { executed: self.executed }),
            Message::ReplyRequest { client, seq } => {
                if let Some((s, reply)) = self.clients.get(&client) {
                    if *s == seq {
                        out.send(
                            client,
                            Message::ClientReply {
                                seq,
                                payload: reply.clone(),
                            },
                        );
                    }
                }
            }
            _ => {}
        }
    }

    fn on_tick(&mut self, now: Time, out: &mut Outbox) {
        self.maybe_fetch(now, out);
    }
}
