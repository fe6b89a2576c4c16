//! The per-node host used by the TCP runtime: frame decoding, at-most-once
//! delivery, journaling before sending, and frame encoding.

use anyhow::{Context, Result};
use mmpaxos_core::dedup::{DedupFilter, SeqGen};
use mmpaxos_core::{wire, Envelope, Event, JournalRecord, Message, Node, NodeId, NodeSpec, Outbox, Process, Time};

use std::collections::BTreeMap;
use std::path::Path;

use super::journal::{Journal, SyncPolicy};
use crate::sim::Input;

/// Out-of-order sequence numbers remembered per sender.
pub const DEDUP_WINDOW: usize = 4096;

#[derive(Debug, Default)]
pub struct HostOutput {
    pub frames: Vec<(NodeId, Vec<u8>)>,
    pub events: Vec<Event>,
    /// A message suggested that this node's cluster view may be stale.
    pub refresh_view: bool,
}

pub struct NodeHost {
    id: NodeId,
    node: Node,
    dedup: DedupFilter,
    seq: SeqGen,
    journal: Option<Journal>,
}

impl NodeHost {
    /// Builds the node from `spec`, replaying `recovered` if non-empty.
    pub fn new(spec: &NodeSpec, incarnation: u32, journal: Option<Journal>, recovered: &[JournalRecord]) -> Self {
        let node = if recovered.is_empty() {
            spec.build()
        } else {
            spec.recover(recovered)
        };
        NodeHost {
            id: spec.id(),
            node,
            dedup: DedupFilter::new(DEDUP_WINDOW),
            seq: SeqGen::new(incarnation),
            journal,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn node(&self) -> &Node {
        &self.node
    }

    pub fn deliver_frame(&mut self, now: Time, frame: &[u8]) -> Result<HostOutput> {
        let (env, _) = wire::decode(frame).map_err(|e| anyhow::anyhow!("{e}"))?;
        self.deliver(now, env)
    }

    /// Hands `env` to the state machine unless `(from, seq)` was seen before.
    pub fn deliver(&mut self, now: Time, env: Envelope) -> Result<HostOutput> {
        if !self.dedup.accept(env.from, env.seq) {
            return Ok(HostOutput::default());
        }
        let refresh = matches!(env.msg, Message::Nack { .. } | Message::Redirect { .. });
        let mut out = Outbox::new();
        self.node.on_message(now, env.from, env.msg, &mut out);
        let mut result = self.finish(out)?;
        result.refresh_view = refresh;
        Ok(result)
    }

    pub fn tick(&mut self, now: Time) -> Result<HostOutput> {
        let mut out = Outbox::new();
        self.node.on_tick(now, &mut out);
        self.finish(out)
    }

    pub fn sync(&mut self) -> Result<()> {
        if let Some(j) = self.journal.as_mut() {
            j.sync().context("syncing journal")?;
        }
        Ok(())
    }

    fn finish(&mut self, out: Outbox) -> Result<HostOutput> {
        if let Some(j) = self.journal.as_mut() {
            j.append(&out.records).context("appending to journal")?;
        }
        let frames = out
            .sends
            .into_iter()
            .map(|(to, msg)| {
                let env = Envelope {
                    from: self.id,
                    seq: self.seq.next(),
                    msg,
                };
                (to, wire::encode(&env))
            })
            .collect();
        Ok(HostOutput {
            frames,
            events: out.events,
            refresh_view: false,
        })
    }
}

/// Runs a recorded simulator input list through fresh hosts, every message
/// going through the wire codec, and returns each node's final state hash.
/// With `journal_dir` every host also journals there.
pub fn replay(specs: &[NodeSpec], inputs: &[Input], journal_dir: Option<&Path>) -> Result<BTreeMap<NodeId, u64>> {
    let mut hosts = BTreeMap::new();
    for spec in specs {
        let journal = match journal_dir {
            Some(dir) => Some(Journal::open(&dir.join(format!("node-{}.journal", spec.id().0)), SyncPolicy::Never)?.0),
            None => None,
        };
        hosts.insert(spec.id(), NodeHost::new(spec, 0, journal, &[]));
    }
    for input in inputs {
        match input {
            Input::Message { time, to, envelope } => {
                if let Some(h) = hosts.get_mut(to) {
                    h.deliver_frame(*time, &wire::encode(envelope))?;
                }
            }
            Input::Tick { time, node } => {
                if let Some(h) = hosts.get_mut(node) {
                    h.tick(*time)?;
                }
            }
        }
    }
    Ok(hosts.into_iter().map(|(id, h)| (id, h.node.state_hash())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::journal::SyncPolicy;
    use mmpaxos_core::{AcceptorMutation, Round, Slot};

    fn acceptor() -> NodeSpec {
        NodeSpec::Acceptor {
            id: NodeId(10),
            mutation: AcceptorMutation::None,
        }
    }

    fn p1a(seq: u64) -> Envelope {
        Envelope {
            from: NodeId(1),
            seq,
            msg: Message::Phase1A {
                round: Round::new(3, NodeId(1), 0),
                first_slot: Slot(0),
            },
        }
    }

    #[test]
    fn duplicates_reach_the_state_machine_once() {
        let mut h = NodeHost::new(&acceptor(), 0, None, &[]);
        let frame = wire::encode(&p1a(7));
        assert_eq!(h.deliver_frame(0, &frame).unwrap().frames.len(), 1);
        assert!(h.deliver_frame(1, &frame).unwrap().frames.is_empty());
        assert_eq!(h.deliver(2, p1a(8)).unwrap().frames.len(), 1);
    }

    #[test]
    fn promises_survive_a_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.journal");
        {
            let (j, old) = Journal::open(&path, SyncPolicy::EveryWrite).unwrap();
            let mut h = NodeHost::new(&acceptor(), 1, Some(j), &old);
            h.deliver(0, p1a(1)).unwrap();
        }
        let (j, old) = Journal::open(&path, SyncPolicy::EveryWrite).unwrap();
        let h = NodeHost::new(&acceptor(), 2, Some(j), &old);
        assert_eq!(h.node().as_acceptor().unwrap().promised(), Round::new(3, NodeId(1), 0));
    }

    #[test]
    fn outgoing_frames_decode() {
        let mut h = NodeHost::new(&acceptor(), 5, None, &[]);
        let out = h.deliver(0, p1a(1)).unwrap();
        let (env, _) = wire::decode(&out.frames[0].1).unwrap();
        assert_eq!(env.from, NodeId(10));
        assert_eq!(env.seq >> 32, 5);
        assert!(matches!(env.msg, Message::Phase1B { .. }));
    }
}
