//! Deterministic discrete-event simulation of a whole cluster.
//!
//! Every node is driven through the same [`Process`] interface as in the TCP
//! runtime. Events at the same virtual time run in a fixed order: message
//! deliveries, then scheduled actions, then one clock tick for every live
//! node. Within a class, events run in the order they were scheduled.

pub mod corpus;
pub mod explore;
pub mod oracle;
pub mod schedule;
pub mod topology;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::{self, Write};

use mmpaxos_core::dedup::{DedupFilter, SeqGen};
use mmpaxos_core::{
    Envelope, Event, JournalRecord, Message, MessageKind, Node, NodeId, NodeSpec, Outbox, Process, Time,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use self::oracle::{Oracle, Violation};
use self::schedule::{Action, Schedule};
use self::topology::{Topology, OPERATOR};

const CLASS_MESSAGE: u8 = 0;
const CLASS_ACTION: u8 = 1;
const CLASS_TICK: u8 = 2;

/// Remembered out-of-order sequence numbers per sender when deduplicating.
const DEDUP_WINDOW: usize = 4096;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: Time,
    pub node: NodeId,
    pub event: Event,
}

/// Something that reached a live node's host, in order. Messages are
/// recorded before duplicate filtering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Input {
    Message { time: Time, to: NodeId, envelope: Envelope },
    Tick { time: Time, node: NodeId },
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub final_hashes: BTreeMap<NodeId, u64>,
}

impl Trace {
    /// FNV over the debug rendering of every record and final hash.
    pub fn digest(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for r in &self.records {
            h.write(format!("{} {} {:?}\n", r.time, r.node.0, r.event).as_bytes());
        }
        for (n, s) in &self.final_hashes {
            h.write_u32(n.0);
            h.write_u64(*s);
        }
        h.finish()
    }

    /// One line per record: time, node, event kind and a digest of the
    /// event's payload.
    pub fn dump(&self, mut w: impl Write) -> io::Result<()> {
        use std::hash::Hasher;
        for r in &self.records {
            let text = format!("{:?}", r.event);
            let kind = text.split([' ', '{', '(']).next().unwrap_or("");
            let mut h = fnv::FnvHasher::default();
            h.write(text.as_bytes());
            writeln!(w, "{}\t{}\t{}\t{:016x}", r.time, r.node.0, kind, h.finish())?;
        }
        for (n, s) in &self.final_hashes {
            writeln!(w, "final\t{}\t{:016x}", n.0, s)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub delivered: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub ticks: u64,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub trace: Trace,
    pub violations: Vec<Violation>,
    pub stats: Stats,
}

/// Which events go into the kept trace. The oracle always sees everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    None,
    All,
    /// Everything except votes and executions, which dominate long runs.
    Summary,
}

enum Item {
    Deliver { to: NodeId, envelope: Envelope },
    Action(usize),
    Tick,
}

struct Host {
    spec: NodeSpec,
    node: Option<Node>,
    journal: Vec<JournalRecord>,
    seq: SeqGen,
    incarnation: u32,
    dedup: DedupFilter,
}

pub struct Simulator {
    now: Time,
    hosts: BTreeMap<NodeId, Host>,
    queue: BinaryHeap<Reverse<(Time, u8, u64)>>,
    items: HashMap<u64, Item>,
    next_seq: u64,
    rng: ChaCha8Rng,
    schedule: Schedule,
    partition: Option<Vec<Vec<NodeId>>>,
    oracle: Option<Oracle>,
    trace_mode: TraceMode,
    trace: Trace,
    stats: Stats,
    inputs: Option<Vec<Input>>,
    tick_every: Time,
    operator_seq: SeqGen,
}

impl Simulator {
    pub fn new(topology: &Topology, schedule: Schedule) -> Self {
        Self::from_specs(topology.specs.iter().cloned(), schedule)
    }

    pub fn from_specs(specs: impl IntoIterator<Item = NodeSpec>, schedule: Schedule) -> Self {
        let hosts = specs
            .into_iter()
            .map(|spec| {
                let node = spec.build();
                (
                    spec.id(),
                    Host {
                        spec,
                        node: Some(node),
                        journal: Vec::new(),
                        seq: SeqGen::new(0),
                        incarnation: 0,
                        dedup: DedupFilter::new(DEDUP_WINDOW),
                    },
                )
            })
            .collect();
        let mut sim = Simulator {
            now: 0,
            hosts,
            queue: BinaryHeap::new(),
            items: HashMap::new(),
            next_seq: 0,
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
            partition: None,
            oracle: Some(Oracle::new()),
            trace_mode: TraceMode::All,
            trace: Trace::default(),
            stats: Stats::default(),
            inputs: None,
            tick_every: 1,
            operator_seq: SeqGen::new(0),
            schedule,
        };
        for i in 0..sim.schedule.actions.len() {
            let at = sim.schedule.actions[i].at;
            sim.push(at, CLASS_ACTION, Item::Action(i));
        }
        sim.push(0, CLASS_TICK, Item::Tick);
        sim
    }

    pub fn with_trace(mut self, mode: TraceMode) -> Self {
        self.trace_mode = mode;
        self
    }

    pub fn without_oracle(mut self) -> Self {
        self.oracle = None;
        self
    }

    /// Records every input to every live node.
    pub fn recording_inputs(mut self) -> Self {
        self.inputs = Some(Vec::new());
        self
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.hosts.get(&id).and_then(|h| h.node.as_ref())
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.hosts.iter().filter_map(|(id, h)| h.node.as_ref().map(|n| (*id, n)))
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn inputs(&self) -> Option<&[Input]> {
        self.inputs.as_deref()
    }

    fn push(&mut self, at: Time, class: u8, item: Item) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.items.insert(seq, item);
        self.queue.push(Reverse((at, class, seq)));
    }

    /// Sends `msg` from the operator to `to`, delivered at the current time.
    pub fn inject(&mut self, to: NodeId, msg: Message) {
        let envelope = Envelope {
            from: OPERATOR,
            seq: self.operator_seq.next(),
            msg,
        };
        self.push(self.now, CLASS_MESSAGE, Item::Deliver { to, envelope });
    }

    /// Adds `action` to the plan at time `at`, which must not be in the past.
    pub fn schedule_action(&mut self, at: Time, action: Action) {
        let at = at.max(self.now);
        self.schedule.actions.push(schedule::TimedAction { at, action });
        let i = self.schedule.actions.len() - 1;
        self.push(at, CLASS_ACTION, Item::Action(i));
    }

    fn separated(&self, a: NodeId, b: NodeId) -> bool {
        let Some(groups) = &self.partition else { return false };
        let group_of = |n: NodeId| groups.iter().position(|g| g.contains(&n));
        group_of(a) != group_of(b)
    }

    fn extra_delay(&self, kind: MessageKind) -> Time {
        self.schedule
            .actions
            .iter()
            .filter_map(|a| match &a.action {
                Action::Delay { message, extra, until }
                    if a.at <= self.now && self.now < *until && MessageKind::from_name(message) == Some(kind) =>
                {
                    Some(*extra)
                }
                _ => None,
            })
            .sum()
    }

    fn pattern_drops(&self, from: NodeId, to: NodeId, kind: MessageKind) -> bool {
        self.schedule.actions.iter().any(|a| match &a.action {
            Action::Drop {
                message,
                from: f,
                to: t,
                until,
            } => {
                a.at <= self.now
                    && self.now < *until
                    && message.as_deref().is_none_or(|m| MessageKind::from_name(m) == Some(kind))
                    && f.is_none_or(|f| f == from)
                    && t.is_none_or(|t| t == to)
            }
            _ => false,
        })
    }

    fn dispatch(&mut self, from: NodeId, out: Outbox) {
        let host = self.hosts.get_mut(&from).expect("dispatching node exists");
        host.journal.extend(out.records);
        let mut envelopes = Vec::with_capacity(out.sends.len());
        for (to, msg) in out.sends {
            envelopes.push((to, Envelope { from, seq: host.seq.next(), msg }));
        }
        for e in out.events {
            if let Some(o) = self.oracle.as_mut() {
                o.observe(self.now, from, &e);
            }
            let keep = match self.trace_mode {
                TraceMode::None => false,
                TraceMode::All => true,
                TraceMode::Summary => !matches!(e, Event::Voted { .. } | Event::Executed { .. }),
            };
            if keep {
                self.trace.records.push(TraceRecord {
                    time: self.now,
                    node: from,
                    event: e,
                });
            }
        }
        for (to, envelope) in envelopes {
            let kind = envelope.msg.kind();
            if self.separated(from, to) || self.pattern_drops(from, to, kind) {
                self.stats.dropped += 1;
                continue;
            }
            if self.schedule.drop_rate > 0.0 && self.rng.gen_bool(self.schedule.drop_rate) {
                self.stats.dropped += 1;
                continue;
            }
            let copies = if self.schedule.dup_rate > 0.0 && self.rng.gen_bool(self.schedule.dup_rate) {
                self.stats.duplicated += 1;
                2
            } else {
                1
            };
            let extra = self.extra_delay(kind);
            for _ in 0..copies {
                let delay = self.rng.gen_range(self.schedule.delay_min..=self.schedule.delay_max) + extra;
                self.push(
                    self.now + delay,
                    CLASS_MESSAGE,
                    Item::Deliver {
                        to,
                        envelope: envelope.clone(),
                    },
                );
            }
        }
    }

    fn deliver(&mut self, to: NodeId, envelope: Envelope) {
        let dedup = self.schedule.dedup;
        let Some(host) = self.hosts.get_mut(&to) else { return };
        let Some(node) = host.node.as_mut() else { return };
        if let Some(d) = self.inputs.as_mut() {
            d.push(Input::Message {
                time: self.now,
                to,
                envelope: envelope.clone(),
            });
        }
        if dedup && !host.dedup.accept(envelope.from, envelope.seq) {
            return;
        }
        self.stats.delivered += 1;
        let mut out = Outbox::new();
        node.on_message(self.now, envelope.from, envelope.msg, &mut out);
        self.dispatch(to, out);
    }

    fn run_action(&mut self, i: usize) {
        let action = self.schedule.actions[i].action.clone();
        match action {
            Action::Crash { node } => {
                if let Some(h) = self.hosts.get_mut(&node) {
                    h.node = None;
                }
            }
            Action::Restart { node } => {
                if let Some(h) = self.hosts.get_mut(&node) {
                    if h.node.is_none() {
                        h.node = Some(h.spec.recover(&h.journal));
                        h.incarnation += 1;
                        h.seq = SeqGen::new(h.incarnation);
                        h.dedup = DedupFilter::new(DEDUP_WINDOW);
                    }
                }
            }
            Action::Partition { groups } => self.partition = Some(groups),
            Action::Heal => self.partition = None,
            Action::Drop { .. } | Action::Delay { .. } => {}
            Action::ReconfigureAcceptors { .. } => {
                let config = action.config().expect("acceptor reconfiguration");
                for p in self.proposer_ids() {
                    self.inject(p, Message::Reconfigure { config: config.clone() });
                }
            }
            Action::ReconfigureMatchmakers { members } => {
                let drivers: Vec<NodeId> = self
                    .hosts
                    .iter()
                    .filter(|(_, h)| matches!(h.spec, NodeSpec::Driver { .. }))
                    .map(|(id, _)| *id)
                    .collect();
                for d in drivers {
                    self.inject(d, Message::ReconfigureMatchmakers { members: members.clone() });
                }
            }
            Action::ElectNow { node } => self.inject(node, Message::ElectNow),
        }
    }

    fn proposer_ids(&self) -> Vec<NodeId> {
        self.hosts
            .iter()
            .filter(|(_, h)| matches!(h.spec, NodeSpec::Leader(_)))
            .map(|(id, _)| *id)
            .collect()
    }

    fn tick(&mut self) {
        self.stats.ticks += 1;
        let ids: Vec<NodeId> = self.hosts.keys().copied().collect();
        for id in ids {
            let mut out = Outbox::new();
            let Some(node) = self.hosts.get_mut(&id).and_then(|h| h.node.as_mut()) else { continue };
            if let Some(d) = self.inputs.as_mut() {
                d.push(Input::Tick { time: self.now, node: id });
            }
            node.on_tick(self.now, &mut out);
            if !out.is_empty() {
                self.dispatch(id, out);
            }
        }
        let next = self.now + self.tick_every;
        self.push(next, CLASS_TICK, Item::Tick);
    }

    /// Processes every event scheduled at or before `until`.
    pub fn run_until(&mut self, until: Time) {
        while let Some(Reverse((at, _, seq))) = self.queue.peek().copied() {
            if at > until {
                break;
            }
            self.queue.pop();
            self.now = at;
            match self.items.remove(&seq).expect("queued item") {
                Item::Deliver { to, envelope } => self.deliver(to, envelope),
                Item::Action(i) => self.run_action(i),
                Item::Tick => self.tick(),
            }
        }
        self.now = self.now.max(until);
    }

    /// Runs to the end of the schedule and checks safety.
    pub fn run(mut self) -> Outcome {
        self.run_until(self.schedule.duration);
        self.finish()
    }

    pub fn finish(mut self) -> Outcome {
        self.trace.final_hashes = self.nodes().map(|(id, n)| (id, n.state_hash())).collect();
        let violations = self.oracle.take().map(Oracle::finish).unwrap_or_default();
        Outcome {
            trace: self.trace,
            violations,
            stats: self.stats,
        }
    }
}

/// Runs one schedule on a topology with the full oracle and no kept trace.
pub fn check_schedule(topology: &Topology, schedule: Schedule) -> Outcome {
    Simulator::new(topology, schedule).with_trace(TraceMode::None).run()
}

#[cfg(test)]
mod tests {
    use super::topology::ClusterParams;
    use super::*;

    fn topo() -> Topology {
        Topology::standard(&ClusterParams::default())
    }

    #[test]
    fn same_seed_same_trace() {
        let t = topo();
        let s = Schedule::random(42, &t, 300, 50);
        let a = Simulator::new(&t, s.clone()).run();
        let b = Simulator::new(&t, s).run();
        assert_eq!(a.trace.digest(), b.trace.digest());
        assert_eq!(a.trace.records.len(), b.trace.records.len());
    }

    #[test]
    fn quiet_run_makes_progress_and_is_safe() {
        let t = topo();
        let out = Simulator::new(&t, Schedule::quiet(1, 300)).run();
        assert_eq!(out.violations, vec![]);
        let replies = out.trace.records.iter().filter(|r| matches!(r.event, Event::Reply { .. })).count();
        assert!(replies > 20, "{replies}");
    }

    #[test]
    fn empty_workload_only_runs_the_control_plane() {
        let t = Topology::standard(&ClusterParams {
            clients: 0,
            ..ClusterParams::default()
        });
        let out = Simulator::new(&t, Schedule::quiet(1, 200)).run();
        assert!(out.trace.records.iter().all(|r| !matches!(r.event, Event::Executed { .. } | Event::Reply { .. })));
        assert!(out.trace.records.iter().any(|r| matches!(r.event, Event::Steady { .. })));
    }

    #[test]
    fn leader_crash_leads_to_an_election() {
        let t = topo();
        let s = Schedule::quiet(3, 400).with(100, Action::Crash { node: t.proposers[0] });
        let out = Simulator::new(&t, s).run();
        assert!(out
            .trace
            .records
            .iter()
            .any(|r| r.time > 100 && r.node == t.proposers[1] && matches!(r.event, Event::Elected { .. })));
        let late_replies = out
            .trace
            .records
            .iter()
            .filter(|r| r.time > 250 && matches!(r.event, Event::Reply { .. }))
            .count();
        assert!(late_replies > 0);
        assert_eq!(out.violations, vec![]);
    }
}
