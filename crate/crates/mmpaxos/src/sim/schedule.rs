//! Fault plans and their TOML form.

use mmpaxos_core::{ConfigId, Configuration, MessageKind, NodeId, Time};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::topology::Topology;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Crash {
        node: NodeId,
    },
    Restart {
        node: NodeId,
    },
    /// Messages between different groups are dropped until `Heal`. Nodes not
    /// listed form one more group.
    Partition {
        groups: Vec<Vec<NodeId>>,
    },
    Heal,
    /// Drops matching messages until `until`. Absent fields match anything.
    Drop {
        #[serde(default)]
        message: Option<String>,
        #[serde(default)]
        from: Option<NodeId>,
        #[serde(default)]
        to: Option<NodeId>,
        until: Time,
    },
    /// Adds `extra` to the delay of every message of this kind until `until`.
    Delay {
        message: String,
        extra: Time,
        until: Time,
    },
    /// Operator request to every proposer: move to a majority configuration
    /// over `acceptors`.
    ReconfigureAcceptors {
        id: u64,
        acceptors: Vec<NodeId>,
    },
    ReconfigureMatchmakers {
        members: Vec<NodeId>,
    },
    ElectNow {
        node: NodeId,
    },
}

impl Action {
    pub fn config(&self) -> Option<Configuration> {
        match self {
            Action::ReconfigureAcceptors { id, acceptors } => {
                Some(Configuration::majority(ConfigId(*id), acceptors.iter().copied()))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub at: Time,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub seed: u64,
    pub duration: Time,
    pub delay_min: Time,
    pub delay_max: Time,
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub dup_rate: f64,
    /// Filter duplicate deliveries at the host, as the TCP runtime does.
    #[serde(default)]
    pub dedup: bool,
    #[serde(default)]
    pub actions: Vec<TimedAction>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("delay_min {min} exceeds delay_max {max}")]
    DelayRange { min: Time, max: Time },
    #[error("rate {0} outside [0, 1]")]
    Rate(f64),
}

impl Schedule {
    /// A fault-free schedule with unit latency.
    pub fn quiet(seed: u64, duration: Time) -> Self {
        Schedule {
            seed,
            duration,
            delay_min: 1,
            delay_max: 1,
            drop_rate: 0.0,
            dup_rate: 0.0,
            dedup: false,
            actions: Vec::new(),
        }
    }

    pub fn with(mut self, at: Time, action: Action) -> Self {
        self.actions.push(TimedAction { at, action });
        self.actions.sort_by_key(|a| a.at);
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, ScheduleError> {
        let mut s: Schedule = toml::from_str(text)?;
        s.actions.sort_by_key(|a| a.at);
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schedules always serialize")
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.delay_min > self.delay_max {
            return Err(ScheduleError::DelayRange {
                min: self.delay_min,
                max: self.delay_max,
            });
        }
        for r in [self.drop_rate, self.dup_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(ScheduleError::Rate(r));
            }
        }
        for a in &self.actions {
            let kind = match &a.action {
                Action::Drop { message: Some(m), .. } | Action::Delay { message: m, .. } => m,
                _ => continue,
            };
            if MessageKind::from_name(kind).is_none() {
                return Err(ScheduleError::UnknownKind(kind.clone()));
            }
        }
        Ok(())
    }

    /// A random schedule from the standard fault matrix: up to 30% drops,
    /// duplicates, reordering through random delays, at most one crash per
    /// role, acceptor reconfigurations every `reconfig_every` units and at
    /// least one matchmaker reconfiguration.
    pub fn random(seed: u64, topo: &Topology, duration: Time, reconfig_every: Time) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let mut s = Schedule {
            seed,
            duration,
            delay_min: 1,
            delay_max: rng.gen_range(1..=6),
            drop_rate: [0.0, 0.05, 0.1, 0.2, 0.3][rng.gen_range(0..5)],
            dup_rate: [0.0, 0.05, 0.2][rng.gen_range(0..3)],
            dedup: false,
            actions: Vec::new(),
        };
        let settle = duration * 3 / 4;
        let mut id = 1;
        let mut t = reconfig_every;
        while t < settle {
            let mut pool = topo.acceptor_pool.clone();
            pool.shuffle(&mut rng);
            pool.truncate(topo.config_size());
            pool.sort();
            s.actions.push(TimedAction {
                at: t,
                action: Action::ReconfigureAcceptors { id, acceptors: pool },
            });
            id += 1;
            t += reconfig_every;
        }
        if let Some(next) = topo.matchmaker_sets.get(1) {
            s.actions.push(TimedAction {
                at: rng.gen_range(1..settle.max(2)),
                action: Action::ReconfigureMatchmakers { members: next.clone() },
            });
        }
        // one crash per role, each with probability one half
        let roles: [&[NodeId]; 4] = [&topo.proposers, &topo.acceptor_pool, &topo.matchmaker_sets[0], &topo.replicas];
        for nodes in roles {
            if nodes.is_empty() || !rng.gen_bool(0.5) {
                continue;
            }
            let node = *nodes.choose(&mut rng).expect("non-empty");
            let at = rng.gen_range(1..settle.max(2));
            s.actions.push(TimedAction {
                at,
                action: Action::Crash { node },
            });
            if rng.gen_bool(0.7) {
                s.actions.push(TimedAction {
                    at: at + rng.gen_range(10..100),
                    action: Action::Restart { node },
                });
            }
        }
        if rng.gen_bool(0.3) {
            let at = rng.gen_range(1..settle.max(2));
            let mut nodes = topo.all_servers();
            nodes.shuffle(&mut rng);
            let cut = rng.gen_range(1..nodes.len());
            s.actions.push(TimedAction {
                at,
                action: Action::Partition {
                    groups: vec![nodes[..cut].to_vec()],
                },
            });
            s.actions.push(TimedAction {
                at: at + rng.gen_range(20..120),
                action: Action::Heal,
            });
        }
        if topo.proposers.len() > 1 && rng.gen_bool(0.5) {
            // force competing leaders into the race
            for _ in 0..rng.gen_range(1..=3) {
                let node = *topo.proposers.choose(&mut rng).expect("non-empty");
                s.actions.push(TimedAction {
                    at: rng.gen_range(1..settle.max(2)),
                    action: Action::ElectNow { node },
                });
            }
        }
        s.actions.sort_by_key(|a| a.at);
        s
    }
}
