//! Many random schedules checked in parallel.

use std::ops::Range;

use mmpaxos_core::Time;
use rayon::prelude::*;

use super::check_schedule;
use super::oracle::Violation;
use super::schedule::Schedule;
use super::topology::{ClusterParams, Topology};

#[derive(Clone, Debug)]
pub struct Corpus {
    pub params: ClusterParams,
    pub duration: Time,
    pub reconfig_every: Time,
}

impl Default for Corpus {
    fn default() -> Self {
        Corpus {
            params: ClusterParams::default(),
            duration: 400,
            reconfig_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub seed: u64,
    pub violations: Vec<Violation>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusReport {
    pub schedules: u64,
    pub failures: Vec<Failure>,
}

impl Corpus {
    /// The topology and schedule for one seed.
    pub fn case(&self, seed: u64) -> (Topology, Schedule) {
        let topo = Topology::standard(&ClusterParams {
            seed,
            ..self.params.clone()
        });
        let schedule = Schedule::random(seed, &topo, self.duration, self.reconfig_every);
        (topo, schedule)
    }

    pub fn check(&self, seed: u64) -> Vec<Violation> {
        let (topo, schedule) = self.case(seed);
        check_schedule(&topo, schedule).violations
    }

    /// Checks every seed and reports each failing one, in seed order.
    pub fn run(&self, seeds: Range<u64>) -> CorpusReport {
        let schedules = seeds.end.saturating_sub(seeds.start);
        let mut failures: Vec<Failure> = seeds
            .into_par_iter()
            .filter_map(|seed| {
                let violations = self.check(seed);
                (!violations.is_empty()).then_some(Failure { seed, violations })
            })
            .collect();
        failures.sort_by_key(|f| f.seed);
        CorpusReport { schedules, failures }
    }

    /// The lowest failing seed, if any.
    pub fn first_failure(&self, seeds: Range<u64>) -> Option<Failure> {
        seeds.into_par_iter().find_map_first(|seed| {
            let violations = self.check(seed);
            (!violations.is_empty()).then_some(Failure { seed, violations })
        })
    }
}
