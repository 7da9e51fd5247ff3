use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{CostModel, LinkClass};

use super::FabricError;

/// One entry of a rank's event log. The log is enough to recompute the rank's
/// virtual clock under any cost model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Event {
    Put { peer: usize, bytes: u64 },
    Get { peer: usize, bytes: u64 },
    GetNb { peer: usize, bytes: u64, handle: u64 },
    Wait { handle: u64 },
    Atomic { peer: usize },
    Compute { flops: u64, bytes: u64 },
    Delay { secs: f64 },
    Barrier,
    /// A queue entry was taken; it became visible when event `event` of
    /// `producer` completed.
    QueueRecv { producer: usize, event: usize },
}

/// Per-rank virtual clock. Transfers are serialized on the rank's own NIC;
/// non-blocking gets overlap with computation until waited on.
#[derive(Clone, Debug, Default)]
pub struct VClock {
    pub clock: f64,
    nic_free: f64,
    pending: BTreeMap<u64, f64>,
}

impl VClock {
    pub fn transfer(&mut self, cost: &CostModel, link: LinkClass, bytes: u64) -> f64 {
        let start = self.clock.max(self.nic_free);
        let end = start + cost.transfer_time(link, bytes);
        self.nic_free = end;
        self.clock = end;
        end
    }

    pub fn issue(&mut self, cost: &CostModel, link: LinkClass, bytes: u64, handle: u64) {
        let start = self.clock.max(self.nic_free);
        let end = start + cost.transfer_time(link, bytes);
        self.nic_free = end;
        self.pending.insert(handle, end);
    }

    pub fn wait(&mut self, handle: u64) {
        if let Some(done) = self.pending.remove(&handle) {
            self.clock = self.clock.max(done);
        }
    }

    pub fn atomic(&mut self, cost: &CostModel, link: LinkClass) {
        let start = self.clock.max(self.nic_free);
        let end = start + cost.atomic_time(link);
        self.nic_free = end;
        self.clock = end;
    }

    pub fn compute(&mut self, cost: &CostModel, flops: u64, bytes: u64) {
        self.clock += cost.compute_time(flops, bytes);
    }

    pub fn delay(&mut self, secs: f64) {
        self.clock += secs;
    }

    pub fn advance_to(&mut self, t: f64) {
        self.clock = self.clock.max(t);
    }

    fn apply(&mut self, ev: &Event, cost: &CostModel, link: impl Fn(usize) -> LinkClass) {
        match *ev {
            Event::Put { peer, bytes } | Event::Get { peer, bytes } => {
                self.transfer(cost, link(peer), bytes);
            }
            Event::GetNb { peer, bytes, handle } => self.issue(cost, link(peer), bytes, handle),
            Event::Wait { handle } => self.wait(handle),
            Event::Atomic { peer } => self.atomic(cost, link(peer)),
            Event::Compute { flops, bytes } => self.compute(cost, flops, bytes),
            Event::Delay { secs } => self.delay(secs),
            Event::Barrier | Event::QueueRecv { .. } => unreachable!("handled by replay"),
        }
    }
}

/// Output of [`replay`]: per-rank finishing clocks and the clock after every
/// event.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    pub finish: Vec<f64>,
    pub event_times: Vec<Vec<f64>>,
}

impl Replay {
    pub fn makespan(&self) -> f64 {
        self.finish.iter().cloned().fold(0.0, f64::max)
    }
}

fn link_of(node_size: usize) -> impl Fn(usize, usize) -> LinkClass {
    let g = node_size.max(1);
    move |a, b| {
        if a == b {
            LinkClass::SelfRank
        } else if a / g == b / g {
            LinkClass::IntraNode
        } else {
            LinkClass::InterNode
        }
    }
}

/// Recomputes every rank's clock from the event logs under `cost`.
/// Barriers release at the latest arrival; a queue receive waits for the
/// producer's matching put to complete.
pub fn replay(logs: &[Vec<Event>], cost: &CostModel, node_size: usize) -> Result<Replay, FabricError> {
    let p = logs.len();
    let link = link_of(node_size);
    let mut clocks = vec![VClock::default(); p];
    let mut times: Vec<Vec<f64>> = logs.iter().map(|l| Vec::with_capacity(l.len())).collect();
    let mut pos = vec![0usize; p];
    loop {
        let mut progress = false;
        for r in 0..p {
            while pos[r] < logs[r].len() {
                match &logs[r][pos[r]] {
                    Event::Barrier => break,
                    Event::QueueRecv { producer, event } => {
                        let Some(&t) = times.get(*producer).and_then(|v| v.get(*event)) else {
                            if *producer >= p || *event >= logs[*producer].len() {
                                return Err(FabricError::InvalidLog(format!(
                                    "rank {r} receives from missing event {event} of rank {producer}"
                                )));
                            }
                            break;
                        };
                        clocks[r].advance_to(t);
                    }
                    ev => clocks[r].apply(ev, cost, |peer| link(r, peer)),
                }
                times[r].push(clocks[r].clock);
                pos[r] += 1;
                progress = true;
            }
        }
        if (0..p).all(|r| pos[r] == logs[r].len()) {
            break;
        }
        let at_barrier = (0..p).filter(|&r| matches!(logs[r].get(pos[r]), Some(Event::Barrier))).count();
        if at_barrier == p {
            let t = clocks.iter().map(|c| c.clock).fold(0.0, f64::max);
            for r in 0..p {
                clocks[r].advance_to(t);
                times[r].push(t);
                pos[r] += 1;
            }
            progress = true;
        }
        if !progress {
            return Err(FabricError::InvalidLog(
                "event logs cannot be replayed: unmatched barrier or queue receive".into(),
            ));
        }
    }
    Ok(Replay {
        finish: clocks.iter().map(|c| c.clock).collect(),
        event_times: times,
    })
}
