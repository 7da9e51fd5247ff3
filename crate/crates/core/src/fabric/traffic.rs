use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::model::LinkClass;

/// Label used for traffic issued outside any labelled step.
pub const UNLABELED: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub puts: u64,
    pub gets: u64,
    pub bytes_put: u64,
    pub bytes_got: u64,
    pub atomic_ops: u64,
}

impl TrafficCounters {
    fn merge(&mut self, o: &TrafficCounters) {
        self.puts += o.puts;
        self.gets += o.gets;
        self.bytes_put += o.bytes_put;
        self.bytes_got += o.bytes_got;
        self.atomic_ops += o.atomic_ops;
    }

    /// Payload bytes moved in either direction.
    pub fn bytes(&self) -> u64 {
        self.bytes_put + self.bytes_got
    }

    pub fn transfers(&self) -> u64 {
        self.puts + self.gets
    }
}

/// One row of the traffic log. `initiator` issued the operation against the
/// heap of `target`; for a get the data flows target -> initiator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub initiator: usize,
    pub target: usize,
    pub label: u32,
    pub link: LinkClass,
    pub counters: TrafficCounters,
}

impl TrafficRecord {
    /// Rank whose heap the bytes left, and rank that received them, for the
    /// put and get halves separately: `[(src, dst, bytes)]`.
    pub fn flows(&self) -> [(usize, usize, u64); 2] {
        [
            (self.initiator, self.target, self.counters.bytes_put),
            (self.target, self.initiator, self.counters.bytes_got),
        ]
    }
}

/// Byte-exact record of every one-sided operation.
#[derive(Debug)]
pub struct TrafficLog {
    node_size: usize,
    inner: Mutex<BTreeMap<(usize, usize, u32), TrafficCounters>>,
}

impl TrafficLog {
    pub(crate) fn new(node_size: usize) -> Self {
        TrafficLog {
            node_size: node_size.max(1),
            inner: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn node_size(&self) -> usize {
        self.node_size
    }

    pub fn link(&self, a: usize, b: usize) -> LinkClass {
        if a == b {
            LinkClass::SelfRank
        } else if a / self.node_size == b / self.node_size {
            LinkClass::IntraNode
        } else {
            LinkClass::InterNode
        }
    }

    fn add(&self, initiator: usize, target: usize, label: u32, f: impl FnOnce(&mut TrafficCounters)) {
        let mut g = self.inner.lock().unwrap();
        f(g.entry((initiator, target, label)).or_default());
    }

    pub(crate) fn record_put(&self, initiator: usize, target: usize, label: u32, bytes: usize) {
        self.add(initiator, target, label, |c| {
            c.puts += 1;
            c.bytes_put += bytes as u64;
        });
    }

    pub(crate) fn record_get(&self, initiator: usize, target: usize, label: u32, bytes: usize) {
        self.add(initiator, target, label, |c| {
            c.gets += 1;
            c.bytes_got += bytes as u64;
        });
    }

    pub(crate) fn record_atomic(&self, initiator: usize, target: usize, label: u32) {
        self.add(initiator, target, label, |c| c.atomic_ops += 1);
    }

    pub(crate) fn clear(&self) {
        self.inner.lock().unwrap().clear();
    }

    pub fn records(&self) -> Vec<TrafficRecord> {
        self.inner
            .lock()
            .unwrap()
            .iter()
            .map(|(&(initiator, target, label), &counters)| TrafficRecord {
                initiator,
                target,
                label,
                link: self.link(initiator, target),
                counters,
            })
            .collect()
    }

    /// Counters for one (initiator, target) pair summed over labels.
    pub fn between(&self, initiator: usize, target: usize) -> TrafficCounters {
        let mut out = TrafficCounters::default();
        for r in self.records() {
            if r.initiator == initiator && r.target == target {
                out.merge(&r.counters);
            }
        }
        out
    }

    pub fn bytes_put(&self, initiator: usize, target: usize) -> u64 {
        self.between(initiator, target).bytes_put
    }

    pub fn bytes_got(&self, initiator: usize, target: usize) -> u64 {
        self.between(initiator, target).bytes_got
    }

    pub fn total(&self, filter: impl Fn(&TrafficRecord) -> bool) -> TrafficCounters {
        let mut out = TrafficCounters::default();
        for r in self.records().iter().filter(|r| filter(r)) {
            out.merge(&r.counters);
        }
        out
    }

    /// Bytes that left each rank's heap (sent) and arrived at each rank
    /// (received), optionally restricted to some link classes.
    pub fn per_rank_flow(&self, ranks: usize, include: impl Fn(LinkClass) -> bool) -> (Vec<u64>, Vec<u64>) {
        let mut sent = vec![0u64; ranks];
        let mut recv = vec![0u64; ranks];
        for r in self.records() {
            if !include(r.link) {
                continue;
            }
            for (src, dst, bytes) in r.flows() {
                sent[src] += bytes;
                recv[dst] += bytes;
            }
        }
        (sent, recv)
    }

    /// Every label that appears in the log.
    pub fn labels(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.records().iter().map(|r| r.label).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}
