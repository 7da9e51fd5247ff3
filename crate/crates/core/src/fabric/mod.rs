//! In-process emulation of a one-sided communication machine.
//!
//! A [`Fabric`] owns one symmetric heap per rank, a remote queue per rank and
//! a [`TrafficLog`]. [`Fabric::run`] launches one thread per rank, each driving
//! a [`RankCtx`] through which all puts, gets, atomics, queue operations and
//! barriers are issued. Remote operations never need the target rank's
//! participation.
//!
//! Two schedules are available. `Schedule::Free` lets threads race (optionally
//! with seeded random yields) and is used to stress protocols.
//! `Schedule::Virtual` orders every operation by virtual time, which makes
//! results, traffic and clocks reproducible run to run.

mod clock;
mod ctx;
mod heap;
mod sched;
mod traffic;

pub use clock::{replay, Event, Replay, VClock};
pub use ctx::{RankCtx, RankStats, TransferHandle};
pub use traffic::{TrafficCounters, TrafficLog, TrafficRecord, UNLABELED};

use std::any::Any;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CostModel, LinkClass};
use heap::Heap;
use sched::Sched;

/// Handle to `len` bytes at `offset` in the heap of `rank`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlobalPtr {
    pub rank: usize,
    pub offset: usize,
    pub len: usize,
}

impl GlobalPtr {
    pub fn null(rank: usize) -> Self {
        GlobalPtr { rank, offset: 0, len: 0 }
    }

    pub fn is_null(&self) -> bool {
        self.len == 0
    }

    /// Sub-range `[start, start + len)` of this allocation.
    pub fn slice(&self, start: usize, len: usize) -> GlobalPtr {
        assert!(start + len <= self.len, "slice out of range");
        GlobalPtr {
            rank: self.rank,
            offset: self.offset + start,
            len,
        }
    }
}

impl std::fmt::Display for GlobalPtr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:[{}+{}]", self.rank, self.offset, self.len)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FabricError {
    #[error("invalid fabric configuration: {0}")]
    InvalidConfig(String),
    #[error("rank {rank} out of range for {ranks} ranks")]
    InvalidRank { rank: usize, ranks: usize },
    #[error("heap of rank {rank} exhausted: requested {requested} bytes, {remaining} free")]
    HeapExhausted {
        rank: usize,
        requested: usize,
        remaining: usize,
    },
    #[error("length mismatch: pointer has {expected} bytes, buffer has {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("dangling pointer {0}")]
    DanglingPointer(GlobalPtr),
    #[error("pointer {0} exceeds heap bounds")]
    OutOfBounds(GlobalPtr),
    #[error("pointer {0} is not an aligned 8-byte cell")]
    Misaligned(GlobalPtr),
    #[error("queue of rank {owner} is full ({capacity} entries)")]
    QueueFull { owner: usize, capacity: usize },
    #[error("rank {caller} may not access memory owned by rank {owner} locally")]
    NotOwner { caller: usize, owner: usize },
    #[error("{0} timed out")]
    Timeout(&'static str),
    #[error("no rank can make progress")]
    Deadlock,
    #[error("run aborted after a failure on another rank")]
    Aborted,
    #[error("invalid event log: {0}")]
    InvalidLog(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Real concurrency. With a seed, ranks randomly yield or nap before
    /// operations to shake out interleavings.
    Free { jitter_seed: Option<u64> },
    /// Deterministic virtual-time ordering.
    Virtual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FabricConfig {
    pub ranks: usize,
    pub heap_bytes: usize,
    pub node_size: usize,
    pub queue_capacity: usize,
    pub schedule: Schedule,
    pub cost: CostModel,
    pub timeout: Duration,
}

impl FabricConfig {
    pub fn new(ranks: usize) -> Self {
        FabricConfig {
            ranks,
            heap_bytes: 16 << 20,
            node_size: 6,
            queue_capacity: 4096,
            schedule: Schedule::Virtual,
            cost: CostModel::summit(),
            timeout: Duration::from_secs(120),
        }
    }

    pub fn heap_bytes(mut self, n: usize) -> Self {
        self.heap_bytes = n;
        self
    }

    pub fn node_size(mut self, g: usize) -> Self {
        self.node_size = g;
        self
    }

    pub fn queue_capacity(mut self, c: usize) -> Self {
        self.queue_capacity = c;
        self
    }

    pub fn schedule(mut self, s: Schedule) -> Self {
        self.schedule = s;
        self
    }

    pub fn cost(mut self, c: CostModel) -> Self {
        self.cost = c;
        self
    }

    pub fn timeout(mut self, t: Duration) -> Self {
        self.timeout = t;
        self
    }
}

/// Words per queue slot: pointer (rank, offset, len), producer, visible-at
/// time, producer event index, ready sequence number.
pub(crate) const SLOT_WORDS: usize = 7;
pub(crate) const QUEUE_HEADER: usize = 16;

pub struct Fabric {
    cfg: FabricConfig,
    heaps: Vec<Heap>,
    traffic: TrafficLog,
    sched: Sched,
    queues: Vec<GlobalPtr>,
    gather: Mutex<Vec<Option<Box<dyn Any + Send>>>>,
    running: Mutex<()>,
}

impl Fabric {
    pub fn new(cfg: FabricConfig) -> Result<Self, FabricError> {
        if cfg.ranks == 0 {
            return Err(FabricError::InvalidConfig("at least one rank required".into()));
        }
        if cfg.node_size == 0 {
            return Err(FabricError::InvalidConfig("node size must be positive".into()));
        }
        if cfg.queue_capacity == 0 {
            return Err(FabricError::InvalidConfig("queue capacity must be positive".into()));
        }
        cfg.cost
            .validate()
            .map_err(|e| FabricError::InvalidConfig(e.to_string()))?;
        let queue_bytes = QUEUE_HEADER + cfg.queue_capacity * SLOT_WORDS * 8;
        let heaps: Vec<Heap> = (0..cfg.ranks)
            .map(|r| Heap::new(r, cfg.heap_bytes + queue_bytes))
            .collect();
        let queues = heaps
            .iter()
            .map(|h| h.alloc(queue_bytes))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Fabric {
            traffic: TrafficLog::new(cfg.node_size),
            sched: Sched::new(cfg.ranks, cfg.schedule == Schedule::Virtual, cfg.timeout),
            gather: Mutex::new((0..cfg.ranks).map(|_| None).collect()),
            running: Mutex::new(()),
            heaps,
            queues,
            cfg,
        })
    }

    pub fn ranks(&self) -> usize {
        self.cfg.ranks
    }

    pub fn config(&self) -> &FabricConfig {
        &self.cfg
    }

    pub fn cost(&self) -> &CostModel {
        &self.cfg.cost
    }

    pub fn traffic(&self) -> &TrafficLog {
        &self.traffic
    }

    pub fn link(&self, a: usize, b: usize) -> LinkClass {
        self.traffic.link(a, b)
    }

    fn heap(&self, rank: usize) -> Result<&Heap, FabricError> {
        self.heaps.get(rank).ok_or(FabricError::InvalidRank {
            rank,
            ranks: self.cfg.ranks,
        })
    }

    /// Allocates `nbytes` on `rank`'s heap. Any rank may allocate on any heap;
    /// allocation is bookkeeping only and moves no data.
    pub fn alloc(&self, rank: usize, nbytes: usize) -> Result<GlobalPtr, FabricError> {
        self.heap(rank)?.alloc(nbytes)
    }

    pub fn free(&self, ptr: GlobalPtr) -> Result<(), FabricError> {
        self.heap(ptr.rank)?.free(ptr)
    }

    /// Free bytes left on `rank`'s heap.
    pub fn heap_free(&self, rank: usize) -> Result<usize, FabricError> {
        Ok(self.heap(rank)?.free_bytes())
    }

    /// Live allocations on `rank`'s heap, excluding its queue.
    pub fn live_allocations(&self, rank: usize) -> Result<usize, FabricError> {
        Ok(self.heap(rank)?.live_allocations() - 1)
    }

    /// Runs `f` once per rank on its own thread and returns the per-rank
    /// results in rank order. If any rank fails, the others are woken with
    /// [`FabricError::Aborted`] and the first failure is returned. A panic on
    /// any rank is re-raised after all threads have stopped.
    pub fn run<R, E, F>(&self, f: F) -> Result<Vec<R>, E>
    where
        R: Send,
        E: Send + From<FabricError>,
        F: Fn(&mut RankCtx<'_>) -> Result<R, E> + Sync,
    {
        let _exclusive = self.running.lock().unwrap_or_else(|e| e.into_inner());
        self.sched.reset();
        let outcomes: Vec<std::thread::Result<Result<R, E>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..self.cfg.ranks)
                .map(|rank| {
                    let f = &f;
                    std::thread::Builder::new()
                        .name(format!("rank-{rank}"))
                        .stack_size(8 << 20)
                        .spawn_scoped(scope, move || {
                            let mut ctx = RankCtx::new(self, rank);
                            let out = catch_unwind(AssertUnwindSafe(|| f(&mut ctx)));
                            match &out {
                                Ok(Ok(_)) => self.sched.done(rank),
                                Ok(Err(_)) => {
                                    self.sched.abort(rank, FabricError::Aborted);
                                    self.sched.done(rank);
                                }
                                Err(_) => {
                                    self.sched.abort(rank, FabricError::Aborted);
                                    self.sched.done(rank);
                                }
                            }
                            out
                        })
                        .expect("spawn rank thread")
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let first = self.sched.first_failure();
        let mut results = Vec::with_capacity(outcomes.len());
        let mut errors: Vec<Option<E>> = Vec::new();
        let mut panic = None;
        for out in outcomes {
            match out {
                Ok(Ok(r)) => {
                    results.push(r);
                    errors.push(None);
                }
                Ok(Err(e)) => errors.push(Some(e)),
                Err(p) => {
                    errors.push(None);
                    panic.get_or_insert(p);
                }
            }
        }
        if let Some(p) = panic {
            resume_unwind(p);
        }
        if let Some((rank, cause)) = first {
            if let Some(e) = errors.get_mut(rank).and_then(Option::take) {
                return Err(e);
            }
            if let Some(e) = errors.into_iter().flatten().next() {
                return Err(e);
            }
            return Err(cause.into());
        }
        Ok(results)
    }
}
