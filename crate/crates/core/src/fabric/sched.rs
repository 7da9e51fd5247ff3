//! Rank coordination: barriers, queue wake-ups and, in virtual mode, the
//! conservative ordering that makes runs deterministic.
//!
//! In virtual mode a rank may perform a fabric operation only while its
//! `(clock, rank)` pair is the smallest among running ranks. Every shared
//! effect therefore happens in virtual-time order regardless of how the OS
//! schedules threads.

use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::FabricError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Running,
    Barrier,
    Queue,
    Done,
}

struct State {
    clock: Vec<f64>,
    status: Vec<Status>,
    waiting: Vec<bool>,
    signal: Vec<u64>,
    arrived: usize,
    generation: u64,
    arrival_max: f64,
    released_at: f64,
    aborted: Option<(usize, FabricError)>,
}

pub(crate) struct Sched {
    virtual_mode: bool,
    timeout: Duration,
    state: Mutex<State>,
    cvs: Vec<Condvar>,
}

impl Sched {
    pub(crate) fn new(p: usize, virtual_mode: bool, timeout: Duration) -> Self {
        Sched {
            virtual_mode,
            timeout,
            state: Mutex::new(State {
                clock: vec![0.0; p],
                status: vec![Status::Running; p],
                waiting: vec![false; p],
                signal: vec![0; p],
                arrived: 0,
                generation: 0,
                arrival_max: 0.0,
                released_at: 0.0,
                aborted: None,
            }),
            cvs: (0..p).map(|_| Condvar::new()).collect(),
        }
    }

    pub(crate) fn is_virtual(&self) -> bool {
        self.virtual_mode
    }

    pub(crate) fn reset(&self) {
        let mut s = self.state.lock().unwrap();
        let p = s.clock.len();
        s.clock = vec![0.0; p];
        s.status = vec![Status::Running; p];
        s.waiting = vec![false; p];
        s.signal = vec![0; p];
        s.arrived = 0;
        s.arrival_max = 0.0;
        s.released_at = 0.0;
        s.aborted = None;
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn min_running(s: &State) -> Option<usize> {
        let mut best: Option<usize> = None;
        for r in 0..s.clock.len() {
            if s.status[r] != Status::Running {
                continue;
            }
            match best {
                Some(b) if s.clock[b] <= s.clock[r] => {}
                _ => best = Some(r),
            }
        }
        best
    }

    fn wake_min(&self, s: &State) {
        if let Some(m) = Self::min_running(s) {
            if s.waiting[m] {
                self.cvs[m].notify_one();
            }
        }
    }

    fn abort_locked(&self, s: &mut State, rank: usize, err: FabricError) {
        if s.aborted.is_none() {
            s.aborted = Some((rank, err));
        }
        for cv in &self.cvs {
            cv.notify_all();
        }
    }

    /// A blocked or finished rank left the running set; if nobody is left to
    /// make progress while someone still waits, the run cannot finish.
    fn check_deadlock(&self, s: &mut State, rank: usize) {
        if !self.virtual_mode || s.aborted.is_some() {
            return;
        }
        let running = s.status.iter().any(|&st| st == Status::Running);
        let blocked = s.status.iter().any(|&st| st == Status::Barrier || st == Status::Queue);
        if !running && blocked {
            self.abort_locked(s, rank, FabricError::Deadlock);
        }
    }

    fn aborted(s: &State) -> Result<(), FabricError> {
        match &s.aborted {
            Some((_, e)) => Err(e.clone()),
            None => Ok(()),
        }
    }

    /// Records a failure on `rank` and wakes every waiter.
    pub(crate) fn abort(&self, rank: usize, err: FabricError) {
        let mut s = self.lock();
        self.abort_locked(&mut s, rank, err);
    }

    pub(crate) fn first_failure(&self) -> Option<(usize, FabricError)> {
        self.lock().aborted.clone()
    }

    /// Waits until `rank` is the earliest running rank (virtual mode only).
    /// Returns the rank's queue signal count at that moment.
    pub(crate) fn sync(&self, rank: usize, clock: f64) -> Result<u64, FabricError> {
        let mut s = self.lock();
        Self::aborted(&s)?;
        if !self.virtual_mode {
            return Ok(s.signal[rank]);
        }
        s.clock[rank] = clock;
        loop {
            Self::aborted(&s)?;
            if Self::min_running(&s) == Some(rank) {
                s.waiting[rank] = false;
                return Ok(s.signal[rank]);
            }
            self.wake_min(&s);
            s.waiting[rank] = true;
            s = self.cvs[rank].wait(s).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub(crate) fn publish(&self, rank: usize, clock: f64) {
        if !self.virtual_mode {
            return;
        }
        let mut s = self.lock();
        s.clock[rank] = clock;
        self.wake_min(&s);
    }

    pub(crate) fn done(&self, rank: usize) {
        let mut s = self.lock();
        s.status[rank] = Status::Done;
        self.check_deadlock(&mut s, rank);
        self.wake_min(&s);
    }

    /// Collective barrier. Returns the release clock: the latest arrival, or
    /// zero when `reset` is set. `on_release` runs once, by the last arriver,
    /// before anyone leaves.
    pub(crate) fn barrier(
        &self,
        rank: usize,
        clock: f64,
        reset: bool,
        on_release: &dyn Fn(),
    ) -> Result<f64, FabricError> {
        let mut s = self.lock();
        Self::aborted(&s)?;
        let p = s.clock.len();
        s.arrived += 1;
        s.arrival_max = s.arrival_max.max(clock);
        s.clock[rank] = clock;
        if s.arrived == p {
            on_release();
            let t = if reset { 0.0 } else { s.arrival_max };
            s.arrived = 0;
            s.arrival_max = 0.0;
            s.released_at = t;
            s.generation += 1;
            for r in 0..p {
                s.status[r] = Status::Running;
                s.clock[r] = t;
            }
            for cv in &self.cvs {
                cv.notify_all();
            }
            return Ok(t);
        }
        let generation = s.generation;
        s.status[rank] = Status::Barrier;
        self.check_deadlock(&mut s, rank);
        self.wake_min(&s);
        let deadline = Instant::now() + self.timeout;
        while s.generation == generation {
            Self::aborted(&s)?;
            s = self.wait_until(s, rank, deadline, "barrier")?;
        }
        Ok(s.released_at)
    }

    fn wait_until<'a>(
        &self,
        s: MutexGuard<'a, State>,
        rank: usize,
        deadline: Instant,
        what: &'static str,
    ) -> Result<MutexGuard<'a, State>, FabricError> {
        if self.virtual_mode {
            // progress is guaranteed by deadlock detection
            return Ok(self.cvs[rank].wait(s).unwrap_or_else(|e| e.into_inner()));
        }
        let now = Instant::now();
        if now >= deadline {
            let mut s = s;
            self.abort_locked(&mut s, rank, FabricError::Timeout(what));
            return Err(FabricError::Timeout(what));
        }
        let (s, _) = self.cvs[rank]
            .wait_timeout(s, deadline - now)
            .unwrap_or_else(|e| e.into_inner());
        Ok(s)
    }

    /// Blocks `rank` until its queue signal moves past `seen` (virtual mode).
    pub(crate) fn block_on_queue(&self, rank: usize, seen: u64) -> Result<(), FabricError> {
        let mut s = self.lock();
        Self::aborted(&s)?;
        if s.signal[rank] != seen {
            return Ok(());
        }
        s.status[rank] = Status::Queue;
        self.check_deadlock(&mut s, rank);
        self.wake_min(&s);
        let deadline = Instant::now() + self.timeout;
        while s.status[rank] == Status::Queue {
            Self::aborted(&s)?;
            s = self.wait_until(s, rank, deadline, "queue wait")?;
        }
        Ok(())
    }

    /// A push to `owner`'s queue completed.
    pub(crate) fn notify_queue(&self, owner: usize) {
        let mut s = self.lock();
        s.signal[owner] += 1;
        if s.status[owner] == Status::Queue {
            s.status[owner] = Status::Running;
            self.cvs[owner].notify_all();
        }
    }
}
