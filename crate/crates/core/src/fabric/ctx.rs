use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clock::{Event, VClock};
use super::{Fabric, FabricError, GlobalPtr, Schedule, QUEUE_HEADER, SLOT_WORDS, UNLABELED};

/// Operation counts for one rank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankStats {
    pub puts: u64,
    pub gets: u64,
    pub atomics: u64,
    pub queue_pushes: u64,
    pub queue_pops: u64,
    pub barriers: u64,
}

/// Outstanding non-blocking get. The data is valid only after
/// [`RankCtx::wait`]; waiting more than once is harmless.
#[derive(Debug)]
pub struct TransferHandle {
    id: u64,
    src: GlobalPtr,
    data: Result<Vec<u8>, FabricError>,
    issued: bool,
    waited: bool,
}

impl TransferHandle {
    pub fn src(&self) -> GlobalPtr {
        self.src
    }

    pub fn is_complete(&self) -> bool {
        self.waited
    }

    /// Bytes of a waited handle.
    pub fn into_bytes(self) -> Result<Vec<u8>, FabricError> {
        assert!(self.waited, "transfer handle consumed before wait");
        self.data
    }
}

/// One rank's view of the fabric. All communication goes through here.
pub struct RankCtx<'f> {
    fab: &'f Fabric,
    rank: usize,
    label: u32,
    vc: VClock,
    events: Vec<Event>,
    stats: RankStats,
    next_handle: u64,
    jitter: Option<ChaCha8Rng>,
    marks: Vec<(String, f64)>,
    started: Instant,
}

impl<'f> RankCtx<'f> {
    pub(crate) fn new(fab: &'f Fabric, rank: usize) -> Self {
        let jitter = match fab.cfg.schedule {
            Schedule::Free { jitter_seed: Some(seed) } => {
                Some(ChaCha8Rng::seed_from_u64(seed ^ (rank as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
            }
            _ => None,
        };
        RankCtx {
            fab,
            rank,
            label: UNLABELED,
            vc: VClock::default(),
            events: Vec::new(),
            stats: RankStats::default(),
            next_handle: 0,
            jitter,
            marks: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ranks(&self) -> usize {
        self.fab.cfg.ranks
    }

    pub fn fabric(&self) -> &'f Fabric {
        self.fab
    }

    pub fn set_label(&mut self, label: u32) {
        self.label = label;
    }

    pub fn label(&self) -> u32 {
        self.label
    }

    /// Current virtual time of this rank.
    pub fn clock(&self) -> f64 {
        self.vc.clock
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn stats(&self) -> RankStats {
        self.stats
    }

    /// Records a named timestamp (virtual clock).
    pub fn mark(&mut self, name: impl Into<String>) {
        self.marks.push((name.into(), self.vc.clock));
    }

    pub fn marks(&self) -> &[(String, f64)] {
        &self.marks
    }

    /// Wall-clock seconds since this context started or last reset.
    pub fn wall_elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn virtual_mode(&self) -> bool {
        self.fab.sched.is_virtual()
    }

    fn perturb(&mut self) {
        if let Some(rng) = self.jitter.as_mut() {
            let roll: u32 = rng.gen_range(0..64);
            if roll == 0 {
                std::thread::sleep(Duration::from_micros(rng.gen_range(10..200)));
            } else if roll < 8 {
                std::thread::yield_now();
            }
        }
    }

    fn begin(&mut self) -> Result<u64, FabricError> {
        self.perturb();
        self.fab.sched.sync(self.rank, self.vc.clock)
    }

    fn end(&mut self) {
        self.fab.sched.publish(self.rank, self.vc.clock);
    }

    fn check_remote(&self, ptr: GlobalPtr, len: usize) -> Result<(), FabricError> {
        if ptr.len != len {
            return Err(FabricError::LengthMismatch {
                expected: ptr.len,
                got: len,
            });
        }
        self.fab.heap(ptr.rank)?.check(ptr)
    }

    fn check_local(&self, ptr: GlobalPtr, len: usize) -> Result<(), FabricError> {
        if ptr.rank != self.rank {
            return Err(FabricError::NotOwner {
                caller: self.rank,
                owner: ptr.rank,
            });
        }
        self.check_remote(ptr, len)
    }

    pub fn alloc(&mut self, nbytes: usize) -> Result<GlobalPtr, FabricError> {
        self.fab.alloc(self.rank, nbytes)
    }

    pub fn free(&mut self, ptr: GlobalPtr) -> Result<(), FabricError> {
        self.fab.free(ptr)
    }

    fn log_transfer(&mut self, peer: usize, bytes: usize, put: bool) {
        let link = self.fab.link(self.rank, peer);
        self.vc.transfer(&self.fab.cfg.cost, link, bytes as u64);
        let bytes = bytes as u64;
        if put {
            self.fab.traffic.record_put(self.rank, peer, self.label, bytes as usize);
            self.events.push(Event::Put { peer, bytes });
            self.stats.puts += 1;
        } else {
            self.fab.traffic.record_get(self.rank, peer, self.label, bytes as usize);
            self.events.push(Event::Get { peer, bytes });
            self.stats.gets += 1;
        }
    }

    /// Copies `src` into the remote region `dst`.
    pub fn put(&mut self, src: &[u8], dst: GlobalPtr) -> Result<(), FabricError> {
        self.check_remote(dst, src.len())?;
        self.begin()?;
        self.fab.heaps[dst.rank].write(dst.offset, src);
        self.log_transfer(dst.rank, src.len(), true);
        self.end();
        Ok(())
    }

    /// Copies the remote region `src` into `dst`.
    pub fn get(&mut self, src: GlobalPtr, dst: &mut [u8]) -> Result<(), FabricError> {
        self.check_remote(src, dst.len())?;
        self.begin()?;
        self.fab.heaps[src.rank].read(src.offset, dst);
        self.log_transfer(src.rank, dst.len(), false);
        self.end();
        Ok(())
    }

    pub fn get_vec(&mut self, src: GlobalPtr) -> Result<Vec<u8>, FabricError> {
        let mut out = vec![0u8; src.len];
        self.get(src, &mut out)?;
        Ok(out)
    }

    /// Starts a get whose data becomes usable after [`RankCtx::wait`]. Errors
    /// are reported by `wait`.
    pub fn get_nb(&mut self, src: GlobalPtr) -> Result<TransferHandle, FabricError> {
        let id = self.next_handle;
        self.next_handle += 1;
        if let Err(e) = self.check_remote(src, src.len) {
            return Ok(TransferHandle {
                id,
                src,
                data: Err(e),
                issued: false,
                waited: false,
            });
        }
        self.begin()?;
        let mut buf = vec![0u8; src.len];
        self.fab.heaps[src.rank].read(src.offset, &mut buf);
        let link = self.fab.link(self.rank, src.rank);
        self.vc.issue(&self.fab.cfg.cost, link, src.len as u64, id);
        self.fab.traffic.record_get(self.rank, src.rank, self.label, src.len);
        self.events.push(Event::GetNb {
            peer: src.rank,
            bytes: src.len as u64,
            handle: id,
        });
        self.stats.gets += 1;
        self.end();
        Ok(TransferHandle {
            id,
            src,
            data: Ok(buf),
            issued: true,
            waited: false,
        })
    }

    pub fn wait<'h>(&mut self, h: &'h mut TransferHandle) -> Result<&'h [u8], FabricError> {
        if !h.waited {
            h.waited = true;
            if h.issued {
                self.vc.wait(h.id);
                self.events.push(Event::Wait { handle: h.id });
            }
        }
        match &h.data {
            Ok(v) => Ok(v),
            Err(e) => Err(e.clone()),
        }
    }

    /// Atomically adds `delta` to the 8-byte integer at `cell` and returns the
    /// previous value.
    pub fn fetch_add(&mut self, cell: GlobalPtr, delta: i64) -> Result<i64, FabricError> {
        if cell.len != 8 || cell.offset % 8 != 0 {
            return Err(FabricError::Misaligned(cell));
        }
        self.check_remote(cell, 8)?;
        self.begin()?;
        let prev = self.atomic_add(cell.rank, cell.offset, delta);
        self.end();
        Ok(prev)
    }

    fn atomic_add(&mut self, target: usize, offset: usize, delta: i64) -> i64 {
        let prev = self.fab.heaps[target]
            .word(offset)
            .fetch_add(delta as u64, Ordering::AcqRel) as i64;
        let link = self.fab.link(self.rank, target);
        self.vc.atomic(&self.fab.cfg.cost, link);
        self.fab.traffic.record_atomic(self.rank, target, self.label);
        self.events.push(Event::Atomic { peer: target });
        self.stats.atomics += 1;
        prev
    }

    /// Reads this rank's own memory without any fabric traffic.
    pub fn read_local(&self, src: GlobalPtr, dst: &mut [u8]) -> Result<(), FabricError> {
        self.check_local(src, dst.len())?;
        self.fab.heaps[self.rank].read(src.offset, dst);
        Ok(())
    }

    /// Writes this rank's own memory without any fabric traffic.
    pub fn write_local(&self, src: &[u8], dst: GlobalPtr) -> Result<(), FabricError> {
        self.check_local(dst, src.len())?;
        self.fab.heaps[self.rank].write(dst.offset, src);
        Ok(())
    }

    /// Local multiply cost.
    pub fn compute(&mut self, flops: u64, bytes: u64) {
        self.vc.compute(&self.fab.cfg.cost, flops, bytes);
        self.events.push(Event::Compute { flops, bytes });
    }

    /// Injected delay: advances the virtual clock, and under the free
    /// schedule also sleeps for real.
    pub fn delay(&mut self, secs: f64) {
        if secs <= 0.0 {
            return;
        }
        if !self.virtual_mode() {
            std::thread::sleep(Duration::from_secs_f64(secs));
        }
        self.vc.delay(secs);
        self.events.push(Event::Delay { secs });
    }

    pub fn barrier(&mut self) -> Result<(), FabricError> {
        self.perturb();
        let t = self.fab.sched.barrier(self.rank, self.vc.clock, false, &|| {})?;
        self.vc.advance_to(t);
        self.events.push(Event::Barrier);
        self.stats.barriers += 1;
        Ok(())
    }

    /// Collective: barrier, then reset clocks, event logs, statistics, marks
    /// and the shared traffic log so that what follows is measured alone.
    pub fn begin_measurement(&mut self) -> Result<(), FabricError> {
        let traffic = &self.fab.traffic;
        self.fab.sched.barrier(self.rank, self.vc.clock, true, &|| traffic.clear())?;
        self.vc = VClock::default();
        self.events.clear();
        self.stats = RankStats::default();
        self.marks.clear();
        self.label = UNLABELED;
        self.started = Instant::now();
        Ok(())
    }

    /// Collective exchange of one value per rank, in rank order. Moves no
    /// fabric traffic (control plane) but synchronizes like two barriers.
    pub fn allgather<T: Clone + Send + 'static>(&mut self, value: T) -> Result<Vec<T>, FabricError> {
        self.fab.gather.lock().unwrap()[self.rank] = Some(Box::new(value));
        self.barrier()?;
        let out = {
            let slots = self.fab.gather.lock().unwrap();
            slots
                .iter()
                .map(|s| {
                    s.as_ref()
                        .and_then(|b| b.downcast_ref::<T>())
                        .cloned()
                        .ok_or_else(|| FabricError::InvalidConfig("allgather called with mismatched types".into()))
                })
                .collect::<Result<Vec<T>, _>>()
        };
        self.barrier()?;
        self.fab.gather.lock().unwrap()[self.rank] = None;
        out
    }

    /// Value from rank `root` delivered to everyone.
    pub fn broadcast<T: Clone + Send + 'static>(&mut self, root: usize, value: Option<T>) -> Result<T, FabricError> {
        let all = self.allgather(value)?;
        all.into_iter()
            .nth(root)
            .flatten()
            .ok_or_else(|| FabricError::InvalidConfig(format!("broadcast root {root} supplied no value")))
    }

    fn queue_ptr(&self, owner: usize) -> Result<GlobalPtr, FabricError> {
        self.fab.queues.get(owner).copied().ok_or(FabricError::InvalidRank {
            rank: owner,
            ranks: self.fab.cfg.ranks,
        })
    }

    /// Appends `v` to `owner`'s queue: reserve a slot with a fetch-add on the
    /// tail, check the head for room, put the entry, then put the ready flag.
    pub fn queue_push(&mut self, owner: usize, v: GlobalPtr) -> Result<(), FabricError> {
        let q = self.queue_ptr(owner)?;
        let cap = self.fab.cfg.queue_capacity;
        self.begin()?;
        let seq = self.atomic_add(owner, q.offset + 8, 1) as u64;
        let fab = self.fab;
        let heap = &fab.heaps[owner];
        let mut head = [0u8; 8];
        heap.read(q.offset, &mut head);
        self.log_transfer(owner, 8, false);
        if seq - u64::from_le_bytes(head) >= cap as u64 {
            self.end();
            return Err(FabricError::QueueFull { owner, capacity: cap });
        }
        let slot = q.offset + QUEUE_HEADER + (seq as usize % cap) * SLOT_WORDS * 8;
        let mut entry = [0u8; 32];
        for (i, w) in [v.rank as u64, v.offset as u64, v.len as u64, self.rank as u64]
            .into_iter()
            .enumerate()
        {
            entry[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
        }
        heap.write(slot, &entry);
        self.log_transfer(owner, 32, true);
        // the flag put's completion time and event index travel with it
        let link = self.fab.link(self.rank, owner);
        let mut probe = self.vc.clone();
        let visible = probe.transfer(&self.fab.cfg.cost, link, 24);
        let event = self.events.len();
        let mut flag = [0u8; 24];
        flag[..8].copy_from_slice(&visible.to_bits().to_le_bytes());
        flag[8..16].copy_from_slice(&(event as u64).to_le_bytes());
        flag[16..].copy_from_slice(&(seq + 1).to_le_bytes());
        heap.write(slot + 32, &flag);
        self.log_transfer(owner, 24, true);
        debug_assert_eq!(self.vc.clock, visible);
        self.stats.queue_pushes += 1;
        self.end();
        if self.virtual_mode() {
            self.fab.sched.notify_queue(owner);
        }
        Ok(())
    }

    /// Head entry of this rank's queue if it is ready: `(ptr, producer,
    /// visible_at, producer_event)`.
    fn peek(&self) -> Option<(GlobalPtr, usize, f64, usize)> {
        let q = self.fab.queues[self.rank];
        let cap = self.fab.cfg.queue_capacity;
        let heap = &self.fab.heaps[self.rank];
        let head = heap.word(q.offset).load(Ordering::Acquire);
        let slot = q.offset + QUEUE_HEADER + (head as usize % cap) * SLOT_WORDS * 8;
        if heap.word(slot + 48).load(Ordering::Acquire) != head + 1 {
            return None;
        }
        let w = |i: usize| heap.word(slot + i * 8).load(Ordering::Acquire);
        Some((
            GlobalPtr {
                rank: w(0) as usize,
                offset: w(1) as usize,
                len: w(2) as usize,
            },
            w(3) as usize,
            f64::from_bits(w(4)),
            w(5) as usize,
        ))
    }

    fn take_head(&mut self, producer: usize, visible: f64, event: usize) {
        let q = self.fab.queues[self.rank];
        let cap = self.fab.cfg.queue_capacity;
        let fab = self.fab;
        let heap = &fab.heaps[self.rank];
        let head = heap.word(q.offset).load(Ordering::Acquire);
        let slot = q.offset + QUEUE_HEADER + (head as usize % cap) * SLOT_WORDS * 8;
        heap.word(slot + 48).store(0, Ordering::Release);
        heap.word(q.offset).store(head + 1, Ordering::Release);
        self.vc.advance_to(visible);
        self.events.push(Event::QueueRecv { producer, event });
        self.stats.queue_pops += 1;
    }

    /// Takes the next ready entry of this rank's own queue, if any. Under the
    /// virtual schedule an entry is only ready once its push has completed in
    /// virtual time.
    pub fn queue_pop(&mut self) -> Result<Option<GlobalPtr>, FabricError> {
        self.begin()?;
        let out = match self.peek() {
            Some((_, _, visible, _)) if self.virtual_mode() && visible > self.vc.clock => None,
            Some((ptr, producer, visible, event)) => {
                self.take_head(producer, visible, event);
                Some(ptr)
            }
            None => None,
        };
        self.end();
        Ok(out)
    }

    /// Blocks until an entry is available, then takes it.
    pub fn queue_pop_wait(&mut self) -> Result<GlobalPtr, FabricError> {
        let deadline = Instant::now() + self.fab.cfg.timeout;
        loop {
            let seen = self.begin()?;
            if let Some((ptr, producer, visible, event)) = self.peek() {
                self.take_head(producer, visible, event);
                self.end();
                return Ok(ptr);
            }
            self.end();
            if self.virtual_mode() {
                self.fab.sched.block_on_queue(self.rank, seen)?;
            } else {
                if Instant::now() >= deadline {
                    self.fab.sched.abort(self.rank, FabricError::Timeout("queue wait"));
                    return Err(FabricError::Timeout("queue wait"));
                }
                std::thread::sleep(Duration::from_micros(20));
            }
        }
    }

    /// Queue entries pushed to `owner` and not yet popped. Reads the
    /// counters directly; for tests and diagnostics only.
    pub fn queue_len(&self, owner: usize) -> Result<u64, FabricError> {
        let q = self.queue_ptr(owner)?;
        let heap = &self.fab.heaps[owner];
        let head = heap.word(q.offset).load(Ordering::Acquire);
        let tail = heap.word(q.offset + 8).load(Ordering::Acquire);
        Ok(tail - head)
    }
}
