use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use super::{FabricError, GlobalPtr};

const WORD: usize = 8;

fn round_up(n: usize) -> usize {
    n.div_ceil(WORD) * WORD
}

/// First-fit allocator over one rank's byte range, coalescing on free.
#[derive(Debug)]
struct Allocator {
    /// offset -> length of free blocks
    free: BTreeMap<usize, usize>,
    /// offset -> (rounded length) of live blocks
    live: BTreeMap<usize, usize>,
    free_bytes: usize,
}

impl Allocator {
    fn new(capacity: usize) -> Self {
        let mut free = BTreeMap::new();
        if capacity > 0 {
            free.insert(0, capacity);
        }
        Allocator {
            free,
            live: BTreeMap::new(),
            free_bytes: capacity,
        }
    }

    fn alloc(&mut self, nbytes: usize) -> Option<usize> {
        let need = round_up(nbytes);
        let (&off, &len) = self.free.iter().find(|(_, &len)| len >= need)?;
        self.free.remove(&off);
        if len > need {
            self.free.insert(off + need, len - need);
        }
        self.live.insert(off, need);
        self.free_bytes -= need;
        Some(off)
    }

    fn release(&mut self, off: usize) -> Option<usize> {
        let len = self.live.remove(&off)?;
        self.free_bytes += len;
        let mut start = off;
        let mut size = len;
        if let Some((&prev, &plen)) = self.free.range(..off).next_back() {
            if prev + plen == off {
                self.free.remove(&prev);
                start = prev;
                size += plen;
            }
        }
        if let Some(&nlen) = self.free.get(&(off + len)) {
            self.free.remove(&(off + len));
            size += nlen;
        }
        self.free.insert(start, size);
        Some(len)
    }

    fn contains(&self, off: usize, len: usize) -> bool {
        match self.live.range(..=off).next_back() {
            Some((&start, &size)) => off + len <= start + size,
            None => false,
        }
    }
}

/// One rank's symmetric heap: word-addressed atomic storage plus allocator.
pub(crate) struct Heap {
    rank: usize,
    words: Box<[AtomicU64]>,
    alloc: Mutex<Allocator>,
}

impl Heap {
    pub(crate) fn new(rank: usize, capacity: usize) -> Self {
        let capacity = round_up(capacity);
        let words: Vec<AtomicU64> = (0..capacity / WORD).map(|_| AtomicU64::new(0)).collect();
        Heap {
            rank,
            words: words.into_boxed_slice(),
            alloc: Mutex::new(Allocator::new(capacity)),
        }
    }

    pub(crate) fn capacity(&self) -> usize {
        self.words.len() * WORD
    }

    pub(crate) fn free_bytes(&self) -> usize {
        self.alloc.lock().unwrap().free_bytes
    }

    pub(crate) fn live_allocations(&self) -> usize {
        self.alloc.lock().unwrap().live.len()
    }

    pub(crate) fn alloc(&self, nbytes: usize) -> Result<GlobalPtr, FabricError> {
        if nbytes == 0 {
            return Ok(GlobalPtr::null(self.rank));
        }
        let mut a = self.alloc.lock().unwrap();
        let off = a.alloc(nbytes).ok_or(FabricError::HeapExhausted {
            rank: self.rank,
            requested: nbytes,
            remaining: a.free_bytes,
        })?;
        drop(a);
        for w in &self.words[off / WORD..(off + round_up(nbytes)) / WORD] {
            w.store(0, Ordering::Relaxed);
        }
        Ok(GlobalPtr {
            rank: self.rank,
            offset: off,
            len: nbytes,
        })
    }

    pub(crate) fn free(&self, ptr: GlobalPtr) -> Result<(), FabricError> {
        if ptr.len == 0 {
            return Ok(());
        }
        let mut a = self.alloc.lock().unwrap();
        match a.live.get(&ptr.offset) {
            Some(&len) if round_up(ptr.len) == len => {
                a.release(ptr.offset);
                Ok(())
            }
            _ => Err(FabricError::DanglingPointer(ptr)),
        }
    }

    /// Checks that `ptr` lies inside one live allocation.
    pub(crate) fn check(&self, ptr: GlobalPtr) -> Result<(), FabricError> {
        if ptr.len == 0 {
            return Ok(());
        }
        if ptr.offset + ptr.len > self.capacity() {
            return Err(FabricError::OutOfBounds(ptr));
        }
        if self.alloc.lock().unwrap().contains(ptr.offset, ptr.len) {
            Ok(())
        } else {
            Err(FabricError::DanglingPointer(ptr))
        }
    }

    /// Copies bytes in with word-level atomicity. Partial words at either end
    /// are merged with a compare-and-swap loop so neighbouring bytes are kept.
    pub(crate) fn write(&self, offset: usize, src: &[u8]) {
        let mut pos = 0;
        while pos < src.len() {
            let addr = offset + pos;
            let word = addr / WORD;
            let lo = addr % WORD;
            let take = (WORD - lo).min(src.len() - pos);
            let cell = &self.words[word];
            if take == WORD {
                let v = u64::from_le_bytes(src[pos..pos + WORD].try_into().unwrap());
                cell.store(v, Ordering::Release);
            } else {
                let mut cur = cell.load(Ordering::Acquire);
                loop {
                    let mut bytes = cur.to_le_bytes();
                    bytes[lo..lo + take].copy_from_slice(&src[pos..pos + take]);
                    match cell.compare_exchange_weak(
                        cur,
                        u64::from_le_bytes(bytes),
                        Ordering::AcqRel,
                        Ordering::Acquire,
                    ) {
                        Ok(_) => break,
                        Err(actual) => cur = actual,
                    }
                }
            }
            pos += take;
        }
    }

    pub(crate) fn read(&self, offset: usize, dst: &mut [u8]) {
        let mut pos = 0;
        while pos < dst.len() {
            let addr = offset + pos;
            let lo = addr % WORD;
            let take = (WORD - lo).min(dst.len() - pos);
            let bytes = self.words[addr / WORD].load(Ordering::Acquire).to_le_bytes();
            dst[pos..pos + take].copy_from_slice(&bytes[lo..lo + take]);
            pos += take;
        }
    }

    pub(crate) fn word(&self, offset: usize) -> &AtomicU64 {
        debug_assert_eq!(offset % WORD, 0);
        &self.words[offset / WORD]
    }
}
