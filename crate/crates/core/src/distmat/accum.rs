//! Remote accumulation into owned tiles through the owners' queues.
//!
//! A producer writes its contribution into one block of its own heap:
//! a header of six words `[consumed, i, j, rows, cols, stored]` followed by
//! the tile's encoded arrays, then pushes a pointer to the block onto the
//! owner's queue. The owner fetches the whole block with one get, adds it
//! into its accumulator and sets the consumed word with a put. Only then may
//! the producer free the block.

use std::collections::BTreeMap;

use crate::fabric::{GlobalPtr, RankCtx};
use crate::scalar::Scalar;

use super::{DistError, DistMatrix, TileCodec};

pub const CONTRIBUTION_HEADER: usize = 48;

fn word(b: &[u8], i: usize) -> u64 {
    u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap())
}

/// Producer side: contributions sent and not yet reclaimed.
#[derive(Debug, Default)]
pub struct Outbox {
    pending: Vec<GlobalPtr>,
    sent: u64,
}

impl Outbox {
    pub fn new() -> Self {
        Outbox::default()
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    /// Queues `tile` for accumulation into tile `(i, j)` of `mat`.
    pub fn send<T: Scalar, Tl: TileCodec<T>>(
        &mut self,
        ctx: &mut RankCtx<'_>,
        mat: &DistMatrix<T, Tl>,
        i: usize,
        j: usize,
        tile: &Tl,
    ) -> Result<(), DistError> {
        mat.layout().check(i, j)?;
        let (rows, cols) = tile.dims();
        let parts = tile.encode(mat.index_width())?;
        let body: usize = parts.iter().map(Vec::len).sum();
        let mut block = Vec::with_capacity(CONTRIBUTION_HEADER + body);
        for w in [0, i, j, rows, cols, tile.stored()] {
            block.extend_from_slice(&(w as u64).to_le_bytes());
        }
        for p in &parts {
            block.extend_from_slice(p);
        }
        let ptr = match ctx.alloc(block.len()) {
            Ok(p) => p,
            Err(_) => {
                self.reclaim(ctx)?;
                ctx.alloc(block.len())?
            }
        };
        ctx.write_local(&block, ptr)?;
        ctx.queue_push(mat.owner(i, j), ptr)?;
        self.pending.push(ptr);
        self.sent += 1;
        Ok(())
    }

    /// Frees every block the owner has marked consumed. Returns how many.
    pub fn reclaim(&mut self, ctx: &mut RankCtx<'_>) -> Result<usize, DistError> {
        let mut freed = 0;
        let mut keep = Vec::with_capacity(self.pending.len());
        for p in std::mem::take(&mut self.pending) {
            let mut flag = [0u8; 8];
            ctx.read_local(p.slice(0, 8), &mut flag)?;
            if u64::from_le_bytes(flag) != 0 {
                ctx.free(p)?;
                freed += 1;
            } else {
                keep.push(p);
            }
        }
        self.pending = keep;
        Ok(freed)
    }

    /// Collective: after a barrier every contribution has been consumed, so
    /// all blocks can be released.
    pub fn finish(mut self, ctx: &mut RankCtx<'_>) -> Result<(), DistError> {
        ctx.barrier()?;
        self.reclaim(ctx)?;
        if !self.pending.is_empty() {
            return Err(DistError::Corrupt(format!(
                "{} contributions never consumed",
                self.pending.len()
            )));
        }
        Ok(())
    }
}

/// Owner side: per owned tile, the running sum of received contributions
/// and how many have been applied.
#[derive(Debug)]
pub struct Inbox<Tl> {
    expected: usize,
    tiles: BTreeMap<(usize, usize), (Tl, usize)>,
    received: u64,
}

impl<Tl> Inbox<Tl> {
    pub fn received(&self) -> u64 {
        self.received
    }

    /// Every owned tile has received its expected count.
    pub fn complete(&self) -> bool {
        self.tiles.values().all(|(_, n)| *n == self.expected)
    }

    pub fn applied(&self, i: usize, j: usize) -> Option<usize> {
        self.tiles.get(&(i, j)).map(|(_, n)| *n)
    }

    pub fn into_tiles(self) -> BTreeMap<(usize, usize), Tl> {
        self.tiles.into_iter().map(|(k, (t, _))| (k, t)).collect()
    }
}

impl<Tl> Inbox<Tl> {
    /// Zero accumulators for every tile of `mat` this rank owns; each is
    /// expected to receive exactly `expected` contributions.
    pub fn new<T: Scalar>(mat: &DistMatrix<T, Tl>, expected: usize) -> Self
    where
        Tl: TileCodec<T>,
    {
        let tiles = mat
            .owned()
            .into_iter()
            .map(|(i, j)| {
                let (r, c) = mat.layout().tile_dims(i, j);
                ((i, j), (Tl::zeros(r, c), 0))
            })
            .collect();
        Inbox {
            expected,
            tiles,
            received: 0,
        }
    }

    fn apply<T: Scalar>(&mut self, ctx: &mut RankCtx<'_>, mat: &DistMatrix<T, Tl>, ptr: GlobalPtr) -> Result<(), DistError>
    where
        Tl: TileCodec<T>,
    {
        if ptr.len < CONTRIBUTION_HEADER {
            return Err(DistError::Corrupt(format!("contribution {ptr} too short")));
        }
        let block = ctx.get_vec(ptr)?;
        let (i, j) = (word(&block, 1) as usize, word(&block, 2) as usize);
        let (rows, cols, stored) = (word(&block, 3) as usize, word(&block, 4) as usize, word(&block, 5) as usize);
        let lens = Tl::part_lens(rows, cols, stored, mat.index_width());
        if CONTRIBUTION_HEADER + lens.iter().sum::<usize>() != block.len() {
            return Err(DistError::Corrupt(format!("contribution {ptr} has inconsistent length")));
        }
        let mut parts = Vec::with_capacity(lens.len());
        let mut at = CONTRIBUTION_HEADER;
        for l in lens {
            parts.push(&block[at..at + l]);
            at += l;
        }
        let tile = Tl::decode(rows, cols, &parts, mat.index_width())?;
        let expected = self.expected;
        let slot = self.tiles.get_mut(&(i, j)).ok_or(DistError::UnexpectedTile { i, j })?;
        if slot.1 >= expected {
            return Err(DistError::Overrun { i, j, expected });
        }
        slot.0.accumulate(&tile)?;
        slot.1 += 1;
        self.received += 1;
        ctx.put(&1u64.to_le_bytes(), ptr.slice(0, 8))?;
        Ok(())
    }

    /// Counts a contribution computed by the owner itself; no fabric traffic.
    pub fn add_local<T: Scalar>(&mut self, i: usize, j: usize, tile: &Tl) -> Result<(), DistError>
    where
        Tl: TileCodec<T>,
    {
        let expected = self.expected;
        let slot = self.tiles.get_mut(&(i, j)).ok_or(DistError::UnexpectedTile { i, j })?;
        if slot.1 >= expected {
            return Err(DistError::Overrun { i, j, expected });
        }
        slot.0.accumulate(tile)?;
        slot.1 += 1;
        self.received += 1;
        Ok(())
    }

    /// Applies whatever is ready in this rank's queue without blocking.
    pub fn poll<T: Scalar>(&mut self, ctx: &mut RankCtx<'_>, mat: &DistMatrix<T, Tl>) -> Result<usize, DistError>
    where
        Tl: TileCodec<T>,
    {
        let mut n = 0;
        while let Some(ptr) = ctx.queue_pop()? {
            self.apply(ctx, mat, ptr)?;
            n += 1;
        }
        Ok(n)
    }

    /// Blocks until every owned tile has its expected count.
    pub fn drain<T: Scalar>(&mut self, ctx: &mut RankCtx<'_>, mat: &DistMatrix<T, Tl>) -> Result<(), DistError>
    where
        Tl: TileCodec<T>,
    {
        while !self.complete() {
            let ptr = ctx.queue_pop_wait()?;
            self.apply(ctx, mat, ptr)?;
        }
        Ok(())
    }
}
