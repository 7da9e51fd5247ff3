//! Tiled matrices distributed over the fabric.
//!
//! A matrix is cut into `tm x tn` tiles (edge tiles shrink) and each tile is
//! stored on one owner rank as one byte array (dense) or three (sparse:
//! values, row pointer, column indices). Every rank keeps a full directory of
//! global pointers, so any rank can fetch any tile with one-sided gets.

mod accum;
mod codec;

pub use accum::{Inbox, Outbox, CONTRIBUTION_HEADER};
pub use codec::TileCodec;

use std::marker::PhantomData;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{FabricError, GlobalPtr, RankCtx, TransferHandle};
use crate::kernels::{CsrTile, DenseTile, KernelError};
use crate::scalar::{IndexWidth, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("tile ({i}, {j}) outside {tiles_m}x{tiles_n} tile grid")]
    OutOfRange {
        i: usize,
        j: usize,
        tiles_m: usize,
        tiles_n: usize,
    },
    #[error("rank {rank} does not own tile ({i}, {j}) (owner {owner})")]
    NotOwner {
        rank: usize,
        i: usize,
        j: usize,
        owner: usize,
    },
    #[error("corrupt tile data: {0}")]
    Corrupt(String),
    #[error("index {value} does not fit in {width} bytes")]
    IndexOverflow { value: usize, width: usize },
    #[error("tile ({i}, {j}) received more than {expected} contributions")]
    Overrun { i: usize, j: usize, expected: usize },
    #[error("contribution for tile ({i}, {j}) arrived at a rank that does not own it")]
    UnexpectedTile { i: usize, j: usize },
    #[error("tile ({i}, {j}) changed size or pattern; use replace_tile")]
    PatternChanged { i: usize, j: usize },
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("collective call with mismatched arguments: {0}")]
    NotCollective(String),
}

/// Logical `pr x pc` processor grid with row-major cyclic tile ownership.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcGrid {
    pub pr: usize,
    pub pc: usize,
}

impl ProcGrid {
    pub fn new(pr: usize, pc: usize) -> Result<Self, DistError> {
        if pr == 0 || pc == 0 {
            return Err(DistError::Layout(format!("grid {pr}x{pc} is empty")));
        }
        Ok(ProcGrid { pr, pc })
    }

    /// `sqrt(p) x sqrt(p)`; fails unless `p` is a perfect square.
    pub fn square(p: usize) -> Result<Self, DistError> {
        let r = (p as f64).sqrt().round() as usize;
        if r * r != p || p == 0 {
            return Err(DistError::Layout(format!("{p} ranks do not form a square grid")));
        }
        ProcGrid::new(r, r)
    }

    /// The most nearly square factorization `pr x pc` with `pr <= pc`.
    pub fn near_square(p: usize) -> Result<Self, DistError> {
        if p == 0 {
            return Err(DistError::Layout("zero ranks".into()));
        }
        let mut pr = (p as f64).sqrt().floor() as usize;
        while p % pr != 0 {
            pr -= 1;
        }
        ProcGrid::new(pr, p / pr)
    }

    pub fn ranks(&self) -> usize {
        self.pr * self.pc
    }

    pub fn is_square(&self) -> bool {
        self.pr == self.pc
    }

    /// Owner of tile `(i, j)`: `(i mod pr) * pc + (j mod pc)`.
    pub fn owner(&self, i: usize, j: usize) -> usize {
        (i % self.pr) * self.pc + (j % self.pc)
    }

    /// `(grid row, grid column)` of a rank.
    pub fn coords(&self, rank: usize) -> (usize, usize) {
        (rank / self.pc, rank % self.pc)
    }
}

/// Global dimensions and tile dimensions of a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileLayout {
    pub rows: usize,
    pub cols: usize,
    pub tm: usize,
    pub tn: usize,
}

impl TileLayout {
    pub fn new(rows: usize, cols: usize, tm: usize, tn: usize) -> Result<Self, DistError> {
        if rows == 0 || cols == 0 || tm == 0 || tn == 0 {
            return Err(DistError::Layout(format!(
                "{rows}x{cols} matrix with {tm}x{tn} tiles"
            )));
        }
        Ok(TileLayout { rows, cols, tm, tn })
    }

    /// Layout with (at most) `tiles_m x tiles_n` tiles of equal size, except
    /// for smaller edge tiles.
    pub fn with_tile_counts(rows: usize, cols: usize, tiles_m: usize, tiles_n: usize) -> Result<Self, DistError> {
        if tiles_m == 0 || tiles_n == 0 {
            return Err(DistError::Layout("tile counts must be positive".into()));
        }
        TileLayout::new(rows, cols, rows.div_ceil(tiles_m).max(1), cols.div_ceil(tiles_n).max(1))
    }

    pub fn tiles_m(&self) -> usize {
        self.rows.div_ceil(self.tm)
    }

    pub fn tiles_n(&self) -> usize {
        self.cols.div_ceil(self.tn)
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_m() * self.tiles_n()
    }

    pub fn tile_rows(&self, i: usize) -> usize {
        self.tm.min(self.rows - i * self.tm)
    }

    pub fn tile_cols(&self, j: usize) -> usize {
        self.tn.min(self.cols - j * self.tn)
    }

    pub fn tile_dims(&self, i: usize, j: usize) -> (usize, usize) {
        (self.tile_rows(i), self.tile_cols(j))
    }

    pub fn check(&self, i: usize, j: usize) -> Result<(), DistError> {
        if i >= self.tiles_m() || j >= self.tiles_n() {
            return Err(DistError::OutOfRange {
                i,
                j,
                tiles_m: self.tiles_m(),
                tiles_n: self.tiles_n(),
            });
        }
        Ok(())
    }
}

/// Directory entry: one pointer per stored array plus the stored count
/// (nonzeros for sparse tiles).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileEntry {
    pub parts: Vec<GlobalPtr>,
    pub stored: usize,
}

impl TileEntry {
    pub fn bytes(&self) -> usize {
        self.parts.iter().map(|p| p.len).sum()
    }
}

/// A distributed matrix whose tiles have representation `Tl`.
#[derive(Debug)]
pub struct DistMatrix<T, Tl> {
    layout: TileLayout,
    grid: ProcGrid,
    idx: IndexWidth,
    rank: usize,
    dir: Vec<TileEntry>,
    pending_updates: Vec<(usize, TileEntry)>,
    pending_free: Vec<TileEntry>,
    _tile: PhantomData<fn() -> (T, Tl)>,
}

pub type DistDense<T> = DistMatrix<T, DenseTile<T>>;
pub type DistSparse<T> = DistMatrix<T, CsrTile<T>>;

/// In-flight non-blocking tile fetch.
#[derive(Debug)]
pub struct TileFuture {
    i: usize,
    j: usize,
    handles: Vec<TransferHandle>,
}

impl TileFuture {
    pub fn coords(&self) -> (usize, usize) {
        (self.i, self.j)
    }
}

impl<T: Scalar, Tl: TileCodec<T>> DistMatrix<T, Tl> {
    /// Collective construction. Every rank calls this with identical layout
    /// and grid; `tile_of(i, j)` is evaluated only for tiles the calling rank
    /// owns.
    pub fn build_with(
        ctx: &mut RankCtx<'_>,
        layout: TileLayout,
        grid: ProcGrid,
        idx: IndexWidth,
        mut tile_of: impl FnMut(usize, usize) -> Tl,
    ) -> Result<Self, DistError> {
        if grid.ranks() != ctx.ranks() {
            return Err(DistError::Layout(format!(
                "{}x{} grid on {} ranks",
                grid.pr,
                grid.pc,
                ctx.ranks()
            )));
        }
        let rank = ctx.rank();
        let mut mine = Vec::new();
        for i in 0..layout.tiles_m() {
            for j in 0..layout.tiles_n() {
                if grid.owner(i, j) != rank {
                    continue;
                }
                let tile = tile_of(i, j);
                if tile.dims() != layout.tile_dims(i, j) {
                    return Err(KernelError::dims("build", tile.dims(), layout.tile_dims(i, j)).into());
                }
                mine.push((i * layout.tiles_n() + j, store(ctx, &tile, idx)?));
            }
        }
        let all = ctx.allgather((layout, grid, idx, mine))?;
        let mut dir = vec![
            TileEntry {
                parts: Vec::new(),
                stored: 0
            };
            layout.tile_count()
        ];
        for (r, (l, g, w, entries)) in all.into_iter().enumerate() {
            if l != layout || g != grid || w != idx {
                return Err(DistError::NotCollective(format!(
                    "rank {r} built {l:?} on {g:?}, rank {rank} built {layout:?} on {grid:?}"
                )));
            }
            for (t, e) in entries {
                dir[t] = e;
            }
        }
        Ok(DistMatrix {
            layout,
            grid,
            idx,
            rank,
            dir,
            pending_updates: Vec::new(),
            pending_free: Vec::new(),
            _tile: PhantomData,
        })
    }

    /// Collective construction from the full row-major tile list, which
    /// every rank can see.
    pub fn scatter(
        ctx: &mut RankCtx<'_>,
        layout: TileLayout,
        grid: ProcGrid,
        idx: IndexWidth,
        tiles: &[Tl],
    ) -> Result<Self, DistError> {
        if tiles.len() != layout.tile_count() {
            return Err(DistError::Layout(format!(
                "{} tiles for a {}x{} tile grid",
                tiles.len(),
                layout.tiles_m(),
                layout.tiles_n()
            )));
        }
        let n = layout.tiles_n();
        Self::build_with(ctx, layout, grid, idx, |i, j| tiles[i * n + j].clone())
    }

    /// Collective construction of an all-zero matrix.
    pub fn zeros(ctx: &mut RankCtx<'_>, layout: TileLayout, grid: ProcGrid, idx: IndexWidth) -> Result<Self, DistError> {
        Self::build_with(ctx, layout, grid, idx, |i, j| {
            let (r, c) = layout.tile_dims(i, j);
            Tl::zeros(r, c)
        })
    }

    pub fn layout(&self) -> &TileLayout {
        &self.layout
    }

    pub fn grid(&self) -> &ProcGrid {
        &self.grid
    }

    pub fn index_width(&self) -> IndexWidth {
        self.idx
    }

    pub fn tiles_m(&self) -> usize {
        self.layout.tiles_m()
    }

    pub fn tiles_n(&self) -> usize {
        self.layout.tiles_n()
    }

    pub fn owner(&self, i: usize, j: usize) -> usize {
        self.grid.owner(i, j)
    }

    pub fn entry(&self, i: usize, j: usize) -> Result<&TileEntry, DistError> {
        self.layout.check(i, j)?;
        Ok(&self.dir[i * self.layout.tiles_n() + j])
    }

    /// Stored entries of tile `(i, j)` as recorded in this rank's directory.
    pub fn stored(&self, i: usize, j: usize) -> Result<usize, DistError> {
        Ok(self.entry(i, j)?.stored)
    }

    /// Tiles owned by `rank`, row-major.
    pub fn owned_by(&self, rank: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.tiles_m() {
            for j in 0..self.tiles_n() {
                if self.owner(i, j) == rank {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn owned(&self) -> Vec<(usize, usize)> {
        self.owned_by(self.rank)
    }

    fn check_owner(&self, i: usize, j: usize) -> Result<(), DistError> {
        self.layout.check(i, j)?;
        let owner = self.owner(i, j);
        if owner != self.rank {
            return Err(DistError::NotOwner {
                rank: self.rank,
                i,
                j,
                owner,
            });
        }
        Ok(())
    }

    /// Private copy of tile `(i, j)`: one get per stored array.
    pub fn get_tile(&self, ctx: &mut RankCtx<'_>, i: usize, j: usize) -> Result<Tl, DistError> {
        let entry = self.entry(i, j)?.clone();
        let mut bufs = Vec::with_capacity(entry.parts.len());
        for p in &entry.parts {
            bufs.push(ctx.get_vec(*p)?);
        }
        self.decode(i, j, &bufs)
    }

    /// Starts fetching tile `(i, j)`; all arrays are requested at once.
    pub fn async_get_tile(&self, ctx: &mut RankCtx<'_>, i: usize, j: usize) -> Result<TileFuture, DistError> {
        let entry = self.entry(i, j)?;
        let mut handles = Vec::with_capacity(entry.parts.len());
        for p in &entry.parts {
            handles.push(ctx.get_nb(*p)?);
        }
        Ok(TileFuture { i, j, handles })
    }

    /// Waits for every transfer of `fut` and decodes the tile.
    pub fn resolve(&self, ctx: &mut RankCtx<'_>, mut fut: TileFuture) -> Result<Tl, DistError> {
        for h in fut.handles.iter_mut() {
            ctx.wait(h)?;
        }
        let bufs = fut
            .handles
            .into_iter()
            .map(TransferHandle::into_bytes)
            .collect::<Result<Vec<_>, _>>()?;
        self.decode(fut.i, fut.j, &bufs)
    }

    fn decode(&self, i: usize, j: usize, bufs: &[Vec<u8>]) -> Result<Tl, DistError> {
        let (r, c) = self.layout.tile_dims(i, j);
        let refs: Vec<&[u8]> = bufs.iter().map(Vec::as_slice).collect();
        Tl::decode(r, c, &refs, self.idx)
    }

    /// Owner-only copy of a tile without fabric traffic.
    pub fn read_local(&self, ctx: &RankCtx<'_>, i: usize, j: usize) -> Result<Tl, DistError> {
        self.check_owner(i, j)?;
        let entry = self.entry(i, j)?;
        let mut bufs = Vec::with_capacity(entry.parts.len());
        for p in &entry.parts {
            let mut b = vec![0u8; p.len];
            ctx.read_local(*p, &mut b)?;
            bufs.push(b);
        }
        self.decode(i, j, &bufs)
    }

    /// Owner-only overwrite of a tile in place. The new tile must have the
    /// same stored size (for sparse tiles, the same nonzero count); anything
    /// else needs [`DistMatrix::replace_tile`].
    pub fn store_local(&self, ctx: &RankCtx<'_>, i: usize, j: usize, tile: &Tl) -> Result<(), DistError> {
        self.check_owner(i, j)?;
        let entry = self.entry(i, j)?;
        if tile.dims() != self.layout.tile_dims(i, j) {
            return Err(DistError::PatternChanged { i, j });
        }
        let parts = tile.encode(self.idx)?;
        if parts.len() != entry.parts.len() || parts.iter().zip(&entry.parts).any(|(b, p)| b.len() != p.len) {
            return Err(DistError::PatternChanged { i, j });
        }
        for (b, p) in parts.iter().zip(&entry.parts) {
            ctx.write_local(b, *p)?;
        }
        Ok(())
    }

    /// Mutable view of an owned tile. Changes are written back to the shared
    /// heap when the reference is dropped; no fabric traffic is generated.
    pub fn tile_ref<'a, 'f>(&'a self, ctx: &'a RankCtx<'f>, i: usize, j: usize) -> Result<TileRef<'a, 'f, T, Tl>, DistError> {
        let tile = self.read_local(ctx, i, j)?;
        Ok(TileRef {
            mat: self,
            ctx,
            i,
            j,
            tile: Some(tile),
        })
    }

    /// Owner-only: store `tile` in fresh allocations and point this rank's
    /// directory at them. Other ranks keep seeing the old tile until
    /// [`DistMatrix::renew_tiles`].
    pub fn replace_tile(&mut self, ctx: &mut RankCtx<'_>, i: usize, j: usize, tile: &Tl) -> Result<(), DistError> {
        self.check_owner(i, j)?;
        if tile.dims() != self.layout.tile_dims(i, j) {
            return Err(KernelError::dims("replace_tile", tile.dims(), self.layout.tile_dims(i, j)).into());
        }
        let entry = store(ctx, tile, self.idx)?;
        let t = i * self.layout.tiles_n() + j;
        let old = std::mem::replace(&mut self.dir[t], entry.clone());
        self.pending_free.push(old);
        self.pending_updates.retain(|(u, _)| *u != t);
        self.pending_updates.push((t, entry));
        Ok(())
    }

    /// Collective: publish every replaced tile to all directories and free
    /// the replaced allocations.
    pub fn renew_tiles(&mut self, ctx: &mut RankCtx<'_>) -> Result<(), DistError> {
        let updates = std::mem::take(&mut self.pending_updates);
        let all = ctx.allgather(updates)?;
        for (r, list) in all.into_iter().enumerate() {
            for (t, e) in list {
                if t >= self.dir.len() || self.grid.owner(t / self.layout.tiles_n(), t % self.layout.tiles_n()) != r {
                    return Err(DistError::Corrupt(format!("rank {r} published tile {t} it does not own")));
                }
                self.dir[t] = e;
            }
        }
        for old in std::mem::take(&mut self.pending_free) {
            for p in old.parts {
                ctx.free(p)?;
            }
        }
        Ok(())
    }

    /// Copies of all tiles in row-major order.
    pub fn gather(&self, ctx: &mut RankCtx<'_>) -> Result<Vec<Tl>, DistError> {
        let mut out = Vec::with_capacity(self.layout.tile_count());
        for i in 0..self.tiles_m() {
            for j in 0..self.tiles_n() {
                out.push(self.get_tile(ctx, i, j)?);
            }
        }
        Ok(out)
    }

    /// Collective: release this rank's tiles.
    pub fn free(mut self, ctx: &mut RankCtx<'_>) -> Result<(), DistError> {
        ctx.barrier()?;
        let owned = self.owned();
        let n = self.layout.tiles_n();
        for (i, j) in owned {
            for p in std::mem::take(&mut self.dir[i * n + j].parts) {
                ctx.free(p)?;
            }
        }
        for old in std::mem::take(&mut self.pending_free) {
            for p in old.parts {
                ctx.free(p)?;
            }
        }
        Ok(())
    }
}

fn store<T: Scalar, Tl: TileCodec<T>>(ctx: &mut RankCtx<'_>, tile: &Tl, idx: IndexWidth) -> Result<TileEntry, DistError> {
    let parts = tile.encode(idx)?;
    let mut ptrs = Vec::with_capacity(parts.len());
    for b in &parts {
        let p = ctx.alloc(b.len())?;
        ctx.write_local(b, p)?;
        ptrs.push(p);
    }
    Ok(TileEntry {
        parts: ptrs,
        stored: tile.stored(),
    })
}

/// Owner's mutable view of one tile; written back on drop.
pub struct TileRef<'a, 'f, T: Scalar, Tl: TileCodec<T>> {
    mat: &'a DistMatrix<T, Tl>,
    ctx: &'a RankCtx<'f>,
    i: usize,
    j: usize,
    tile: Option<Tl>,
}

impl<T: Scalar, Tl: TileCodec<T>> TileRef<'_, '_, T, Tl> {
    /// Writes the tile back, reporting a changed pattern as an error instead
    /// of panicking.
    pub fn commit(mut self) -> Result<(), DistError> {
        let tile = self.tile.take().expect("tile present until commit");
        self.mat.store_local(self.ctx, self.i, self.j, &tile)
    }
}

impl<T: Scalar, Tl: TileCodec<T>> Deref for TileRef<'_, '_, T, Tl> {
    type Target = Tl;

    fn deref(&self) -> &Tl {
        self.tile.as_ref().expect("tile present until commit")
    }
}

impl<T: Scalar, Tl: TileCodec<T>> DerefMut for TileRef<'_, '_, T, Tl> {
    fn deref_mut(&mut self) -> &mut Tl {
        self.tile.as_mut().expect("tile present until commit")
    }
}

impl<T: Scalar, Tl: TileCodec<T>> Drop for TileRef<'_, '_, T, Tl> {
    fn drop(&mut self) {
        if let Some(tile) = self.tile.take() {
            if let Err(e) = self.mat.store_local(self.ctx, self.i, self.j, &tile) {
                if !std::thread::panicking() {
                    panic!("tile_ref write-back failed: {e}");
                }
            }
        }
    }
}
