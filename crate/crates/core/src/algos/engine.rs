//! Stationary A/B execution and the two workstealing schemes.
//!
//! The stationary operand's tiles are the "cells" of a 2D grid; each cell
//! expands into a run of component multiplies along the free dimension
//! (`j` for A, `i` for B, `k` for C). Products whose C tile lives elsewhere
//! travel as contributions through the owner's queue.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distmat::{DistMatrix, DistSparse, Inbox, Outbox, TileCodec, TileFuture};
use crate::fabric::RankCtx;
use crate::kernels::CsrTile;
use crate::scalar::Scalar;

use super::{commit_tile, multiply_bytes, AlgoError, Delayer, MultiplyPlan, RankReport, Stationary, Steal, StealOrder, WorkGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stealing {
    None,
    /// 2D reservation grid over the stationary cells.
    Random,
    /// 3D reservation grid over every component multiply; steals must touch
    /// a local tile.
    Locality,
}

/// Index geometry for one choice of stationary operand.
#[derive(Clone, Copy)]
struct Axes {
    base: Stationary,
    m: usize,
    n: usize,
    k: usize,
}

impl Axes {
    fn cell_dims(&self) -> (usize, usize) {
        match self.base {
            Stationary::A => (self.m, self.k),
            Stationary::B => (self.k, self.n),
            Stationary::C => (self.m, self.n),
        }
    }

    fn free_len(&self) -> usize {
        match self.base {
            Stationary::A => self.n,
            Stationary::B => self.m,
            Stationary::C => self.k,
        }
    }

    /// `[i, j, k]` of free index `f` in cell `(x, y)`.
    fn triple(&self, (x, y): (usize, usize), f: usize) -> [usize; 3] {
        match self.base {
            Stationary::A => [x, f, y],
            Stationary::B => [f, y, x],
            Stationary::C => [x, y, f],
        }
    }

    fn cell_of(&self, [i, j, k]: [usize; 3]) -> (usize, usize) {
        match self.base {
            Stationary::A => (i, k),
            Stationary::B => (k, j),
            Stationary::C => (i, j),
        }
    }

    fn linear_triple(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.n + j) * self.k + k
    }

    fn triple_of_linear(&self, l: usize) -> [usize; 3] {
        [l / (self.n * self.k), (l / self.k) % self.n, l % self.k]
    }
}

enum Moving<T: Scalar, Bt> {
    Ready(Option<CsrTile<T>>, Option<Bt>),
    Pending(Option<TileFuture>, Option<TileFuture>),
}

struct Engine<'m, T: Scalar, Bt: TileCodec<T>> {
    a: &'m DistSparse<T>,
    b: &'m DistMatrix<T, Bt>,
    c: &'m DistMatrix<T, Bt>,
    axes: Axes,
    offset: bool,
    inbox: Inbox<Bt>,
    outbox: Outbox,
    delayer: Delayer,
    rep: RankReport,
    /// Stationary tile of the most recently used cell.
    held: Option<((usize, usize), Held<T, Bt>)>,
    local_applied: u64,
}

enum Held<T, Bt> {
    A(CsrTile<T>),
    B(Bt),
    C,
}

impl<'m, T: Scalar, Bt: TileCodec<T>> Engine<'m, T, Bt> {
    fn base_owner(&self, (x, y): (usize, usize)) -> usize {
        match self.axes.base {
            Stationary::A => self.a.owner(x, y),
            Stationary::B => self.b.owner(x, y),
            Stationary::C => self.c.owner(x, y),
        }
    }

    fn rotated(&self, (x, y): (usize, usize), t: usize) -> usize {
        let f = self.axes.free_len();
        if self.offset {
            (t + x + y) % f
        } else {
            t
        }
    }

    /// Makes the stationary tile of `cell` available, reading it locally when
    /// owned and fetching it otherwise.
    fn hold(&mut self, ctx: &mut RankCtx<'_>, cell: (usize, usize)) -> Result<(), AlgoError> {
        if matches!(&self.held, Some((c, _)) if *c == cell) {
            return Ok(());
        }
        let mine = self.base_owner(cell) == ctx.rank();
        let held = match self.axes.base {
            Stationary::A if mine => Held::A(self.a.read_local(ctx, cell.0, cell.1)?),
            Stationary::A => Held::A(self.a.get_tile(ctx, cell.0, cell.1)?),
            Stationary::B if mine => Held::B(self.b.read_local(ctx, cell.0, cell.1)?),
            Stationary::B => Held::B(self.b.get_tile(ctx, cell.0, cell.1)?),
            Stationary::C => Held::C,
        };
        self.held = Some((cell, held));
        Ok(())
    }

    /// Starts fetching the operands of `triple` that are not held.
    fn request(&self, ctx: &mut RankCtx<'_>, [i, j, k]: [usize; 3], asynchronous: bool) -> Result<Moving<T, Bt>, AlgoError> {
        let need_a = self.axes.base != Stationary::A;
        let need_b = self.axes.base != Stationary::B;
        Ok(if asynchronous {
            Moving::Pending(
                need_a.then(|| self.a.async_get_tile(ctx, i, k)).transpose()?,
                need_b.then(|| self.b.async_get_tile(ctx, k, j)).transpose()?,
            )
        } else {
            Moving::Ready(
                need_a.then(|| self.a.get_tile(ctx, i, k)).transpose()?,
                need_b.then(|| self.b.get_tile(ctx, k, j)).transpose()?,
            )
        })
    }

    fn execute(&mut self, ctx: &mut RankCtx<'_>, triple: [usize; 3], moving: Moving<T, Bt>) -> Result<(), AlgoError> {
        let [i, j, _] = triple;
        let (ma, mb) = match moving {
            Moving::Ready(x, y) => (x, y),
            Moving::Pending(fa, fb) => (
                fa.map(|f| self.a.resolve(ctx, f)).transpose()?,
                fb.map(|f| self.b.resolve(ctx, f)).transpose()?,
            ),
        };
        let held = &self.held.as_ref().expect("stationary tile held").1;
        let at = match (held, &ma) {
            (Held::A(t), _) => t,
            (_, Some(t)) => t,
            _ => unreachable!("A tile neither held nor fetched"),
        };
        let bt = match (held, &mb) {
            (Held::B(t), _) => t,
            (_, Some(t)) => t,
            _ => unreachable!("B tile neither held nor fetched"),
        };
        let (prod, fm) = Bt::product(at, bt)?;
        ctx.compute(fm.flops, multiply_bytes(at, bt, &prod, self.a.index_width()));
        self.delayer.after_multiply(ctx);
        self.rep.flops += fm.flops;
        self.rep.product_nnz += fm.output_nnz;
        self.rep.executed.push(triple);
        if self.c.owner(i, j) == ctx.rank() {
            self.inbox.add_local(i, j, &prod)?;
            self.local_applied += 1;
        } else {
            self.outbox.send(ctx, self.c, i, j, &prod)?;
        }
        Ok(())
    }

    fn poll(&mut self, ctx: &mut RankCtx<'_>) -> Result<(), AlgoError> {
        self.inbox.poll(ctx, self.c)?;
        Ok(())
    }

    fn owned_cells(&self, rank: usize) -> Vec<(usize, usize)> {
        let (cx, cy) = self.axes.cell_dims();
        (0..cx)
            .flat_map(|x| (0..cy).map(move |y| (x, y)))
            .filter(|&cell| self.base_owner(cell) == rank)
            .collect()
    }

    /// Every multiply of the owned cells, in order, without reservations.
    fn plain_pass(&mut self, ctx: &mut RankCtx<'_>, prefetch: bool) -> Result<(), AlgoError> {
        let mut work = Vec::new();
        for cell in self.owned_cells(ctx.rank()) {
            for t in 0..self.axes.free_len() {
                work.push(self.axes.triple(cell, self.rotated(cell, t)));
            }
        }
        let mut next = match (prefetch, work.first()) {
            (true, Some(&w)) => Some(self.request(ctx, w, true)?),
            _ => None,
        };
        for n in 0..work.len() {
            let triple = work[n];
            let moving = match next.take() {
                Some(m) => {
                    if let Some(&w) = work.get(n + 1) {
                        next = Some(self.request(ctx, w, true)?);
                    }
                    m
                }
                None => self.request(ctx, triple, false)?,
            };
            self.hold(ctx, self.axes.cell_of(triple))?;
            self.execute(ctx, triple, moving)?;
            self.poll(ctx)?;
        }
        Ok(())
    }

    /// Claims and executes free indices of `cell` until it is exhausted.
    fn drain_cell(
        &mut self,
        ctx: &mut RankCtx<'_>,
        grid: &WorkGrid,
        cell: (usize, usize),
        stolen: bool,
    ) -> Result<(), AlgoError> {
        let id = grid.linear(&[cell.0, cell.1]);
        loop {
            if stolen {
                self.poll(ctx)?;
            }
            let t = grid.reserve(ctx, id)? as usize;
            if t >= self.axes.free_len() {
                return Ok(());
            }
            let triple = self.axes.triple(cell, self.rotated(cell, t));
            self.hold(ctx, cell)?;
            let moving = self.request(ctx, triple, false)?;
            self.execute(ctx, triple, moving)?;
            if stolen {
                let local = self.local_components(ctx.rank(), triple);
                self.rep.steals.push(Steal {
                    triple,
                    local_components: local,
                });
            } else {
                self.poll(ctx)?;
            }
        }
    }

    fn local_components(&self, rank: usize, [i, j, k]: [usize; 3]) -> u8 {
        [self.a.owner(i, k), self.b.owner(k, j), self.c.owner(i, j)]
            .iter()
            .filter(|&&o| o == rank)
            .count() as u8
    }

    fn scan_order(&self, rank: usize, ranks: usize, len: usize, order: StealOrder, start_by_rank: bool) -> Vec<usize> {
        match order {
            StealOrder::Linear => {
                let start = if start_by_rank { rank } else { rank * len / ranks.max(1) };
                (0..len).map(|idx| (start + idx) % len.max(1)).collect()
            }
            StealOrder::Shuffled { seed } => {
                let mut v: Vec<usize> = (0..len).collect();
                v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ rank as u64));
                v
            }
        }
    }

    fn random_pass(&mut self, ctx: &mut RankCtx<'_>, plan: &MultiplyPlan) -> Result<(), AlgoError> {
        let (cx, cy) = self.axes.cell_dims();
        let owners: Vec<usize> = (0..cx * cy).map(|l| self.base_owner((l / cy, l % cy))).collect();
        let grid = WorkGrid::new(ctx, &[cx, cy], |l| owners[l])?;
        for cell in self.owned_cells(ctx.rank()) {
            self.drain_cell(ctx, &grid, cell, false)?;
        }
        ctx.mark("owned_done");
        self.rep.owned_done = ctx.clock();
        for l in self.scan_order(ctx.rank(), ctx.ranks(), cx * cy, plan.steal_order, true) {
            if owners[l] == ctx.rank() {
                continue;
            }
            self.drain_cell(ctx, &grid, (l / cy, l % cy), true)?;
        }
        self.finish_grid(ctx, grid)
    }

    fn locality_pass(&mut self, ctx: &mut RankCtx<'_>, plan: &MultiplyPlan) -> Result<(), AlgoError> {
        let ax = self.axes;
        let total = ax.m * ax.n * ax.k;
        let owners: Vec<usize> = (0..total).map(|l| self.base_owner(ax.cell_of(ax.triple_of_linear(l)))).collect();
        let grid = WorkGrid::new(ctx, &[ax.m, ax.n, ax.k], |l| owners[l])?;
        for cell in self.owned_cells(ctx.rank()) {
            for t in 0..ax.free_len() {
                let triple = ax.triple(cell, self.rotated(cell, t));
                if grid.reserve(ctx, ax.linear_triple(triple))? != 0 {
                    continue;
                }
                self.hold(ctx, cell)?;
                let moving = self.request(ctx, triple, false)?;
                self.execute(ctx, triple, moving)?;
                self.poll(ctx)?;
            }
        }
        ctx.mark("owned_done");
        self.rep.owned_done = ctx.clock();
        let me = ctx.rank();
        for l in self.scan_order(me, ctx.ranks(), total, plan.steal_order, false) {
            if owners[l] == me {
                continue;
            }
            let triple = ax.triple_of_linear(l);
            let local = self.local_components(me, triple);
            if local == 0 {
                continue;
            }
            self.poll(ctx)?;
            if grid.reserve(ctx, l)? != 0 {
                continue;
            }
            self.hold(ctx, ax.cell_of(triple))?;
            let moving = self.request(ctx, triple, false)?;
            self.execute(ctx, triple, moving)?;
            self.rep.steals.push(Steal {
                triple,
                local_components: local,
            });
        }
        self.finish_grid(ctx, grid)
    }

    fn finish_grid(&mut self, ctx: &mut RankCtx<'_>, grid: WorkGrid) -> Result<(), AlgoError> {
        self.inbox.drain(ctx, self.c)?;
        self.rep.mark_done(ctx);
        grid.free(ctx)
    }
}

pub(crate) fn run<T: Scalar, Bt: TileCodec<T>>(
    ctx: &mut RankCtx<'_>,
    plan: &MultiplyPlan,
    base: Stationary,
    stealing: Stealing,
    a: &DistSparse<T>,
    b: &DistMatrix<T, Bt>,
    c: &mut DistMatrix<T, Bt>,
) -> Result<RankReport, AlgoError> {
    let started = Instant::now();
    let axes = Axes {
        base,
        m: a.tiles_m(),
        n: b.tiles_n(),
        k: a.tiles_n(),
    };
    let mut eng = Engine {
        a,
        b,
        c: &*c,
        axes,
        offset: plan.offset,
        inbox: Inbox::new(&*c, axes.k),
        outbox: Outbox::new(),
        delayer: Delayer::new(plan.delays, ctx.rank()),
        rep: RankReport::new(ctx.rank()),
        held: None,
        local_applied: 0,
    };
    match stealing {
        Stealing::None => {
            eng.plain_pass(ctx, plan.prefetch)?;
            ctx.mark("owned_done");
            eng.rep.owned_done = ctx.clock();
            eng.inbox.drain(ctx, eng.c)?;
            eng.rep.mark_done(ctx);
        }
        Stealing::Random => eng.random_pass(ctx, plan)?,
        Stealing::Locality => eng.locality_pass(ctx, plan)?,
    }
    let Engine {
        mut inbox,
        outbox,
        mut rep,
        local_applied,
        ..
    } = eng;
    rep.contributions_sent = outbox.sent();
    outbox.finish(ctx)?;
    // Anything still queued now is a contribution beyond the expected count.
    inbox.poll(ctx, c)?;
    rep.contributions_received = inbox.received() - local_applied;
    for ((i, j), acc) in inbox.into_tiles() {
        let mut t = c.read_local(ctx, i, j)?;
        t.accumulate(&acc)?;
        commit_tile(ctx, c, i, j, &t)?;
    }
    c.renew_tiles(ctx)?;
    rep.close(ctx, started);
    Ok(rep)
}
