use serde::{Deserialize, Serialize};

use crate::distmat::{DistMatrix, DistSparse, ProcGrid, TileCodec, TileLayout};
use crate::fabric::{Event, Fabric, Schedule, TrafficRecord};
use crate::kernels::CsrTile;
use crate::model::{LinkClass, ProductKind};
use crate::scalar::{IndexWidth, Scalar};

use super::{multiply, AlgoError, MultiplyPlan, RankReport, Stationary, Variant};

/// Tile sizes: A is cut into `tm x tk`, B into `tk x tn`, C into `tm x tn`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    pub tm: usize,
    pub tk: usize,
    pub tn: usize,
}

impl Tiling {
    /// Tile sizes that cut `m x k` times `k x n` into `grid`-sized tile
    /// grids (one tile per rank for square grids).
    pub fn per_grid(m: usize, k: usize, n: usize, grid: ProcGrid) -> Self {
        let q = grid.pr.max(grid.pc);
        Tiling {
            tm: m.div_ceil(grid.pr).max(1),
            tk: k.div_ceil(q).max(1),
            tn: n.div_ceil(grid.pc).max(1),
        }
    }
}

/// Global operands of one distributed multiply.
pub struct Problem<'p, T: Scalar, Bt> {
    pub a: &'p CsrTile<T>,
    pub b: &'p Bt,
    /// Initial C; zero when absent.
    pub c: Option<&'p Bt>,
    pub tiling: Tiling,
    pub grid: ProcGrid,
    pub idx: IndexWidth,
}

impl<'p, T: Scalar, Bt: TileCodec<T>> Problem<'p, T, Bt> {
    pub fn new(a: &'p CsrTile<T>, b: &'p Bt, tiling: Tiling, grid: ProcGrid) -> Self {
        Problem {
            a,
            b,
            c: None,
            tiling,
            grid,
            idx: IndexWidth::default(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.rows(), self.a.cols(), self.b.dims().1)
    }

    /// A per-rank heap size that comfortably holds the operands, the result
    /// and every in-flight contribution.
    pub fn heap_bytes_hint(&self) -> usize {
        let p = self.grid.ranks().max(1);
        let (m, k, n) = self.dims();
        let a = self.a.encoded_bytes(self.idx);
        let b = self.b.encoded_bytes(self.idx);
        let c_bound = m * n * (T::BYTES + if Bt::PARTS > 1 { self.idx.bytes() } else { 0 }) + (m + 1) * 8;
        let kt = k.div_ceil(self.tiling.tk).max(1);
        let tiles = (m.div_ceil(self.tiling.tm) * n.div_ceil(self.tiling.tn)).max(1);
        let per_rank = (2 * (a + b) + (kt + 3) * c_bound) / p + 16 * tiles * 64;
        (per_rank + (4 << 20)).next_multiple_of(8)
    }
}

/// Per-rank figures that are reproducible under the virtual schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub rank: usize,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub internode_sent: u64,
    pub internode_received: u64,
    pub puts: u64,
    pub gets: u64,
    pub atomics: u64,
    pub queue_pushes: u64,
    pub queue_pops: u64,
    pub owned_done: f64,
    pub work_done: f64,
    pub finish: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub multiplies: u64,
    pub flops: u64,
    pub product_nnz: u64,
    pub result_stored: u64,
    pub checksum: f64,
    pub bytes: u64,
    pub bytes_internode: u64,
    pub bytes_intranode: u64,
    pub bytes_self: u64,
    pub transfers: u64,
    pub atomics: u64,
    pub virtual_makespan: f64,
}

/// Fields that change from run to run: wall-clock times and anything that
/// depends on how work was divided at run time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WallSection {
    pub wall_secs: Vec<f64>,
    pub multiplies: Vec<u64>,
    pub flops: Vec<u64>,
    pub steals: Vec<u64>,
    pub contributions_sent: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub base: Option<Stationary>,
    pub prefetch: bool,
    pub offset: bool,
    pub kind: ProductKind,
    pub schedule: String,
    pub ranks: usize,
    pub grid: [usize; 2],
    /// `[m, k, n]`.
    pub dims: [usize; 3],
    /// Tile counts `[M, K, N]`.
    pub tiles: [usize; 3],
    pub tiling: Tiling,
    pub totals: RunTotals,
    pub per_rank: Vec<RankSummary>,
    /// Deterministic only for runs without stealing on the virtual schedule.
    pub nondeterministic: WallSection,
}

pub struct RunOutput<Bt> {
    pub report: RunReport,
    /// Assembled result.
    pub c: Bt,
    pub ranks: Vec<RankReport>,
    /// Per-rank event logs of the measured region.
    pub events: Vec<Vec<Event>>,
    /// Traffic of the measured region.
    pub traffic: Vec<TrafficRecord>,
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Order-insensitive checksum of a tiled result:
/// `sum over tiles of (hash(i, j) mod 1021 + 1) * (sum of the tile's values)`.
pub fn checksum<T: Scalar, Bt: TileCodec<T>>(tiles: &[Bt], tiles_n: usize) -> f64 {
    tiles
        .iter()
        .enumerate()
        .map(|(t, tile)| {
            let (i, j) = (t / tiles_n, t % tiles_n);
            let w = mix(((i as u64) << 32) | j as u64) % 1021 + 1;
            w as f64 * tile.value_sum()
        })
        .sum()
}

type RankOut<Bt> = (RankReport, Vec<Event>, Option<(Vec<TrafficRecord>, Vec<Bt>)>);

/// Distributes the operands, runs one measured multiply and collects the
/// result and reports. Distribution and collection are not measured.
pub fn run_multiply<T: Scalar, Bt: TileCodec<T>>(
    fabric: &Fabric,
    plan: &MultiplyPlan,
    problem: &Problem<'_, T, Bt>,
) -> Result<RunOutput<Bt>, AlgoError> {
    plan.validate()?;
    let (m, k, n) = problem.dims();
    let Tiling { tm, tk, tn } = problem.tiling;
    let la = TileLayout::new(m, k, tm, tk)?;
    let lb = TileLayout::new(k, n, tk, tn)?;
    let lc = TileLayout::new(m, n, tm, tn)?;
    if problem.b.dims().0 != k {
        return Err(AlgoError::Dimension(format!("A is {m}x{k}, B is {:?}", problem.b.dims())));
    }
    if let Some(c0) = problem.c {
        if c0.dims() != (m, n) {
            return Err(AlgoError::Dimension(format!("C is {:?}, expected {m}x{n}", c0.dims())));
        }
    }
    let a_tiles = problem.a.split_tiles(tm, tk);
    let b_tiles = problem.b.split(tk, tn);
    let c_tiles = problem.c.map(|c| c.split(tm, tn));
    let (grid, idx) = (problem.grid, problem.idx);

    let outs: Vec<RankOut<Bt>> = fabric.run(|ctx| -> Result<RankOut<Bt>, AlgoError> {
        let a = DistSparse::scatter(ctx, la, grid, idx, &a_tiles)?;
        let b = DistMatrix::scatter(ctx, lb, grid, idx, &b_tiles)?;
        let mut c = match &c_tiles {
            Some(t) => DistMatrix::scatter(ctx, lc, grid, idx, t)?,
            None => DistMatrix::zeros(ctx, lc, grid, idx)?,
        };
        ctx.begin_measurement()?;
        let rep = multiply(ctx, plan, &a, &b, &mut c)?;
        let events = ctx.take_events();
        ctx.barrier()?;
        let traffic = (ctx.rank() == 0).then(|| ctx.fabric().traffic().records());
        ctx.barrier()?;
        let tiles = if ctx.rank() == 0 { Some(c.gather(ctx)?) } else { None };
        c.free(ctx)?;
        b.free(ctx)?;
        a.free(ctx)?;
        Ok((rep, events, traffic.zip(tiles)))
    })?;

    let mut ranks = Vec::with_capacity(outs.len());
    let mut events = Vec::with_capacity(outs.len());
    let mut collected = None;
    for (rep, ev, extra) in outs {
        ranks.push(rep);
        events.push(ev);
        if extra.is_some() {
            collected = extra;
        }
    }
    let (traffic, tiles) = collected.expect("rank 0 collects the result");
    let c = Bt::assemble(m, n, tm, tn, &tiles)?;
    let report = summarize(fabric, plan, problem, &ranks, &traffic, &tiles, lc.tiles_n());
    Ok(RunOutput {
        report,
        c,
        ranks,
        events,
        traffic,
    })
}

fn summarize<T: Scalar, Bt: TileCodec<T>>(
    fabric: &Fabric,
    plan: &MultiplyPlan,
    problem: &Problem<'_, T, Bt>,
    ranks: &[RankReport],
    traffic: &[TrafficRecord],
    tiles: &[Bt],
    tiles_n: usize,
) -> RunReport {
    let p = ranks.len();
    let (m, k, n) = problem.dims();
    let t = problem.tiling;
    let mut sent = vec![0u64; p];
    let mut recv = vec![0u64; p];
    let mut off_sent = vec![0u64; p];
    let mut off_recv = vec![0u64; p];
    let mut by_link = [0u64; 3];
    let (mut transfers, mut atomics) = (0, 0);
    for r in traffic {
        for (src, dst, bytes) in r.flows() {
            sent[src] += bytes;
            recv[dst] += bytes;
            if r.link == LinkClass::InterNode {
                off_sent[src] += bytes;
                off_recv[dst] += bytes;
            }
        }
        let slot = match r.link {
            LinkClass::SelfRank => 0,
            LinkClass::IntraNode => 1,
            LinkClass::InterNode => 2,
        };
        by_link[slot] += r.counters.bytes();
        transfers += r.counters.transfers();
        atomics += r.counters.atomic_ops;
    }
    let per_rank = ranks
        .iter()
        .map(|r| RankSummary {
            rank: r.rank,
            bytes_sent: sent[r.rank],
            bytes_received: recv[r.rank],
            internode_sent: off_sent[r.rank],
            internode_received: off_recv[r.rank],
            puts: r.stats.puts,
            gets: r.stats.gets,
            atomics: r.stats.atomics,
            queue_pushes: r.stats.queue_pushes,
            queue_pops: r.stats.queue_pops,
            owned_done: r.owned_done,
            work_done: r.work_done,
            finish: r.finish,
        })
        .collect();
    let totals = RunTotals {
        multiplies: ranks.iter().map(|r| r.executed.len() as u64).sum(),
        flops: ranks.iter().map(|r| r.flops).sum(),
        product_nnz: ranks.iter().map(|r| r.product_nnz).sum(),
        result_stored: tiles.iter().map(|t| t.stored() as u64).sum(),
        checksum: checksum(tiles, tiles_n),
        bytes: by_link.iter().sum(),
        bytes_internode: by_link[2],
        bytes_intranode: by_link[1],
        bytes_self: by_link[0],
        transfers,
        atomics,
        virtual_makespan: ranks.iter().map(|r| r.finish).fold(0.0, f64::max),
    };
    let nondeterministic = WallSection {
        wall_secs: ranks.iter().map(|r| r.wall_secs).collect(),
        multiplies: ranks.iter().map(|r| r.executed.len() as u64).collect(),
        flops: ranks.iter().map(|r| r.flops).collect(),
        steals: ranks.iter().map(|r| r.steals.len() as u64).collect(),
        contributions_sent: ranks.iter().map(|r| r.contributions_sent).collect(),
    };
    RunReport {
        variant: plan.variant,
        base: plan.variant.is_workstealing().then_some(plan.base),
        prefetch: plan.prefetch,
        offset: plan.offset,
        kind: if Bt::PARTS == 1 { ProductKind::Spmm } else { ProductKind::Spgemm },
        schedule: match fabric.config().schedule {
            Schedule::Virtual => "virtual".into(),
            Schedule::Free { .. } => "free".into(),
        },
        ranks: p,
        grid: [problem.grid.pr, problem.grid.pc],
        dims: [m, k, n],
        tiles: [m.div_ceil(t.tm), k.div_ceil(t.tk), n.div_ceil(t.tn)],
        tiling: t,
        totals,
        per_rank,
        nondeterministic,
    }
}
