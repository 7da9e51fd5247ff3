//! Distributed multiply algorithms over [`DistMatrix`] operands.
//!
//! Every variant computes `C += A * B` for a sparse `A` and a dense (SpMM) or
//! sparse (SpGEMM) `B`, and is called collectively by all ranks. Component
//! multiplies are named by their tile triple `(i, j, k)`:
//! `C[i,j] += A[i,k] * B[k,j]`.

mod engine;
mod oracle;
mod run;
mod stationary_c;
mod summa;
mod workgrid;

pub use oracle::{serial_flops, serial_product, verify};
pub use run::{checksum, run_multiply, Problem, RankSummary, RunOutput, RunReport, RunTotals, Tiling, WallSection};
pub use workgrid::WorkGrid;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distmat::{DistError, DistMatrix, DistSparse, TileCodec};
use crate::fabric::{FabricError, RankCtx, RankStats};
use crate::kernels::KernelError;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgoError {
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("{pr}x{pc} processor grid is not square; this variant only runs on square grids")]
    NonSquareGrid { pr: usize, pc: usize },
    #[error("operands do not conform: {0}")]
    Dimension(String),
}

impl From<FabricError> for AlgoError {
    fn from(e: FabricError) -> Self {
        AlgoError::Dist(DistError::Fabric(e))
    }
}

impl From<KernelError> for AlgoError {
    fn from(e: KernelError) -> Self {
        AlgoError::Dist(DistError::Kernel(e))
    }
}

impl AlgoError {
    /// The fabric ran out of heap or queue space.
    pub fn is_resource(&self) -> bool {
        matches!(
            self,
            AlgoError::Dist(DistError::Fabric(FabricError::HeapExhausted { .. } | FabricError::QueueFull { .. }))
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SummaBsp,
    StationaryC,
    StationaryA,
    StationaryB,
    WsRandom,
    WsLocality,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SummaBsp,
        Variant::StationaryC,
        Variant::StationaryA,
        Variant::StationaryB,
        Variant::WsRandom,
        Variant::WsLocality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SummaBsp => "summa_bsp",
            Variant::StationaryC => "stationary_c",
            Variant::StationaryA => "stationary_a",
            Variant::StationaryB => "stationary_b",
            Variant::WsRandom => "ws_random",
            Variant::WsLocality => "ws_locality",
        }
    }

    pub fn is_workstealing(self) -> bool {
        matches!(self, Variant::WsRandom | Variant::WsLocality)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown algorithm '{s}' (expected one of summa_bsp, stationary_c, stationary_a, stationary_b, ws_random, ws_locality)"))
    }
}

/// Which operand stays on its owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stationary {
    A,
    B,
    C,
}

impl std::str::FromStr for Stationary {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().trim_start_matches("stationary_") {
            "a" => Ok(Stationary::A),
            "b" => Ok(Stationary::B),
            "c" => Ok(Stationary::C),
            _ => Err(format!("unknown stationary operand '{s}' (expected a, b or c)")),
        }
    }
}

/// Order in which a rank visits other ranks' work after finishing its own.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "order")]
pub enum StealOrder {
    /// Cells in linear order starting from an offset derived from the rank.
    #[default]
    Linear,
    /// A seeded per-rank shuffle of the cells.
    Shuffled { seed: u64 },
}

/// Artificial per-multiply delays, for exercising asynchrony.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayPlan {
    /// Each component multiply is followed by a delay drawn uniformly from
    /// `[min_secs, max_secs]`.
    pub min_secs: f64,
    pub max_secs: f64,
    pub seed: u64,
    /// Extra delay per multiply on one rank.
    pub slow_rank: Option<usize>,
    pub slow_secs: f64,
}

impl DelayPlan {
    pub fn uniform(min_secs: f64, max_secs: f64, seed: u64) -> Self {
        DelayPlan {
            min_secs,
            max_secs,
            seed,
            ..DelayPlan::default()
        }
    }

    pub fn slow(rank: usize, secs: f64) -> Self {
        DelayPlan {
            slow_rank: Some(rank),
            slow_secs: secs,
            ..DelayPlan::default()
        }
    }

    fn is_zero(&self) -> bool {
        self.max_secs <= 0.0 && (self.slow_rank.is_none() || self.slow_secs <= 0.0)
    }
}

/// Per-rank source of injected delays.
pub(crate) struct Delayer {
    plan: DelayPlan,
    rng: ChaCha8Rng,
    rank: usize,
}

impl Delayer {
    pub(crate) fn new(plan: DelayPlan, rank: usize) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(plan.seed ^ (rank as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
        Delayer { plan, rng, rank }
    }

    pub(crate) fn after_multiply(&mut self, ctx: &mut RankCtx<'_>) {
        if self.plan.is_zero() {
            return;
        }
        let mut d = if self.plan.max_secs > self.plan.min_secs {
            self.rng.gen_range(self.plan.min_secs..=self.plan.max_secs)
        } else {
            self.plan.min_secs
        };
        if self.plan.slow_rank == Some(self.rank) {
            d += self.plan.slow_secs;
        }
        ctx.delay(d);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplyPlan {
    pub variant: Variant,
    /// Stationary operand of the workstealing variants.
    pub base: Stationary,
    /// Fetch the next iteration's tiles before the current multiply.
    pub prefetch: bool,
    /// Rotate each rank's inner loop by the sum of its tile coordinates.
    pub offset: bool,
    pub steal_order: StealOrder,
    pub delays: DelayPlan,
}

impl MultiplyPlan {
    /// Defaults: the optimized form of stationary C (prefetch and offset),
    /// offset for the other one-sided variants, base A for workstealing.
    pub fn new(variant: Variant) -> Self {
        MultiplyPlan {
            variant,
            base: Stationary::A,
            prefetch: variant == Variant::StationaryC,
            offset: variant != Variant::SummaBsp,
            steal_order: StealOrder::Linear,
            delays: DelayPlan::default(),
        }
    }

    pub fn with_base(mut self, base: Stationary) -> Self {
        self.base = base;
        self
    }

    pub fn with_prefetch(mut self, on: bool) -> Self {
        self.prefetch = on;
        self
    }

    pub fn with_offset(mut self, on: bool) -> Self {
        self.offset = on;
        self
    }

    pub fn with_delays(mut self, d: DelayPlan) -> Self {
        self.delays = d;
        self
    }

    pub fn with_steal_order(mut self, o: StealOrder) -> Self {
        self.steal_order = o;
        self
    }

    pub fn validate(&self) -> Result<(), AlgoError> {
        match self.variant {
            Variant::SummaBsp if self.prefetch || self.offset => Err(AlgoError::InvalidPlan(
                "prefetch and offset apply only to the one-sided variants".into(),
            )),
            Variant::WsRandom | Variant::WsLocality if self.prefetch => {
                Err(AlgoError::InvalidPlan("prefetch is not supported with workstealing".into()))
            }
            Variant::WsRandom if self.base == Stationary::B => {
                Err(AlgoError::InvalidPlan("ws_random supports base a or c".into()))
            }
            _ => {
                let d = &self.delays;
                if !(d.min_secs >= 0.0 && d.max_secs >= d.min_secs && d.slow_secs >= 0.0) {
                    return Err(AlgoError::InvalidPlan(format!("bad delay range {d:?}")));
                }
                Ok(())
            }
        }
    }
}

/// A steal executed by some rank, with the number of its three tiles
/// (`A[i,k]`, `B[k,j]`, `C[i,j]`) that the stealing rank owns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Steal {
    pub triple: [usize; 3],
    pub local_components: u8,
}

/// What one rank did during one multiply.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    /// Executed component multiplies `[i, j, k]` in execution order.
    pub executed: Vec<[usize; 3]>,
    pub steals: Vec<Steal>,
    pub flops: u64,
    /// Sum of the nonzeros of every partial product (sparse results only).
    pub product_nnz: u64,
    /// Flops per inner step, for the variants that have global steps.
    pub step_flops: Vec<u64>,
    pub contributions_sent: u64,
    pub contributions_received: u64,
    pub stats: RankStats,
    /// Virtual time when the rank's own work was done.
    pub owned_done: f64,
    /// Virtual time before the closing synchronization.
    pub work_done: f64,
    /// Number of events logged up to `work_done`.
    pub done_event: usize,
    /// Virtual time at return.
    pub finish: f64,
    pub wall_secs: f64,
}

impl RankReport {
    pub(crate) fn new(rank: usize) -> Self {
        RankReport {
            rank,
            ..RankReport::default()
        }
    }

    pub(crate) fn mark_done(&mut self, ctx: &RankCtx<'_>) {
        self.work_done = ctx.clock();
        self.done_event = ctx.events().len();
    }

    pub(crate) fn close(&mut self, ctx: &RankCtx<'_>, started: std::time::Instant) {
        self.stats = ctx.stats();
        self.finish = ctx.clock();
        self.wall_secs = started.elapsed().as_secs_f64();
    }
}

/// Checks tile-level conformance of `A (M x K tiles)`, `B (K x N)` and
/// `C (M x N)`.
pub(crate) fn check_conformant<T: Scalar, Bt: TileCodec<T>>(
    a: &DistSparse<T>,
    b: &DistMatrix<T, Bt>,
    c: &DistMatrix<T, Bt>,
) -> Result<(), AlgoError> {
    let (la, lb, lc) = (a.layout(), b.layout(), c.layout());
    let fail = |what: String| Err(AlgoError::Dimension(what));
    if la.cols != lb.rows || la.rows != lc.rows || lb.cols != lc.cols {
        return fail(format!(
            "A {}x{}, B {}x{}, C {}x{}",
            la.rows, la.cols, lb.rows, lb.cols, lc.rows, lc.cols
        ));
    }
    if la.tm != lc.tm || la.tn != lb.tm || lb.tn != lc.tn {
        return fail(format!(
            "tile sizes A {}x{}, B {}x{}, C {}x{}",
            la.tm, la.tn, lb.tm, lb.tn, lc.tm, lc.tn
        ));
    }
    Ok(())
}

/// Collective `C += A * B` with the given plan. Returns this rank's report.
pub fn multiply<T: Scalar, Bt: TileCodec<T>>(
    ctx: &mut RankCtx<'_>,
    plan: &MultiplyPlan,
    a: &DistSparse<T>,
    b: &DistMatrix<T, Bt>,
    c: &mut DistMatrix<T, Bt>,
) -> Result<RankReport, AlgoError> {
    plan.validate()?;
    check_conformant(a, b, c)?;
    match plan.variant {
        Variant::SummaBsp => summa::summa_bsp(ctx, plan, a, b, c),
        Variant::StationaryC => stationary_c::stationary_c(ctx, plan, a, b, c),
        Variant::StationaryA => engine::run(ctx, plan, Stationary::A, engine::Stealing::None, a, b, c),
        Variant::StationaryB => engine::run(ctx, plan, Stationary::B, engine::Stealing::None, a, b, c),
        Variant::WsRandom => engine::run(ctx, plan, plan.base, engine::Stealing::Random, a, b, c),
        Variant::WsLocality => engine::run(ctx, plan, plan.base, engine::Stealing::Locality, a, b, c),
    }
}

/// Writes `tile` over owned tile `(i, j)`, reallocating if its size changed.
pub(crate) fn commit_tile<T: Scalar, Bt: TileCodec<T>>(
    ctx: &mut RankCtx<'_>,
    c: &mut DistMatrix<T, Bt>,
    i: usize,
    j: usize,
    tile: &Bt,
) -> Result<(), AlgoError> {
    match c.store_local(ctx, i, j, tile) {
        Err(DistError::PatternChanged { .. }) => Ok(c.replace_tile(ctx, i, j, tile)?),
        other => Ok(other?),
    }
}

/// Bytes a local multiply streams through memory.
pub(crate) fn multiply_bytes<T: Scalar, Bt: TileCodec<T>>(
    a: &crate::kernels::CsrTile<T>,
    b: &Bt,
    out: &Bt,
    idx: crate::scalar::IndexWidth,
) -> u64 {
    use crate::distmat::TileCodec as _;
    (a.encoded_bytes(idx) + b.encoded_bytes(idx) + out.encoded_bytes(idx)) as u64
}
