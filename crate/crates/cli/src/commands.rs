//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, ValueEnum};
use rdma_spmm::algos::{
    run_multiply, serial_product, verify, AlgoError, DelayPlan, MultiplyPlan, Problem, RunReport, Stationary, Tiling,
    Variant,
};
use rdma_spmm::analytics::{nnz_imbalance, stage_imbalance, ImbalanceReport};
use rdma_spmm::distmat::{ProcGrid, TileCodec};
use rdma_spmm::fabric::{Fabric, FabricConfig, Schedule};
use rdma_spmm::gen_io::{random_dense, random_sparse, write_matrix_market};
use rdma_spmm::kernels::CsrTile;
use rdma_spmm::model::{
    comm_bytes_per_iter, comm_elems_per_iter, roofline, MeasuredSpgemm, ProblemShape, ProductKind,
    RooflineReport,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_grid, parse_tiling, CostArgs, InputArgs};
use crate::CliError;

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleArg {
    Virtual,
    Free,
}

#[derive(Args, Debug, Serialize)]
pub struct RunArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Algorithm variant.
    #[arg(long, default_value = "stationary_c")]
    pub alg: Variant,
    #[arg(long, default_value = "spmm")]
    pub kind: ProductKind,
    /// Columns of the dense B (SpMM) or of the random sparse B (SpGEMM on a
    /// non-square A).
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    /// Number of ranks.
    #[arg(long, default_value_t = 4)]
    pub p: usize,
    /// Processor grid `RxC`; defaults to the most nearly square one.
    #[arg(long)]
    pub grid: Option<String>,
    /// Tile sizes `TMxTKxTN`; defaults to one tile per rank.
    #[arg(long)]
    pub tile: Option<String>,
    /// Stationary operand (stationary and workstealing variants).
    #[arg(long)]
    pub base: Option<Stationary>,
    #[arg(long)]
    pub prefetch: Option<bool>,
    #[arg(long)]
    pub offset: Option<bool>,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Virtual)]
    pub schedule: ScheduleArg,
    /// Seed for random yields under the free schedule.
    #[arg(long)]
    pub jitter_seed: Option<u64>,
    /// Uniform per-multiply delay range `MIN,MAX` in milliseconds.
    #[arg(long)]
    pub delay_ms: Option<String>,
    /// Rank that sleeps an extra `--slow-ms` after every multiply.
    #[arg(long)]
    pub slow_rank: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub slow_ms: f64,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Ranks per node for link classification.
    #[arg(long, default_value_t = 6)]
    pub node_size: usize,
    /// Heap bytes per rank; sized from the problem when absent.
    #[arg(long)]
    pub heap_bytes: Option<usize>,
    /// Contribution queue capacity per rank.
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Compare the result against the serial oracle.
    #[arg(long)]
    pub verify: bool,
    /// Report file name prefix.
    #[arg(long, default_value = "run")]
    pub name: String,
}

fn algo_error(e: AlgoError) -> CliError {
    match e {
        e if e.is_resource() => CliError::Resource(e.to_string()),
        e @ (AlgoError::InvalidPlan(_) | AlgoError::NonSquareGrid { .. } | AlgoError::Dimension(_)) => {
            CliError::Config(e.to_string())
        }
        e => CliError::Other(e.into()),
    }
}

fn create(dir: &Path, file: String) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(file);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Other(anyhow::anyhow!("cannot create {}: {e}", path.display())))
}

fn write_json(dir: &Path, file: String, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(dir, file)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(anyhow::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_imbalance(dir: &Path, prefix: &str, r: &ImbalanceReport) -> Result<(), CliError> {
    write_json(dir, format!("{prefix}imbalance.json"), r)?;
    let mut w = create(dir, format!("{prefix}imbalance_tiles.csv"))?;
    r.write_tile_csv(&mut w)?;
    w.flush()?;
    let mut w = create(dir, format!("{prefix}imbalance_stages.csv"))?;
    r.write_stage_csv(&mut w)?;
    w.flush()?;
    let mut w = create(dir, format!("{prefix}imbalance_summary.csv"))?;
    r.write_summary_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn shape_of(m: usize, k: usize, n: usize, p: usize, d: f64, w: usize, idx: usize) -> ProblemShape {
    let s = ProblemShape::new(m as f64, k as f64, n as f64, p as u64, d).with_word(w, idx);
    let r = (p as f64).sqrt().round() as usize;
    if r * r == p {
        s
    } else {
        s.with_fractional_grid()
    }
}

/// The deterministic part of a run report: everything except the
/// wall-clock section.
fn deterministic(report: &RunReport) -> Result<serde_json::Value, CliError> {
    let mut v = serde_json::to_value(report).map_err(anyhow::Error::from)?;
    if let Some(o) = v.as_object_mut() {
        o.remove("nondeterministic");
    }
    Ok(v)
}

fn write_rank_csv(dir: &Path, prefix: &str, report: &RunReport) -> Result<(), CliError> {
    let mut w = create(dir, format!("{prefix}ranks.csv"))?;
    writeln!(
        w,
        "rank,bytes_sent,bytes_received,internode_sent,internode_received,puts,gets,atomics,queue_pushes,queue_pops,owned_done,work_done,finish"
    )?;
    for r in &report.per_rank {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.rank,
            r.bytes_sent,
            r.bytes_received,
            r.internode_sent,
            r.internode_received,
            r.puts,
            r.gets,
            r.atomics,
            r.queue_pushes,
            r.queue_pops,
            r.owned_done,
            r.work_done,
            r.finish
        )?;
    }
    w.flush()?;
    let mut w = create(dir, format!("{prefix}wall.csv"))?;
    writeln!(w, "rank,wall_secs,multiplies,flops,steals,contributions_sent")?;
    let s = &report.nondeterministic;
    for r in 0..s.wall_secs.len() {
        writeln!(
            w,
            "{r},{},{},{},{},{}",
            s.wall_secs[r], s.multiplies[r], s.flops[r], s.steals[r], s.contributions_sent[r]
        )?;
    }
    w.flush()?;
    Ok(())
}

struct Outcome {
    report: RunReport,
    verified: Option<bool>,
}

fn execute<Bt: TileCodec<f64>>(
    args: &RunArgs,
    plan: &MultiplyPlan,
    fabric_cfg: FabricConfig,
    a: &CsrTile<f64>,
    b: &Bt,
    tiling: Tiling,
    grid: ProcGrid,
) -> Result<Outcome, CliError> {
    let problem = Problem::new(a, b, tiling, grid);
    let heap = args.heap_bytes.unwrap_or_else(|| problem.heap_bytes_hint());
    let fabric = Fabric::new(fabric_cfg.heap_bytes(heap)).map_err(|e| CliError::Config(e.to_string()))?;
    let out = run_multiply(&fabric, plan, &problem).map_err(algo_error)?;
    let verified = if args.verify {
        let oracle = serial_product(a, b, None).map_err(|e| CliError::Other(e.into()))?;
        Some(verify(&out.c, &oracle))
    } else {
        None
    };
    Ok(Outcome {
        report: out.report,
        verified,
    })
}

pub fn cmd_run(args: &RunArgs, out_dir: &Path) -> Result<serde_json::Value, CliError> {
    if args.p == 0 {
        return Err(CliError::Config("--p must be positive".into()));
    }
    let grid = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => ProcGrid::near_square(args.p).map_err(|e| CliError::Config(e.to_string()))?,
    };
    if grid.ranks() != args.p {
        return Err(CliError::Config(format!(
            "grid {}x{} has {} ranks, --p is {}",
            grid.pr,
            grid.pc,
            grid.ranks(),
            args.p
        )));
    }
    if args.alg == Variant::SummaBsp && !grid.is_square() {
        return Err(CliError::Config(format!(
            "summa_bsp needs a square processor grid; {} ranks form {}x{}",
            args.p, grid.pr, grid.pc
        )));
    }
    let mut plan = MultiplyPlan::new(args.alg);
    if let Some(b) = args.base {
        plan = plan.with_base(b);
    }
    if let Some(v) = args.prefetch {
        plan = plan.with_prefetch(v);
    }
    if let Some(v) = args.offset {
        plan = plan.with_offset(v);
    }
    let mut delays = DelayPlan::default();
    if let Some(spec) = &args.delay_ms {
        let bad = || CliError::Config(format!("--delay-ms `{spec}` is not MIN,MAX"));
        let (lo, hi) = spec.split_once(',').ok_or_else(bad)?;
        let (lo, hi): (f64, f64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
        delays = DelayPlan::uniform(lo / 1e3, hi / 1e3, args.seed);
    }
    if let Some(r) = args.slow_rank {
        if r >= args.p {
            return Err(CliError::Config(format!("--slow-rank {r} out of range")));
        }
        delays.slow_rank = Some(r);
        delays.slow_secs = args.slow_ms / 1e3;
    }
    plan = plan.with_delays(delays);
    plan.validate().map_err(algo_error)?;

    let cost = args.cost.model()?;
    let schedule = match args.schedule {
        ScheduleArg::Virtual => Schedule::Virtual,
        ScheduleArg::Free => Schedule::Free {
            jitter_seed: args.jitter_seed,
        },
    };
    let mut fcfg = FabricConfig::new(args.p)
        .node_size(args.node_size)
        .schedule(schedule)
        .cost(cost)
        .timeout(Duration::from_secs(600));
    if let Some(c) = args.queue_capacity {
        fcfg = fcfg.queue_capacity(c);
    }

    let a = args.input.load(args.p, args.seed)?;
    let (m, k) = a.shape();
    if m == 0 || k == 0 {
        return Err(CliError::Config("input matrix is empty".into()));
    }
    let n = match args.kind {
        ProductKind::Spgemm if m == k => k,
        _ => args.n,
    };
    if n == 0 {
        return Err(CliError::Config("--n must be positive".into()));
    }
    let tiling = match &args.tile {
        Some(t) => {
            let [tm, tk, tn] = parse_tiling(t)?;
            Tiling { tm, tk, tn }
        }
        None => Tiling::per_grid(m, k, n, grid),
    };
    let density = a.nnz() as f64 / (m as f64 * k as f64);
    let outcome = match args.kind {
        ProductKind::Spmm => {
            let b = random_dense::<f64>(k, n, args.seed.wrapping_add(1));
            execute(args, &plan, fcfg, &a, &b, tiling, grid)?
        }
        ProductKind::Spgemm if m == k => execute(args, &plan, fcfg, &a, &a, tiling, grid)?,
        ProductKind::Spgemm => {
            let b = random_sparse::<f64>(k, n, density.max(1e-6), args.seed.wrapping_add(1));
            execute(args, &plan, fcfg, &a, &b, tiling, grid)?
        }
    };
    let report = outcome.report;

    let shape = shape_of(m, k, n, args.p, density.max(f64::MIN_POSITIVE), 8, 4);
    let measured = (report.totals.multiplies > 0 && report.totals.flops > 0 && report.totals.product_nnz > 0).then(|| {
        MeasuredSpgemm {
            flops_per_iter: report.totals.flops as f64 / report.totals.multiplies as f64,
            cf: report.totals.flops as f64 / report.totals.product_nnz as f64,
        }
    });
    let roof: Option<RooflineReport> = match roofline(&shape, &cost, args.kind, measured) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("no roofline report: {e}");
            None
        }
    };
    let imbalance = if m == k && grid.is_square() {
        Some(stage_imbalance(&a, grid.pr, plan.offset).map_err(|e| CliError::Other(e.into()))?)
    } else {
        None
    };
    let nnz_imb = nnz_imbalance(&a, grid.pr, grid.pc).map_err(|e| CliError::Other(e.into()))?;

    fs::create_dir_all(out_dir)?;
    let prefix = format!("{}_", args.name);
    let det = deterministic(&report)?;
    write_json(
        out_dir,
        format!("{prefix}report.json"),
        &json!({
            "config": args,
            "deterministic": det,
            "verified": outcome.verified,
            "nnz_imbalance": nnz_imb,
        }),
    )?;
    write_json(out_dir, format!("{prefix}wall.json"), &report.nondeterministic)?;
    write_rank_csv(out_dir, &prefix, &report)?;
    if let Some(r) = &roof {
        write_json(out_dir, format!("{prefix}roofline.json"), r)?;
    }
    if let Some(r) = &imbalance {
        write_imbalance(out_dir, &prefix, r)?;
    }

    let summary = json!({
        "variant": report.variant.name(),
        "kind": report.kind,
        "ranks": report.ranks,
        "flops": report.totals.flops,
        "bytes": report.totals.bytes,
        "checksum": report.totals.checksum,
        "virtual_makespan": report.totals.virtual_makespan,
        "verified": outcome.verified,
        "out_dir": out_dir,
    });
    if outcome.verified == Some(false) {
        return Err(CliError::Verify(format!(
            "{} result differs from the serial oracle",
            report.variant.name()
        )));
    }
    Ok(summary)
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub m: f64,
    #[arg(long)]
    pub k: f64,
    #[arg(long)]
    pub n: f64,
    #[arg(long)]
    pub p: u64,
    /// Density of A.
    #[arg(long)]
    pub d: f64,
    #[arg(long, default_value = "spmm")]
    pub kind: ProductKind,
    /// Bytes per value.
    #[arg(long, default_value_t = 4)]
    pub word: usize,
    /// Bytes per index; defaults to the value width.
    #[arg(long)]
    pub idx_bytes: Option<usize>,
    /// Measured flops per component multiply (SpGEMM).
    #[arg(long)]
    pub flops_per_iter: Option<f64>,
    /// Measured flops per output nonzero (SpGEMM).
    #[arg(long)]
    pub cf: Option<f64>,
    #[command(flatten)]
    pub cost: CostArgs,
}

pub fn cmd_model(args: &ModelArgs) -> Result<serde_json::Value, CliError> {
    let cost = args.cost.model()?;
    let mut shape =
        ProblemShape::new(args.m, args.k, args.n, args.p, args.d).with_word(args.word, args.idx_bytes.unwrap_or(args.word));
    let r = (args.p as f64).sqrt().round() as u64;
    if r * r != args.p {
        shape = shape.with_fractional_grid();
    }
    let measured = match (args.flops_per_iter, args.cf) {
        (Some(f), Some(cf)) => Some(MeasuredSpgemm { flops_per_iter: f, cf }),
        (None, None) => None,
        _ => return Err(CliError::Config("--flops-per-iter and --cf go together".into())),
    };
    let cfg = |e: rdma_spmm::model::ModelError| CliError::Config(e.to_string());
    let report = roofline(&shape, &cost, args.kind, measured).map_err(cfg)?;
    Ok(json!({
        "inputs": { "shape": shape, "cost": cost, "kind": args.kind, "measured": measured },
        "comm_elems_per_iter": comm_elems_per_iter(&shape).map_err(cfg)?,
        "comm_bytes_per_iter": comm_bytes_per_iter(&shape).map_err(cfg)?,
        "roofline": report,
    }))
}

#[derive(Args, Debug)]
pub struct ImbalanceArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Side of the square grid.
    #[arg(long, default_value_t = 16)]
    pub grid: usize,
    /// Stage `s` of rank `(i, j)` multiplies with `k = s + i + j`.
    #[arg(long)]
    pub offset: bool,
    /// Only the nonzero imbalance (works for rectangular matrices).
    #[arg(long)]
    pub nnz_only: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write JSON and CSV tables to the output directory.
    #[arg(long)]
    pub write: bool,
    #[arg(long, default_value = "imb")]
    pub name: String,
}

pub fn cmd_imbalance(args: &ImbalanceArgs, out_dir: &Path) -> Result<serde_json::Value, CliError> {
    if args.grid == 0 {
        return Err(CliError::Config("--grid must be positive".into()));
    }
    let a = args.input.load(args.grid * args.grid, args.seed)?;
    let nnz = nnz_imbalance(&a, args.grid, args.grid).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = json!({
        "rows": a.rows(),
        "cols": a.cols(),
        "nnz": a.nnz(),
        "grid": args.grid,
        "nnz_imbalance": nnz,
    });
    if args.nnz_only {
        return Ok(out);
    }
    let r = stage_imbalance(&a, args.grid, args.offset).map_err(|e| CliError::Config(e.to_string()))?;
    out["offset"] = json!(args.offset);
    out["end_to_end_flop_imbalance"] = json!(r.end_to_end_flop_imbalance);
    out["per_stage_flop_imbalance"] = json!(r.per_stage_flop_imbalance);
    if args.write {
        fs::create_dir_all(out_dir)?;
        write_imbalance(out_dir, &format!("{}_", args.name), &r)?;
        out["out_dir"] = json!(out_dir);
    }
    Ok(out)
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Tile grid for `--uniform` inputs.
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Matrix Market file to write.
    #[arg(long, short)]
    pub output: PathBuf,
}

pub fn cmd_gen(args: &GenArgs) -> Result<serde_json::Value, CliError> {
    let a = args.input.load(args.p, args.seed)?;
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_matrix_market(&a, &args.output).map_err(|e| CliError::Other(e.into()))?;
    Ok(json!({ "rows": a.rows(), "cols": a.cols(), "nnz": a.nnz(), "output": args.output }))
}
