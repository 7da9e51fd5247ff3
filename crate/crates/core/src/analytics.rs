//! Load-imbalance metrics and virtual-time accounting.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algos::RankReport;
use crate::fabric::{replay, Event, FabricError};
use crate::kernels::CsrTile;
use crate::model::CostModel;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Nonzeros of every tile when `m` is cut into a `pr x pc` grid of tiles of
/// `ceil(rows / pr) x ceil(cols / pc)`.
pub fn tile_nnz<T: Scalar>(m: &CsrTile<T>, pr: usize, pc: usize) -> Result<Vec<Vec<u64>>, AnalyticsError> {
    if pr == 0 || pc == 0 {
        return Err(AnalyticsError::Grid(format!("{pr}x{pc}")));
    }
    let tm = m.rows().div_ceil(pr).max(1);
    let tn = m.cols().div_ceil(pc).max(1);
    let mut counts = vec![vec![0u64; pc]; pr];
    for r in 0..m.rows() {
        let row = &mut counts[r / tm];
        for &c in m.row(r).0 {
            row[c / tn] += 1;
        }
    }
    Ok(counts)
}

/// `max / mean`, or 1 when everything is zero.
pub fn max_over_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let sum: f64 = v.iter().sum();
    if v.is_empty() || sum == 0.0 {
        log::warn!("imbalance of an all-zero load is taken as 1");
        return 1.0;
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max / (sum / v.len() as f64)
}

/// Largest tile's nonzeros over the mean, on a `pr x pc` grid.
pub fn nnz_imbalance<T: Scalar>(m: &CsrTile<T>, pr: usize, pc: usize) -> Result<f64, AnalyticsError> {
    let counts = tile_nnz(m, pr, pc)?;
    Ok(max_over_mean(counts.iter().flatten().map(|&c| c as f64)))
}

/// Imbalance of a `ranks x stages` flop table.
///
/// End-to-end compares each rank's total work; per-stage charges every stage
/// at the pace of its busiest rank: `sum_s max_r / sum_s avg_r`.
pub fn table_imbalance(table: &[Vec<u64>]) -> Result<(f64, f64), AnalyticsError> {
    let stages = table.first().map_or(0, Vec::len);
    if table.iter().any(|r| r.len() != stages) {
        return Err(AnalyticsError::Dimension("ragged flop table".into()));
    }
    let end_to_end = max_over_mean(table.iter().map(|r| r.iter().sum::<u64>() as f64));
    let p = table.len() as f64;
    let (mut max_sum, mut avg_sum) = (0.0, 0.0);
    for s in 0..stages {
        let col = table.iter().map(|r| r[s] as f64);
        max_sum += col.clone().fold(0.0, f64::max);
        avg_sum += col.sum::<f64>() / p;
    }
    let per_stage = if avg_sum == 0.0 { 1.0 } else { max_sum / avg_sum };
    Ok((end_to_end, per_stage))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    /// Side of the square grid.
    pub grid: usize,
    /// Whether stage `s` of rank `(i, j)` uses `k = s + i + j` (otherwise `k = s`).
    pub offset: bool,
    pub per_tile_nnz: Vec<Vec<u64>>,
    pub nnz_imbalance: f64,
    pub per_stage_flop_imbalance: f64,
    pub end_to_end_flop_imbalance: f64,
    /// `stage_flops[rank][stage]`, rank `i * grid + j`.
    pub stage_flops: Vec<Vec<u64>>,
}

/// Flops of every `A[i,k] * A[k,j]` tile product on a `q x q` tiling of the
/// square matrix `a`, indexed `[i][j][k]`. Counts two flops per multiply-add.
pub fn tile_product_flops<T: Scalar>(a: &CsrTile<T>, q: usize) -> Result<Vec<Vec<Vec<u64>>>, AnalyticsError> {
    if a.rows() != a.cols() {
        return Err(AnalyticsError::Dimension(format!("A*A needs a square matrix, got {:?}", a.shape())));
    }
    if q == 0 {
        return Err(AnalyticsError::Grid("zero grid".into()));
    }
    let t = a.rows().div_ceil(q).max(1);
    // row_in_tile[c][j]: nonzeros of row c of A in column tile j
    let mut row_in_tile = vec![0u64; a.rows() * q];
    for c in 0..a.rows() {
        for &col in a.row(c).0 {
            row_in_tile[c * q + col / t] += 1;
        }
    }
    let mut f = vec![vec![vec![0u64; q]; q]; q];
    for r in 0..a.rows() {
        let i = r / t;
        for &c in a.row(r).0 {
            let k = c / t;
            for j in 0..q {
                f[i][j][k] += 2 * row_in_tile[c * q + j];
            }
        }
    }
    Ok(f)
}

/// Per-stage and end-to-end flop imbalance of a 2D stationary-C SpGEMM
/// `A * A` on a `q x q` grid with one tile per rank.
pub fn stage_imbalance<T: Scalar>(a: &CsrTile<T>, q: usize, offset: bool) -> Result<ImbalanceReport, AnalyticsError> {
    let f = tile_product_flops(a, q)?;
    let mut table = vec![vec![0u64; q]; q * q];
    for i in 0..q {
        for j in 0..q {
            for s in 0..q {
                let k = if offset { (s + i + j) % q } else { s };
                table[i * q + j][s] = f[i][j][k];
            }
        }
    }
    let (end_to_end, per_stage) = table_imbalance(&table)?;
    let per_tile_nnz = tile_nnz(a, q, q)?;
    Ok(ImbalanceReport {
        grid: q,
        offset,
        nnz_imbalance: max_over_mean(per_tile_nnz.iter().flatten().map(|&c| c as f64)),
        per_tile_nnz,
        per_stage_flop_imbalance: per_stage,
        end_to_end_flop_imbalance: end_to_end,
        stage_flops: table,
    })
}

impl ImbalanceReport {
    /// Columns `i,j,nnz`.
    pub fn write_tile_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "i,j,nnz")?;
        for (i, row) in self.per_tile_nnz.iter().enumerate() {
            for (j, n) in row.iter().enumerate() {
                writeln!(w, "{i},{j},{n}")?;
            }
        }
        Ok(())
    }

    /// Columns `rank,i,j,stage,flops`.
    pub fn write_stage_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "rank,i,j,stage,flops")?;
        for (r, row) in self.stage_flops.iter().enumerate() {
            for (s, fl) in row.iter().enumerate() {
                writeln!(w, "{r},{},{},{s},{fl}", r / self.grid, r % self.grid)?;
            }
        }
        Ok(())
    }

    /// Columns `metric,value`.
    pub fn write_summary_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "metric,value")?;
        writeln!(w, "grid,{}", self.grid)?;
        writeln!(w, "offset,{}", self.offset)?;
        writeln!(w, "nnz_imbalance,{}", self.nnz_imbalance)?;
        writeln!(w, "per_stage_flop_imbalance,{}", self.per_stage_flop_imbalance)?;
        writeln!(w, "end_to_end_flop_imbalance,{}", self.end_to_end_flop_imbalance)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualTimes {
    /// Time each rank finished its work, before the closing synchronization.
    pub work_done: Vec<f64>,
    /// Time each rank's log ends.
    pub finish: Vec<f64>,
    pub makespan: f64,
}

/// Recomputes per-rank virtual completion times of a measured run under
/// `cost`: each transfer costs latency plus bytes over the link's bandwidth,
/// each multiply its modeled compute time.
pub fn virtual_time(
    events: &[Vec<Event>],
    ranks: &[RankReport],
    cost: &CostModel,
    node_size: usize,
) -> Result<VirtualTimes, AnalyticsError> {
    if events.len() != ranks.len() {
        return Err(AnalyticsError::Dimension(format!(
            "{} event logs for {} ranks",
            events.len(),
            ranks.len()
        )));
    }
    let rp = replay(events, cost, node_size)?;
    let work_done = ranks
        .iter()
        .zip(&rp.event_times)
        .map(|(r, times)| match r.done_event {
            0 => 0.0,
            n => times.get(n - 1).copied().unwrap_or(0.0),
        })
        .collect();
    Ok(VirtualTimes {
        work_done,
        makespan: rp.makespan(),
        finish: rp.finish,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::algos::{run_multiply, MultiplyPlan, Problem, Tiling, Variant};
    use crate::distmat::ProcGrid;
    use crate::fabric::{Fabric, FabricConfig};
    use crate::gen_io::{random_dense, random_sparse, uniform_tiles};
    use crate::kernels::DenseTile;

    #[test]
    fn simple_imbalances() {
        let m: CsrTile<f64> = CsrTile::from_triplets(4, 4, (0..8).map(|n| (n / 4, n % 2, 1.0))).unwrap();
        let m = CsrTile::from_triplets(4, 4, m.iter().chain([(1, 0, 1.0)]).collect::<Vec<_>>()).unwrap();
        assert_eq!(tile_nnz(&m, 2, 2).unwrap(), vec![vec![4, 0], vec![0, 0]]);
        assert_eq!(nnz_imbalance(&m, 2, 2).unwrap(), 4.0);
        let u: CsrTile<f64> = uniform_tiles(16, 16, 16, 0.25, 1).unwrap();
        assert_eq!(nnz_imbalance(&u, 4, 4).unwrap(), 1.0);
        assert_eq!(nnz_imbalance(&CsrTile::<f64>::empty(4, 4), 2, 2).unwrap(), 1.0);
        assert!(nnz_imbalance(&u, 0, 2).is_err());
    }

    #[test]
    fn table_examples() {
        assert_eq!(table_imbalance(&[vec![2, 0], vec![0, 2]]).unwrap(), (1.0, 2.0));
        assert_eq!(table_imbalance(&[vec![3, 5, 1]]).unwrap(), (1.0, 1.0));
        assert!(table_imbalance(&[vec![1], vec![1, 2]]).is_err());
    }

    #[test]
    fn identical_tiles_are_balanced() {
        let t: CsrTile<f64> = random_sparse(4, 4, 0.5, 3);
        let a = CsrTile::assemble(12, 12, 4, 4, &vec![t; 9]).unwrap();
        let r = stage_imbalance(&a, 3, true).unwrap();
        assert_eq!((r.end_to_end_flop_imbalance, r.per_stage_flop_imbalance), (1.0, 1.0));
        let single = stage_imbalance(&a, 1, false).unwrap();
        assert_eq!((single.end_to_end_flop_imbalance, single.per_stage_flop_imbalance), (1.0, 1.0));
    }

    #[test]
    fn table_matches_measured_run() {
        // the flop table equals the per-step flops of a real stationary-C run
        let a: CsrTile<f64> = random_sparse(24, 24, 0.2, 5);
        for offset in [false, true] {
            let rep = stage_imbalance(&a, 3, offset).unwrap();
            let grid = ProcGrid::square(9).unwrap();
            let p = Problem::new(&a, &a, Tiling { tm: 8, tk: 8, tn: 8 }, grid);
            let f = Fabric::new(FabricConfig::new(9).heap_bytes(p.heap_bytes_hint())).unwrap();
            let plan = MultiplyPlan::new(Variant::StationaryC).with_offset(offset);
            let out = run_multiply(&f, &plan, &p).unwrap();
            let measured: Vec<Vec<u64>> = out.ranks.iter().map(|r| r.step_flops.clone()).collect();
            assert_eq!(measured, rep.stage_flops);
        }
    }

    #[test]
    fn csv_schema() {
        let a: CsrTile<f64> = random_sparse(8, 8, 0.5, 1);
        let r = stage_imbalance(&a, 2, false).unwrap();
        let mut buf = Vec::new();
        r.write_stage_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("rank,i,j,stage,flops\n"));
        assert_eq!(text.lines().count(), 1 + 4 * 2);
        let mut buf = Vec::new();
        r.write_tile_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    #[test]
    fn virtual_time_limits() {
        let a: CsrTile<f64> = random_sparse(16, 16, 0.3, 1);
        let b: DenseTile<f64> = random_dense(16, 8, 2);
        let p = Problem::new(&a, &b, Tiling { tm: 8, tk: 8, tn: 4 }, ProcGrid::square(4).unwrap());
        let f = Fabric::new(FabricConfig::new(4).heap_bytes(p.heap_bytes_hint())).unwrap();
        let out = run_multiply(&f, &MultiplyPlan::new(Variant::StationaryA), &p).unwrap();
        let cost = *f.cost();
        let vt = virtual_time(&out.events, &out.ranks, &cost, 6).unwrap();
        // replay under the run's own model reproduces the live clocks
        let live: Vec<f64> = out.ranks.iter().map(|r| r.work_done).collect();
        assert_eq!(vt.work_done, live);

        let mut fast = cost;
        fast.net_bw = f64::INFINITY;
        fast.intra_bw = f64::INFINITY;
        fast.self_bw = Some(f64::INFINITY);
        fast.latency = 0.0;
        let vt_fast = virtual_time(&out.events, &out.ranks, &fast, 6).unwrap();
        let compute_only: f64 = out.events[0]
            .iter()
            .map(|e| match e {
                Event::Compute { flops, bytes } => fast.compute_time(*flops, *bytes),
                _ => 0.0,
            })
            .sum();
        assert!(vt_fast.makespan <= vt.makespan);
        assert!(vt_fast.finish[0] >= compute_only - 1e-15);
        assert!(virtual_time(&out.events[..2], &out.ranks, &cost, 6).is_err());
    }

    proptest! {
        #[test]
        fn per_stage_dominates_end_to_end(table in prop::collection::vec(prop::collection::vec(0u64..1000, 5), 1..8)) {
            let (e, s) = table_imbalance(&table).unwrap();
            prop_assert!(e >= 1.0 - 1e-12);
            prop_assert!(s >= e - 1e-12);
        }

        #[test]
        fn fast_table_sums_to_total_flops(seed in any::<u64>(), q in 1usize..5) {
            let a: CsrTile<f64> = random_sparse(13, 13, 0.25, seed);
            let f = tile_product_flops(&a, q).unwrap();
            let total: u64 = f.iter().flatten().flatten().sum();
            prop_assert_eq!(total, crate::kernels::spgemm_flops(&a, &a).unwrap());
        }
    }
}
