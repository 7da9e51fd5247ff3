use std::collections::HashMap;
use std::time::Instant;

use crate::distmat::{DistMatrix, DistSparse, TileCodec};
use crate::fabric::RankCtx;
use crate::scalar::Scalar;

use super::{commit_tile, multiply_bytes, AlgoError, Delayer, MultiplyPlan, RankReport};

/// Bulk-synchronous SUMMA: phase `k` delivers tile column `k` of A along
/// processor rows and tile row `k` of B along processor columns, then every
/// rank updates its C tiles. Phases are separated by barriers. The broadcast
/// is emulated by each consumer fetching the tile once per phase.
pub(crate) fn summa_bsp<T: Scalar, Bt: TileCodec<T>>(
    ctx: &mut RankCtx<'_>,
    plan: &MultiplyPlan,
    a: &DistSparse<T>,
    b: &DistMatrix<T, Bt>,
    c: &mut DistMatrix<T, Bt>,
) -> Result<RankReport, AlgoError> {
    for g in [a.grid(), b.grid(), c.grid()] {
        if !g.is_square() {
            return Err(AlgoError::NonSquareGrid { pr: g.pr, pc: g.pc });
        }
    }
    let started = Instant::now();
    let mut rep = RankReport::new(ctx.rank());
    let mut delayer = Delayer::new(plan.delays, ctx.rank());
    let kt = a.tiles_n();
    rep.step_flops = vec![0; kt];
    let owned = c.owned();
    let mut acc = Vec::with_capacity(owned.len());
    for &(i, j) in &owned {
        acc.push(c.read_local(ctx, i, j)?);
    }
    for k in 0..kt {
        ctx.set_label(k as u32);
        let mut a_row: HashMap<usize, _> = HashMap::new();
        let mut b_col: HashMap<usize, Bt> = HashMap::new();
        for (&(i, j), cij) in owned.iter().zip(acc.iter_mut()) {
            if !a_row.contains_key(&i) {
                a_row.insert(i, a.get_tile(ctx, i, k)?);
            }
            if !b_col.contains_key(&j) {
                b_col.insert(j, b.get_tile(ctx, k, j)?);
            }
            let (at, bt) = (&a_row[&i], &b_col[&j]);
            let fm = Bt::mul_acc(at, bt, cij)?;
            ctx.compute(fm.flops, multiply_bytes(at, bt, cij, a.index_width()));
            delayer.after_multiply(ctx);
            rep.flops += fm.flops;
            rep.product_nnz += fm.output_nnz;
            rep.step_flops[k] += fm.flops;
            rep.executed.push([i, j, k]);
        }
        ctx.barrier()?;
    }
    rep.owned_done = ctx.clock();
    rep.mark_done(ctx);
    for (&(i, j), t) in owned.iter().zip(&acc) {
        commit_tile(ctx, c, i, j, t)?;
    }
    c.renew_tiles(ctx)?;
    rep.close(ctx, started);
    Ok(rep)
}
