use std::time::Instant;

use crate::distmat::{DistMatrix, DistSparse, TileCodec};
use crate::fabric::RankCtx;
use crate::scalar::Scalar;

use super::{commit_tile, multiply_bytes, AlgoError, Delayer, MultiplyPlan, RankReport};

/// Stationary C: each owner of `C[i,j]` fetches `A[i,k]` and `B[k,j]` for
/// every `k` with one-sided gets and accumulates locally. With `offset` the
/// loop starts at `k = i + j`; with `prefetch` the next step's two tiles are
/// requested before the current multiply. A single barrier ends the run.
///
/// Traffic of step `t` of the `n`-th owned tile is labeled `n * K + t`.
pub(crate) fn stationary_c<T: Scalar, Bt: TileCodec<T>>(
    ctx: &mut RankCtx<'_>,
    plan: &MultiplyPlan,
    a: &DistSparse<T>,
    b: &DistMatrix<T, Bt>,
    c: &mut DistMatrix<T, Bt>,
) -> Result<RankReport, AlgoError> {
    let started = Instant::now();
    let mut rep = RankReport::new(ctx.rank());
    let mut delayer = Delayer::new(plan.delays, ctx.rank());
    let kt = a.tiles_n();
    rep.step_flops = vec![0; kt];
    let owned = c.owned();
    let mut results = Vec::with_capacity(owned.len());
    for (n, &(i, j)) in owned.iter().enumerate() {
        let mut cij = c.read_local(ctx, i, j)?;
        let off = if plan.offset { i + j } else { 0 };
        let k_at = |t: usize| (t + off) % kt;
        let label = |t: usize| (n * kt + t) as u32;
        let mut next = None;
        if plan.prefetch && kt > 0 {
            ctx.set_label(label(0));
            next = Some((a.async_get_tile(ctx, i, k_at(0))?, b.async_get_tile(ctx, k_at(0), j)?));
        }
        for t in 0..kt {
            let k = k_at(t);
            let (at, bt) = match next.take() {
                Some((fa, fb)) => {
                    if t + 1 < kt {
                        ctx.set_label(label(t + 1));
                        next = Some((a.async_get_tile(ctx, i, k_at(t + 1))?, b.async_get_tile(ctx, k_at(t + 1), j)?));
                    }
                    (a.resolve(ctx, fa)?, b.resolve(ctx, fb)?)
                }
                None => {
                    ctx.set_label(label(t));
                    (a.get_tile(ctx, i, k)?, b.get_tile(ctx, k, j)?)
                }
            };
            let fm = Bt::mul_acc(&at, &bt, &mut cij)?;
            ctx.compute(fm.flops, multiply_bytes(&at, &bt, &cij, a.index_width()));
            delayer.after_multiply(ctx);
            rep.flops += fm.flops;
            rep.product_nnz += fm.output_nnz;
            rep.step_flops[t] += fm.flops;
            rep.executed.push([i, j, k]);
        }
        results.push(cij);
    }
    rep.owned_done = ctx.clock();
    rep.mark_done(ctx);
    for (&(i, j), t) in owned.iter().zip(&results) {
        commit_tile(ctx, c, i, j, t)?;
    }
    ctx.barrier()?;
    c.renew_tiles(ctx)?;
    rep.close(ctx, started);
    Ok(rep)
}
