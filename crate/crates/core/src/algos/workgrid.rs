use crate::fabric::{GlobalPtr, RankCtx};

use super::AlgoError;

/// Fabric-resident reservation counters, one 8-byte cell per unit of work.
/// A fetch-add on a cell returns the next unclaimed reservation number, so
/// the values handed out for one cell are exactly `0, 1, 2, ...`.
#[derive(Debug)]
pub struct WorkGrid {
    dims: Vec<usize>,
    cells: Vec<GlobalPtr>,
    block: Option<GlobalPtr>,
}

impl WorkGrid {
    /// Collective. `host(cell)` names the rank that stores each linear cell;
    /// every rank must pass the same dims and host function.
    pub fn new(ctx: &mut RankCtx<'_>, dims: &[usize], host: impl Fn(usize) -> usize) -> Result<Self, AlgoError> {
        let total: usize = dims.iter().product();
        let hosts: Vec<usize> = (0..total).map(&host).collect();
        let mine = hosts.iter().filter(|&&h| h == ctx.rank()).count();
        let block = (mine > 0).then(|| ctx.alloc(mine * 8)).transpose()?;
        let blocks = ctx.allgather((dims.to_vec(), block))?;
        let mut used = vec![0usize; ctx.ranks()];
        let mut cells = Vec::with_capacity(total);
        for &h in &hosts {
            let (d, b) = &blocks[h];
            if d != dims {
                return Err(AlgoError::InvalidPlan(format!("work grid dims differ: {d:?} vs {dims:?}")));
            }
            let b = b.ok_or_else(|| AlgoError::InvalidPlan(format!("rank {h} hosts no work cells")))?;
            cells.push(b.slice(used[h] * 8, 8));
            used[h] += 1;
        }
        Ok(WorkGrid {
            dims: dims.to_vec(),
            cells,
            block,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Row-major linear index.
    pub fn linear(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn host(&self, cell: usize) -> usize {
        self.cells[cell].rank
    }

    /// Claims the next reservation number of a linear cell.
    pub fn reserve(&self, ctx: &mut RankCtx<'_>, cell: usize) -> Result<u64, AlgoError> {
        Ok(ctx.fetch_add(self.cells[cell], 1)? as u64)
    }

    /// Collective release.
    pub fn free(self, ctx: &mut RankCtx<'_>) -> Result<(), AlgoError> {
        ctx.barrier()?;
        if let Some(b) = self.block {
            ctx.free(b)?;
        }
        Ok(())
    }
}
