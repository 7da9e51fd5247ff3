use crate::scalar::Scalar;

use super::{DenseTile, KernelError};

/// Compressed-sparse-row tile.
///
/// Column indices are strictly increasing within each row. Explicit zeros are
/// allowed (numerically cancelled products are kept in the pattern).
#[derive(Clone, Debug, PartialEq)]
pub struct CsrTile<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrTile<T> {
    /// Builds a tile from raw arrays, checking every CSR invariant.
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self, KernelError> {
        let tile = CsrTile {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        tile.validate()?;
        Ok(tile)
    }

    pub(crate) fn from_parts_unchecked(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<T>,
    ) -> Self {
        let tile = CsrTile {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        debug_assert!(tile.validate().is_ok(), "{:?}", tile.validate());
        tile
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        CsrTile {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrTile {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    /// Builds a tile from unordered `(row, col, value)` triplets; duplicates
    /// are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, T)>,
    ) -> Result<Self, KernelError> {
        let mut entries: Vec<(usize, usize, T)> = triplets.into_iter().collect();
        for &(r, c, _) in &entries {
            if r >= rows || c >= cols {
                return Err(KernelError::MalformedCsr(format!(
                    "entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));

        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<T> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(CsrTile::from_parts_unchecked(rows, cols, row_ptr, col_idx, values))
    }

    /// Sparse copy of a dense tile, dropping exact zeros.
    pub fn from_dense(d: &DenseTile<T>) -> Self {
        let mut row_ptr = Vec::with_capacity(d.rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..d.rows() {
            for (c, &v) in d.row(r).iter().enumerate() {
                if v != T::zero() {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrTile::from_parts_unchecked(d.rows(), d.cols(), row_ptr, col_idx, values)
    }

    pub fn to_dense(&self) -> DenseTile<T> {
        let mut d = DenseTile::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                d.set(r, c, v);
            }
        }
        d
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let bad = |msg: String| Err(KernelError::MalformedCsr(msg));
        if self.row_ptr.len() != self.rows + 1 {
            return bad(format!(
                "row_ptr has {} entries for {} rows",
                self.row_ptr.len(),
                self.rows
            ));
        }
        if self.row_ptr[0] != 0 {
            return bad("row_ptr[0] != 0".into());
        }
        let nnz = self.col_idx.len();
        if self.values.len() != nnz {
            return bad(format!("{} values for {} column indices", self.values.len(), nnz));
        }
        if self.row_ptr[self.rows] != nnz {
            return bad(format!("row_ptr[rows] = {} but nnz = {}", self.row_ptr[self.rows], nnz));
        }
        for r in 0..self.rows {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            if lo > hi {
                return bad(format!("row_ptr decreases at row {r}"));
            }
            let row = &self.col_idx[lo..hi];
            for (n, &c) in row.iter().enumerate() {
                if c >= self.cols {
                    return bad(format!("column {c} out of range in row {r}"));
                }
                if n > 0 && row[n - 1] >= c {
                    return bad(format!("columns not strictly increasing in row {r}"));
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Values may be edited in place; the pattern may not.
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> (&[usize], &[T]) {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![T::zero(); self.nnz()];
        for (r, c, v) in self.iter() {
            let slot = next[c];
            next[c] += 1;
            col_idx[slot] = r;
            values[slot] = v;
        }
        CsrTile::from_parts_unchecked(self.cols, self.rows, row_ptr, col_idx, values)
    }

    /// Applies `f` to every stored value, keeping the pattern.
    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn sum(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Splits the matrix into a grid of `tm x tn` tiles (edge tiles shrink).
    /// Returned row-major: `tiles[i * ntiles_cols + j]`.
    pub fn split_tiles(&self, tm: usize, tn: usize) -> Vec<CsrTile<T>> {
        assert!(tm > 0 && tn > 0, "tile dims must be positive");
        let mt = self.rows.div_ceil(tm);
        let nt = self.cols.div_ceil(tn);
        let mut tiles = Vec::with_capacity(mt * nt);
        for ti in 0..mt {
            let r0 = ti * tm;
            let rows = tm.min(self.rows - r0);
            let mut parts: Vec<(Vec<usize>, Vec<usize>, Vec<T>)> = (0..nt)
                .map(|_| (vec![0usize], Vec::new(), Vec::new()))
                .collect();
            for r in r0..r0 + rows {
                let (cols, vals) = self.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    let part = &mut parts[c / tn];
                    part.1.push(c % tn);
                    part.2.push(v);
                }
                for part in parts.iter_mut() {
                    part.0.push(part.1.len());
                }
            }
            for (tj, (rp, ci, vs)) in parts.into_iter().enumerate() {
                let cols = tn.min(self.cols - tj * tn);
                tiles.push(CsrTile::from_parts_unchecked(rows, cols, rp, ci, vs));
            }
        }
        tiles
    }

    /// Inverse of [`CsrTile::split_tiles`].
    pub fn assemble(
        rows: usize,
        cols: usize,
        tm: usize,
        tn: usize,
        tiles: &[CsrTile<T>],
    ) -> Result<Self, KernelError> {
        let mt = rows.div_ceil(tm);
        let nt = cols.div_ceil(tn);
        if tiles.len() != mt * nt {
            return Err(KernelError::MalformedCsr(format!(
                "expected {} tiles, got {}",
                mt * nt,
                tiles.len()
            )));
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for ti in 0..mt {
            let tile_rows = tm.min(rows - ti * tm);
            for lr in 0..tile_rows {
                for tj in 0..nt {
                    let t = &tiles[ti * nt + tj];
                    let expect = (tile_rows, tn.min(cols - tj * tn));
                    if t.shape() != expect {
                        return Err(KernelError::dims("assemble", t.shape(), expect));
                    }
                    let (cs, vs) = t.row(lr);
                    col_idx.extend(cs.iter().map(|&c| c + tj * tn));
                    values.extend_from_slice(vs);
                }
                row_ptr.push(col_idx.len());
            }
        }
        Ok(CsrTile::from_parts_unchecked(rows, cols, row_ptr, col_idx, values))
    }
}
