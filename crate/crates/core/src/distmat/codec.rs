use crate::kernels::{csr_add, spgemm_local, spmm_local, CsrTile, DenseTile, FlopMeter, KernelError};
use crate::scalar::{IndexWidth, Scalar};

use super::DistError;

/// A tile kind that can be stored in a shared heap as a fixed number of byte
/// arrays, accumulated into, and used as the right operand and result of a
/// product with a sparse left tile.
pub trait TileCodec<T: Scalar>: Sized + Clone + Send + Sync + std::fmt::Debug + 'static {
    /// Number of separately allocated arrays per tile.
    const PARTS: usize;

    fn dims(&self) -> (usize, usize);
    fn zeros(rows: usize, cols: usize) -> Self;
    /// Stored entries (all entries for dense tiles).
    fn stored(&self) -> usize;
    /// Byte length of every part for a tile of the given shape.
    fn part_lens(rows: usize, cols: usize, stored: usize, idx: IndexWidth) -> Vec<usize>;
    fn encode(&self, idx: IndexWidth) -> Result<Vec<Vec<u8>>, DistError>;
    fn decode(rows: usize, cols: usize, parts: &[&[u8]], idx: IndexWidth) -> Result<Self, DistError>;
    fn accumulate(&mut self, other: &Self) -> Result<(), KernelError>;
    fn value_sum(&self) -> f64;
    /// Dense copy, for comparisons.
    fn to_dense(&self) -> DenseTile<T>;

    /// `c += a * b`.
    fn mul_acc(a: &CsrTile<T>, b: &Self, c: &mut Self) -> Result<FlopMeter, KernelError>;
    /// `a * b` as a fresh tile.
    fn product(a: &CsrTile<T>, b: &Self) -> Result<(Self, FlopMeter), KernelError>;

    /// Cuts a global matrix into `tm x tn` tiles, row-major.
    fn split(&self, tm: usize, tn: usize) -> Vec<Self>;
    /// Inverse of [`TileCodec::split`].
    fn assemble(rows: usize, cols: usize, tm: usize, tn: usize, tiles: &[Self]) -> Result<Self, KernelError>;

    fn encoded_bytes(&self, idx: IndexWidth) -> usize {
        let (r, c) = self.dims();
        Self::part_lens(r, c, self.stored(), idx).iter().sum()
    }
}

fn put_index(out: &mut [u8], v: usize, idx: IndexWidth) {
    match idx {
        IndexWidth::U32 => out[..4].copy_from_slice(&(v as u32).to_le_bytes()),
        IndexWidth::U64 => out[..8].copy_from_slice(&(v as u64).to_le_bytes()),
    }
}

fn read_index(b: &[u8], idx: IndexWidth) -> usize {
    match idx {
        IndexWidth::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as usize,
        IndexWidth::U64 => u64::from_le_bytes(b[..8].try_into().unwrap()) as usize,
    }
}

fn encode_values<T: Scalar>(vals: &[T]) -> Vec<u8> {
    let mut out = vec![0u8; vals.len() * T::BYTES];
    for (v, chunk) in vals.iter().zip(out.chunks_exact_mut(T::BYTES)) {
        v.write_le(chunk);
    }
    out
}

fn decode_values<T: Scalar>(b: &[u8]) -> Vec<T> {
    b.chunks_exact(T::BYTES).map(T::read_le).collect()
}

fn encode_indices(v: &[usize], idx: IndexWidth) -> Result<Vec<u8>, DistError> {
    let w = idx.bytes();
    let mut out = vec![0u8; v.len() * w];
    for (&x, chunk) in v.iter().zip(out.chunks_exact_mut(w)) {
        if x as u64 > idx.max_value() {
            return Err(DistError::IndexOverflow { value: x, width: w });
        }
        put_index(chunk, x, idx);
    }
    Ok(out)
}

fn check_lens(got: &[&[u8]], want: &[usize]) -> Result<(), DistError> {
    let got: Vec<usize> = got.iter().map(|p| p.len()).collect();
    if got != want {
        return Err(DistError::Corrupt(format!("part lengths {got:?}, expected {want:?}")));
    }
    Ok(())
}

impl<T: Scalar> TileCodec<T> for DenseTile<T> {
    const PARTS: usize = 1;

    fn dims(&self) -> (usize, usize) {
        self.shape()
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        DenseTile::zeros(rows, cols)
    }

    fn stored(&self) -> usize {
        self.rows() * self.cols()
    }

    fn part_lens(rows: usize, cols: usize, _stored: usize, _idx: IndexWidth) -> Vec<usize> {
        vec![rows * cols * T::BYTES]
    }

    fn encode(&self, _idx: IndexWidth) -> Result<Vec<Vec<u8>>, DistError> {
        Ok(vec![encode_values(self.values())])
    }

    fn decode(rows: usize, cols: usize, parts: &[&[u8]], idx: IndexWidth) -> Result<Self, DistError> {
        check_lens(parts, &Self::part_lens(rows, cols, rows * cols, idx))?;
        Ok(DenseTile::from_vec(rows, cols, decode_values(parts[0]))?)
    }

    fn accumulate(&mut self, other: &Self) -> Result<(), KernelError> {
        crate::kernels::dense_add_assign(self, other)
    }

    fn value_sum(&self) -> f64 {
        self.values().iter().map(|v| v.as_f64()).sum()
    }

    fn to_dense(&self) -> DenseTile<T> {
        self.clone()
    }

    fn mul_acc(a: &CsrTile<T>, b: &Self, c: &mut Self) -> Result<FlopMeter, KernelError> {
        spmm_local(a, b, c)
    }

    fn split(&self, tm: usize, tn: usize) -> Vec<Self> {
        assert!(tm > 0 && tn > 0, "tile dims must be positive");
        let (rows, cols) = self.shape();
        let mut out = Vec::new();
        for r0 in (0..rows).step_by(tm) {
            for c0 in (0..cols).step_by(tn) {
                out.push(self.block(r0, c0, tm.min(rows - r0), tn.min(cols - c0)));
            }
        }
        out
    }

    fn assemble(rows: usize, cols: usize, tm: usize, tn: usize, tiles: &[Self]) -> Result<Self, KernelError> {
        let nt = cols.div_ceil(tn);
        if tiles.len() != rows.div_ceil(tm) * nt {
            return Err(KernelError::BadDenseLength {
                expected: rows.div_ceil(tm) * nt,
                got: tiles.len(),
            });
        }
        let mut out = DenseTile::zeros(rows, cols);
        for (t, tile) in tiles.iter().enumerate() {
            let (r0, c0) = ((t / nt) * tm, (t % nt) * tn);
            let expect = (tm.min(rows - r0), tn.min(cols - c0));
            if tile.shape() != expect {
                return Err(KernelError::dims("assemble", tile.shape(), expect));
            }
            for r in 0..expect.0 {
                out.row_mut(r0 + r)[c0..c0 + expect.1].copy_from_slice(tile.row(r));
            }
        }
        Ok(out)
    }

    fn product(a: &CsrTile<T>, b: &Self) -> Result<(Self, FlopMeter), KernelError> {
        let mut c = DenseTile::zeros(a.rows(), b.cols());
        let fm = spmm_local(a, b, &mut c)?;
        Ok((c, fm))
    }
}

/// Parts are ordered values, row pointer, column indices.
impl<T: Scalar> TileCodec<T> for CsrTile<T> {
    const PARTS: usize = 3;

    fn dims(&self) -> (usize, usize) {
        self.shape()
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        CsrTile::empty(rows, cols)
    }

    fn stored(&self) -> usize {
        self.nnz()
    }

    fn part_lens(rows: usize, _cols: usize, nnz: usize, idx: IndexWidth) -> Vec<usize> {
        vec![nnz * T::BYTES, (rows + 1) * idx.bytes(), nnz * idx.bytes()]
    }

    fn encode(&self, idx: IndexWidth) -> Result<Vec<Vec<u8>>, DistError> {
        Ok(vec![
            encode_values(self.values()),
            encode_indices(self.row_ptr(), idx)?,
            encode_indices(self.col_idx(), idx)?,
        ])
    }

    fn decode(rows: usize, cols: usize, parts: &[&[u8]], idx: IndexWidth) -> Result<Self, DistError> {
        if parts.len() != 3 {
            return Err(DistError::Corrupt(format!("{} parts for a sparse tile", parts.len())));
        }
        let nnz = parts[0].len() / T::BYTES;
        check_lens(parts, &Self::part_lens(rows, cols, nnz, idx))?;
        let w = idx.bytes();
        let row_ptr = parts[1].chunks_exact(w).map(|b| read_index(b, idx)).collect();
        let col_idx = parts[2].chunks_exact(w).map(|b| read_index(b, idx)).collect();
        Ok(CsrTile::new(rows, cols, row_ptr, col_idx, decode_values(parts[0]))?)
    }

    fn accumulate(&mut self, other: &Self) -> Result<(), KernelError> {
        *self = csr_add(self, other)?;
        Ok(())
    }

    fn value_sum(&self) -> f64 {
        self.values().iter().map(|v| v.as_f64()).sum()
    }

    fn to_dense(&self) -> DenseTile<T> {
        CsrTile::to_dense(self)
    }

    fn mul_acc(a: &CsrTile<T>, b: &Self, c: &mut Self) -> Result<FlopMeter, KernelError> {
        let (prod, fm) = spgemm_local(a, b)?;
        if prod.nnz() > 0 {
            *c = csr_add(c, &prod)?;
        } else if c.shape() != prod.shape() {
            return Err(KernelError::dims("accumulate", c.shape(), prod.shape()));
        }
        Ok(fm)
    }

    fn product(a: &CsrTile<T>, b: &Self) -> Result<(Self, FlopMeter), KernelError> {
        spgemm_local(a, b)
    }

    fn split(&self, tm: usize, tn: usize) -> Vec<Self> {
        self.split_tiles(tm, tn)
    }

    fn assemble(rows: usize, cols: usize, tm: usize, tn: usize, tiles: &[Self]) -> Result<Self, KernelError> {
        CsrTile::assemble(rows, cols, tm, tn, tiles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CsrTile<f32> {
        CsrTile::from_triplets(3, 4, vec![(0, 1, 2.0), (2, 0, -1.0), (2, 3, 5.0)]).unwrap()
    }

    #[test]
    fn sparse_round_trip_both_widths() {
        let t = sample();
        for idx in [IndexWidth::U32, IndexWidth::U64] {
            let parts = t.encode(idx).unwrap();
            let lens: Vec<usize> = parts.iter().map(Vec::len).collect();
            assert_eq!(lens, vec![3 * 4, 4 * idx.bytes(), 3 * idx.bytes()]);
            let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
            assert_eq!(CsrTile::decode(3, 4, &refs, idx).unwrap(), t);
        }
    }

    #[test]
    fn dense_round_trip() {
        let d = DenseTile::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        let parts = d.encode(IndexWidth::U32).unwrap();
        assert_eq!(parts[0].len(), 48);
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        assert_eq!(DenseTile::decode(2, 3, &refs, IndexWidth::U32).unwrap(), d);
    }

    #[test]
    fn corrupt_parts_are_rejected() {
        let parts = sample().encode(IndexWidth::U32).unwrap();
        let refs: Vec<&[u8]> = vec![&parts[0], &parts[1][..8], &parts[2]];
        assert!(CsrTile::<f32>::decode(3, 4, &refs, IndexWidth::U32).is_err());
    }

    #[test]
    fn sparse_mul_acc_streams() {
        let a = CsrTile::<f32>::identity(3);
        let b = sample();
        let mut c = CsrTile::empty(3, 4);
        let fm = CsrTile::mul_acc(&a, &b, &mut c).unwrap();
        CsrTile::mul_acc(&a, &b, &mut c).unwrap();
        assert_eq!(fm.flops, 6);
        assert_eq!(c, b.map_values(|v| v * 2.0));
    }

    #[test]
    fn dense_split_assemble() {
        let d = DenseTile::from_fn(5, 7, |r, c| (r * 7 + c) as f32);
        let tiles = d.split(2, 3);
        assert_eq!(tiles.len(), 9);
        assert_eq!(tiles[8].shape(), (1, 1));
        assert_eq!(DenseTile::assemble(5, 7, 2, 3, &tiles).unwrap(), d);
        assert!(DenseTile::assemble(5, 7, 2, 3, &tiles[1..]).is_err());
    }
}
