use crate::distmat::TileCodec;
use crate::kernels::{CsrTile, DenseTile, KernelError};
use crate::scalar::Scalar;

/// Serial reference `C0 + A * B` by the plain triple loop over the stored
/// entries of `A`, in dense form.
pub fn serial_product<T: Scalar, Bt: TileCodec<T>>(a: &CsrTile<T>, b: &Bt, c0: Option<&Bt>) -> Result<DenseTile<T>, KernelError> {
    let bd = b.to_dense();
    if a.cols() != bd.rows() {
        return Err(KernelError::dims("oracle", a.shape(), bd.shape()));
    }
    let mut c = match c0 {
        Some(c0) => c0.to_dense(),
        None => DenseTile::zeros(a.rows(), bd.cols()),
    };
    if c.shape() != (a.rows(), bd.cols()) {
        return Err(KernelError::dims("oracle", c.shape(), (a.rows(), bd.cols())));
    }
    for i in 0..a.rows() {
        let (cols, vals) = a.row(i);
        for (&k, &v) in cols.iter().zip(vals) {
            let brow = bd.row(k);
            for (cij, &bkj) in c.row_mut(i).iter_mut().zip(brow) {
                *cij += v * bkj;
            }
        }
    }
    Ok(c)
}

/// Flops of `A * B` counted by the serial kernel.
pub fn serial_flops<T: Scalar, Bt: TileCodec<T>>(a: &CsrTile<T>, b: &Bt) -> Result<u64, KernelError> {
    Ok(Bt::product(a, b)?.1.flops)
}

/// Exact equality of a computed result with the oracle.
pub fn verify<T: Scalar, Bt: TileCodec<T>>(c: &Bt, oracle: &DenseTile<T>) -> bool {
    c.to_dense() == *oracle
}
