use crate::scalar::Scalar;

use super::{CsrTile, DenseTile, FlopMeter, KernelError};

/// `c += a * b` for sparse `a` and dense `b`, `c`.
///
/// Flops are exactly `2 * nnz(a) * b.cols()`.
pub fn spmm_local<T: Scalar>(
    a: &CsrTile<T>,
    b: &DenseTile<T>,
    c: &mut DenseTile<T>,
) -> Result<FlopMeter, KernelError> {
    if a.cols() != b.rows() {
        return Err(KernelError::dims("spmm_local", a.shape(), b.shape()));
    }
    if c.shape() != (a.rows(), b.cols()) {
        return Err(KernelError::dims("spmm_local", c.shape(), (a.rows(), b.cols())));
    }
    for r in 0..a.rows() {
        let (cols, vals) = a.row(r);
        let out = c.row_mut(r);
        for (&k, &av) in cols.iter().zip(vals) {
            for (o, &bv) in out.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    Ok(FlopMeter::new(2 * a.nnz() as u64 * b.cols() as u64, 0))
}

/// Sparse times sparse product with a dense scratch accumulator per row.
///
/// Output rows are sorted. Entries that cancel to zero stay in the pattern so
/// that the meter reflects flops performed, not post-compression size.
pub fn spgemm_local<T: Scalar>(
    a: &CsrTile<T>,
    b: &CsrTile<T>,
) -> Result<(CsrTile<T>, FlopMeter), KernelError> {
    if a.cols() != b.rows() {
        return Err(KernelError::dims("spgemm_local", a.shape(), b.shape()));
    }
    let n = b.cols();
    let mut acc = vec![T::zero(); n];
    let mut stamp = vec![usize::MAX; n];
    let mut touched: Vec<usize> = Vec::new();

    let mut row_ptr = Vec::with_capacity(a.rows() + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    let mut flops = 0u64;
    row_ptr.push(0);

    for r in 0..a.rows() {
        touched.clear();
        let (acols, avals) = a.row(r);
        for (&k, &av) in acols.iter().zip(avals) {
            let (bcols, bvals) = b.row(k);
            flops += 2 * bcols.len() as u64;
            for (&j, &bv) in bcols.iter().zip(bvals) {
                if stamp[j] != r {
                    stamp[j] = r;
                    acc[j] = av * bv;
                    touched.push(j);
                } else {
                    acc[j] += av * bv;
                }
            }
        }
        touched.sort_unstable();
        for &j in &touched {
            col_idx.push(j);
            values.push(acc[j]);
        }
        row_ptr.push(col_idx.len());
    }
    let out_nnz = col_idx.len() as u64;
    let c = CsrTile::from_parts_unchecked(a.rows(), n, row_ptr, col_idx, values);
    Ok((c, FlopMeter::new(flops, out_nnz)))
}

/// Flops `spgemm_local(a, b)` would perform, without computing the product.
pub fn spgemm_flops<T: Scalar>(a: &CsrTile<T>, b: &CsrTile<T>) -> Result<u64, KernelError> {
    if a.cols() != b.rows() {
        return Err(KernelError::dims("spgemm_flops", a.shape(), b.shape()));
    }
    Ok(a.col_idx().iter().map(|&k| 2 * b.row_nnz(k) as u64).sum())
}

/// Sorted merge of two CSR tiles; coinciding entries are summed.
pub fn csr_add<T: Scalar>(a: &CsrTile<T>, b: &CsrTile<T>) -> Result<CsrTile<T>, KernelError> {
    if a.shape() != b.shape() {
        return Err(KernelError::dims("csr_add", a.shape(), b.shape()));
    }
    let mut row_ptr = Vec::with_capacity(a.rows() + 1);
    let mut col_idx = Vec::with_capacity(a.nnz() + b.nnz());
    let mut values = Vec::with_capacity(a.nnz() + b.nnz());
    row_ptr.push(0);
    for r in 0..a.rows() {
        let (ac, av) = a.row(r);
        let (bc, bv) = b.row(r);
        let (mut x, mut y) = (0, 0);
        while x < ac.len() || y < bc.len() {
            let take_a = y == bc.len() || (x < ac.len() && ac[x] <= bc[y]);
            let take_b = x == ac.len() || (y < bc.len() && bc[y] <= ac[x]);
            if take_a && take_b {
                col_idx.push(ac[x]);
                values.push(av[x] + bv[y]);
                x += 1;
                y += 1;
            } else if take_a {
                col_idx.push(ac[x]);
                values.push(av[x]);
                x += 1;
            } else {
                col_idx.push(bc[y]);
                values.push(bv[y]);
                y += 1;
            }
        }
        row_ptr.push(col_idx.len());
    }
    Ok(CsrTile::from_parts_unchecked(a.rows(), a.cols(), row_ptr, col_idx, values))
}

pub fn dense_add<T: Scalar>(a: &DenseTile<T>, b: &DenseTile<T>) -> Result<DenseTile<T>, KernelError> {
    let mut out = a.clone();
    dense_add_assign(&mut out, b)?;
    Ok(out)
}

pub(crate) fn dense_add_assign<T: Scalar>(a: &mut DenseTile<T>, b: &DenseTile<T>) -> Result<(), KernelError> {
    if a.shape() != b.shape() {
        return Err(KernelError::dims("dense_add", a.shape(), b.shape()));
    }
    for (x, &y) in a.values_mut().iter_mut().zip(b.values()) {
        *x += y;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Dense triple-loop oracle, independent of the CSR kernels.
    fn dense_product(a: &DenseTile<f64>, b: &DenseTile<f64>) -> DenseTile<f64> {
        let mut c = DenseTile::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn random_dense(rows: usize, cols: usize, density: f64, rng: &mut ChaCha8Rng) -> DenseTile<f64> {
        DenseTile::from_fn(rows, cols, |_, _| {
            if rng.gen_bool(density) {
                rng.gen_range(1..=4) as f64 * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
            } else {
                0.0
            }
        })
    }

    fn oracle_flops(a: &CsrTile<f64>, b: &CsrTile<f64>) -> u64 {
        let mut f = 0;
        for r in 0..a.rows() {
            for &k in a.row(r).0 {
                f += 2 * b.row(k).0.len() as u64;
            }
        }
        f
    }

    #[test]
    fn spmm_diagonal_scaling() {
        let a = CsrTile::<f32>::from_triplets(2, 2, [(0, 0, 1.0), (1, 1, 2.0)]).unwrap();
        let b = DenseTile::from_vec(2, 2, vec![1.0f32; 4]).unwrap();
        let mut c = DenseTile::zeros(2, 2);
        let m = spmm_local(&a, &b, &mut c).unwrap();
        assert_eq!(c.values(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(m.flops, 8);
    }

    #[test]
    fn spmm_empty_a_leaves_c() {
        let a = CsrTile::<f32>::empty(3, 2);
        let b = DenseTile::from_vec(2, 2, vec![5.0f32; 4]).unwrap();
        let mut c = DenseTile::from_fn(3, 2, |r, c| (r + c) as f32);
        let before = c.clone();
        let m = spmm_local(&a, &b, &mut c).unwrap();
        assert_eq!(c, before);
        assert_eq!(m.flops, 0);
    }

    #[test]
    fn spmm_dimension_mismatch() {
        let a = CsrTile::<f32>::empty(2, 3);
        let b = DenseTile::zeros(2, 2);
        let mut c = DenseTile::zeros(2, 2);
        assert!(matches!(
            spmm_local(&a, &b, &mut c),
            Err(KernelError::DimensionMismatch { .. })
        ));
        let b = DenseTile::zeros(3, 2);
        let mut c = DenseTile::zeros(3, 2);
        assert!(spmm_local(&a, &b, &mut c).is_err());
    }

    #[test]
    fn spmm_matches_triple_loop_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ad = random_dense(8, 8, 0.3, &mut rng);
        let b = random_dense(8, 4, 1.0, &mut rng);
        let mut c = DenseTile::zeros(8, 4);
        spmm_local(&CsrTile::from_dense(&ad), &b, &mut c).unwrap();
        assert_eq!(c, dense_product(&ad, &b));
    }

    #[test]
    fn spgemm_identity_left() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = CsrTile::from_dense(&random_dense(4, 4, 0.5, &mut rng));
        let (c, m) = spgemm_local(&CsrTile::identity(4), &a).unwrap();
        assert_eq!(c, a);
        if a.nnz() > 0 {
            assert_eq!(m.cf(), Some(2.0));
        }
    }

    #[test]
    fn spgemm_zero_annihilates() {
        let a = CsrTile::<f32>::identity(5);
        let (c, m) = spgemm_local(&a, &CsrTile::empty(5, 3)).unwrap();
        assert_eq!(c.nnz(), 0);
        assert_eq!(c.shape(), (5, 3));
        assert_eq!(m.flops, 0);
    }

    #[test]
    fn spgemm_keeps_cancelled_entries() {
        // row 0 of a = [1, 1]; b rows are [1] and [-1] -> explicit zero.
        let a = CsrTile::<f64>::from_triplets(1, 2, [(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let b = CsrTile::<f64>::from_triplets(2, 1, [(0, 0, 1.0), (1, 0, -1.0)]).unwrap();
        let (c, m) = spgemm_local(&a, &b).unwrap();
        assert_eq!(c.nnz(), 1);
        assert_eq!(c.values(), &[0.0]);
        assert_eq!(m, FlopMeter::new(4, 1));
    }

    #[test]
    fn spgemm_random_16x16_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ad = random_dense(16, 16, 0.2, &mut rng);
        let a = CsrTile::from_dense(&ad);
        let (c, m) = spgemm_local(&a, &a).unwrap();
        c.validate().unwrap();
        assert_eq!(c.to_dense(), dense_product(&ad, &ad));
        assert_eq!(m.flops, oracle_flops(&a, &a));
        assert_eq!(spgemm_flops(&a, &a).unwrap(), m.flops);
    }

    #[test]
    fn csr_add_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ad = random_dense(6, 9, 0.3, &mut rng);
        let bd = random_dense(6, 9, 0.3, &mut rng);
        let a = CsrTile::from_dense(&ad);
        let b = CsrTile::from_dense(&bd);
        assert_eq!(csr_add(&a, &CsrTile::empty(6, 9)).unwrap(), a);
        let twice = csr_add(&a, &a).unwrap();
        assert_eq!(twice.col_idx(), a.col_idx());
        assert_eq!(twice, a.map_values(|v| 2.0 * v));
        let sum = csr_add(&a, &b).unwrap();
        sum.validate().unwrap();
        assert_eq!(sum.to_dense(), dense_add(&ad, &bd).unwrap());
        assert!(csr_add(&a, &CsrTile::empty(9, 6)).is_err());
    }

    #[test]
    fn dense_add_cases() {
        let a = DenseTile::<f32>::from_fn(3, 2, |r, c| (r * 2 + c) as f32);
        let zero = DenseTile::zeros(3, 2);
        assert_eq!(dense_add(&a, &zero).unwrap(), a);
        let neg = DenseTile::from_fn(3, 2, |r, c| -a.get(r, c));
        assert_eq!(dense_add(&a, &neg).unwrap(), zero);
        let b = DenseTile::from_fn(3, 2, |r, c| (r * c) as f32 + 0.5);
        let s = dense_add(&a, &b).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(s.get(r, c), a.get(r, c) + b.get(r, c));
            }
        }
        assert!(dense_add(&a, &DenseTile::zeros(2, 3)).is_err());
    }

    fn density_strategy() -> impl Strategy<Value = f64> {
        prop_oneof![Just(0.05), Just(0.2), Just(0.5), Just(1.0)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        // Integer-valued tiles must match the dense oracle exactly.
        #[test]
        fn kernels_match_oracle_exactly(
            m in 1usize..=64, k in 1usize..=64, n in 1usize..=64,
            d in density_strategy(), seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ad = random_dense(m, k, d, &mut rng);
            let bd = random_dense(k, n, d, &mut rng);
            let a = CsrTile::from_dense(&ad);
            let b = CsrTile::from_dense(&bd);
            let expected = dense_product(&ad, &bd);

            let mut c = DenseTile::zeros(m, n);
            let meter = spmm_local(&a, &bd, &mut c).unwrap();
            prop_assert_eq!(&c, &expected);
            prop_assert_eq!(meter.flops, 2 * a.nnz() as u64 * n as u64);

            let (cs, meter) = spgemm_local(&a, &b).unwrap();
            prop_assert!(cs.validate().is_ok());
            prop_assert_eq!(cs.to_dense(), expected);
            prop_assert_eq!(meter.flops, oracle_flops(&a, &b));
            prop_assert_eq!(meter.output_nnz, cs.nnz() as u64);
        }

        #[test]
        fn f32_reals_within_tolerance(m in 1usize..=32, k in 1usize..=32, n in 1usize..=32, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ad = DenseTile::<f64>::from_fn(m, k, |_, _| if rng.gen_bool(0.3) { rng.gen_range(-1.0..1.0) } else { 0.0 });
            let bd = DenseTile::<f64>::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0));
            let expected = dense_product(&ad, &bd);
            let a32 = CsrTile::from_dense(&DenseTile::from_fn(m, k, |r, c| ad.get(r, c) as f32));
            let b32 = DenseTile::from_fn(k, n, |r, c| bd.get(r, c) as f32);
            let mut c32 = DenseTile::zeros(m, n);
            spmm_local(&a32, &b32, &mut c32).unwrap();
            let scale = expected.values().iter().fold(1.0f64, |s, v| s.max(v.abs()));
            for (x, y) in c32.values().iter().zip(expected.values()) {
                prop_assert!(((*x as f64) - y).abs() <= 1e-5 * scale);
            }
        }
    }
}
