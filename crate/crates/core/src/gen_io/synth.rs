use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{CsrTile, DenseTile};
use crate::scalar::Scalar;

use super::GenError;

fn small_int<R: Rng>(rng: &mut R) -> f64 {
    let v = rng.gen_range(1..=4) as f64;
    if rng.gen_bool(0.5) {
        -v
    } else {
        v
    }
}

/// Each entry is present with probability `d`; values are nonzero integers in
/// `[-4, 4]`, so products and sums stay exact in floating point.
pub fn random_sparse<T: Scalar>(rows: usize, cols: usize, d: f64, seed: u64) -> CsrTile<T> {
    tile_density_sparse(rows, cols, rows.max(1), cols.max(1), |_, _| d, seed)
}

/// Like [`random_sparse`] but with a per-tile density `density(i, j)` over a
/// grid of `tm x tn` tiles.
pub fn tile_density_sparse<T: Scalar>(
    rows: usize,
    cols: usize,
    tm: usize,
    tn: usize,
    density: impl Fn(usize, usize) -> f64,
    seed: u64,
) -> CsrTile<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trip = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let d = density(r / tm, c / tn).clamp(0.0, 1.0);
            if d > 0.0 && rng.gen_bool(d) {
                trip.push((r, c, T::from_f64(small_int(&mut rng))));
            }
        }
    }
    CsrTile::from_triplets(rows, cols, trip).expect("indices in range")
}

/// Dense matrix of integers in `[-4, 4]`.
pub fn random_dense<T: Scalar>(rows: usize, cols: usize, seed: u64) -> DenseTile<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseTile::from_fn(rows, cols, |_, _| T::from_f64(rng.gen_range(-4..=4) as f64))
}

/// `m x k` matrix on a `sqrt(p) x sqrt(p)` tiling where every tile holds
/// exactly `d * (m / sqrt p) * (k / sqrt p)` nonzeros at uniformly random
/// positions.
pub fn uniform_tiles<T: Scalar>(m: usize, k: usize, p: usize, d: f64, seed: u64) -> Result<CsrTile<T>, GenError> {
    let q = (p as f64).sqrt().round() as usize;
    if p == 0 || q * q != p {
        return Err(GenError::invalid(format!("p = {p} is not a perfect square")));
    }
    if m % q != 0 || k % q != 0 {
        return Err(GenError::invalid(format!("{m}x{k} does not split evenly into {q}x{q} tiles")));
    }
    if !(d > 0.0 && d <= 1.0) {
        return Err(GenError::invalid(format!("density {d} outside (0, 1]")));
    }
    let (tm, tk) = (m / q, k / q);
    let area = tm * tk;
    let want = d * area as f64;
    let per_tile = want.round();
    if (want - per_tile).abs() > 1e-9 * want.max(1.0) {
        return Err(GenError::invalid(format!(
            "d * tile area = {want} is not an integer; pick d as a multiple of 1/{area}"
        )));
    }
    let per_tile = per_tile as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trip = Vec::with_capacity(per_tile * p);
    for ti in 0..q {
        for tj in 0..q {
            for pos in sample(&mut rng, area, per_tile) {
                let v = T::from_f64(small_int(&mut rng));
                trip.push((ti * tm + pos / tk, tj * tk + pos % tk, v));
            }
        }
    }
    Ok(CsrTile::from_triplets(m, k, trip)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn uniform_full_density_is_dense() {
        let m: CsrTile<f64> = uniform_tiles(8, 12, 4, 1.0, 0).unwrap();
        assert_eq!(m.nnz(), 96);
    }

    #[test]
    fn uniform_rejects_bad_shapes() {
        assert!(uniform_tiles::<f64>(8, 8, 3, 0.5, 0).is_err());
        assert!(uniform_tiles::<f64>(9, 8, 4, 0.5, 0).is_err());
        assert!(uniform_tiles::<f64>(8, 8, 4, 0.3, 0).is_err());
        assert!(uniform_tiles::<f64>(8, 8, 4, 0.0, 0).is_err());
    }

    #[test]
    fn random_values_are_small_nonzero_integers() {
        let m: CsrTile<f64> = random_sparse(50, 50, 0.3, 1);
        assert!(m.values().iter().all(|v| v.fract() == 0.0 && *v != 0.0 && v.abs() <= 4.0));
        assert_eq!(m, random_sparse(50, 50, 0.3, 1));
        let d: DenseTile<f32> = random_dense(3, 4, 2);
        assert_eq!(d, random_dense(3, 4, 2));
    }

    #[test]
    fn tile_density_weights_tiles() {
        let m: CsrTile<f64> = tile_density_sparse(20, 20, 10, 10, |i, j| if (i, j) == (0, 0) { 1.0 } else { 0.0 }, 3);
        assert_eq!(m.nnz(), 100);
        assert!(m.iter().all(|(r, c, _)| r < 10 && c < 10));
    }

    proptest! {
        #[test]
        fn uniform_tiles_exact_counts(q in 1usize..5, t in 1usize..9, num in 1usize..8, seed in any::<u64>()) {
            let area = t * t;
            let per = num.min(area);
            let d = per as f64 / area as f64;
            let m: CsrTile<f32> = uniform_tiles(q * t, q * t, q * q, d, seed).unwrap();
            for tile in m.split_tiles(t, t) {
                prop_assert_eq!(tile.nnz(), per);
            }
        }
    }
}
