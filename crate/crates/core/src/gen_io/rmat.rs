use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernels::CsrTile;
use crate::scalar::Scalar;

use super::GenError;

pub const MAX_RMAT_SCALE: u32 = 26;

/// What a repeated edge turns into.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicateMode {
    /// One entry with value 1.
    #[default]
    Collapse,
    /// One entry whose value is the number of times the edge was drawn.
    Multiplicity,
}

/// Recursive-matrix generator parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmatParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    /// log2 of the vertex count.
    pub scale: u32,
    /// Edges sampled per vertex.
    pub edgefactor: u32,
    pub seed: u64,
    pub duplicates: DuplicateMode,
    /// Relabel vertices with a seeded random permutation after sampling.
    /// Plain R-MAT piles the heavy rows and columns into the low indices.
    pub permute: bool,
}

impl RmatParams {
    /// `a = 0.6`, `b = c = d = 0.4/3`, edgefactor 8.
    pub fn graph500_like(scale: u32, seed: u64) -> Self {
        let r = 0.4 / 3.0;
        RmatParams {
            a: 0.6,
            b: r,
            c: r,
            d: r,
            scale,
            edgefactor: 8,
            seed,
            duplicates: DuplicateMode::Collapse,
            permute: false,
        }
    }

    pub fn with_permute(mut self, permute: bool) -> Self {
        self.permute = permute;
        self
    }

    pub fn with_duplicates(mut self, mode: DuplicateMode) -> Self {
        self.duplicates = mode;
        self
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let q = [self.a, self.b, self.c, self.d];
        if q.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GenError::invalid(format!("quadrant probabilities must be nonnegative, got {q:?}")));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GenError::invalid(format!("quadrant probabilities sum to {total}, not 1")));
        }
        if self.scale > MAX_RMAT_SCALE {
            return Err(GenError::invalid(format!("scale {} exceeds {MAX_RMAT_SCALE}", self.scale)));
        }
        Ok(())
    }

    pub fn vertices(&self) -> usize {
        1usize << self.scale
    }

    pub fn edges(&self) -> usize {
        self.vertices() * self.edgefactor as usize
    }
}

/// Samples `edgefactor * 2^scale` edges of a `2^scale x 2^scale` matrix.
pub fn rmat<T: Scalar>(p: &RmatParams) -> Result<CsrTile<T>, GenError> {
    p.validate()?;
    let n = p.vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (ab, abc) = (p.a + p.b, p.a + p.b + p.c);
    let mut edges = Vec::with_capacity(p.edges());
    for _ in 0..p.edges() {
        let (mut r, mut c) = (0usize, 0usize);
        for _ in 0..p.scale {
            let u: f64 = rng.gen();
            let (dr, dc) = if u < p.a {
                (0, 0)
            } else if u < ab {
                (0, 1)
            } else if u < abc {
                (1, 0)
            } else {
                (1, 1)
            };
            r = (r << 1) | dr;
            c = (c << 1) | dc;
        }
        edges.push((r, c));
    }
    if p.permute {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for e in edges.iter_mut() {
            *e = (perm[e.0], perm[e.1]);
        }
    }
    let one = T::from_f64(1.0);
    let mut m = CsrTile::from_triplets(n, n, edges.into_iter().map(|(r, c)| (r, c, one)))?;
    if p.duplicates == DuplicateMode::Collapse {
        m = m.map_values(|_| one);
    }
    Ok(m)
}
