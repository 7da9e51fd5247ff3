//! Communication-volume and roofline model for 2D tiled SpMM / SpGEMM on a
//! `sqrt(p) x sqrt(p)` processor grid.
//!
//! All element counts are per rank and per iteration of the stationary-C inner
//! loop. Sparse tiles are approximated as holding `d * (tile area)` nonzeros.
//! Edge tiles are ignored; the model assumes uniform tiles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("rank count {0} is not a perfect square")]
    NotSquare(u64),
    #[error("invalid parameter {name} = {value}")]
    Invalid { name: &'static str, value: f64 },
    #[error("SpGEMM roofline needs measured flops and compression factor")]
    MissingMeasurement,
}

/// Whether the sparse matrix multiplies a dense or a sparse operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProductKind {
    Spmm,
    Spgemm,
}

impl std::fmt::Display for ProductKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProductKind::Spmm => "spmm",
            ProductKind::Spgemm => "spgemm",
        })
    }
}

impl std::str::FromStr for ProductKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "spmm" => Ok(ProductKind::Spmm),
            "spgemm" => Ok(ProductKind::Spgemm),
            other => Err(format!("unknown kind '{other}' (expected spmm or spgemm)")),
        }
    }
}

/// Machine parameters. Bandwidths are bytes/s, `arith_peak` is flops/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Per-rank share of network injection bandwidth.
    pub net_bw: f64,
    /// Bandwidth between ranks of the same node group.
    pub intra_bw: f64,
    /// Local memory bandwidth.
    pub mem_bw: f64,
    /// Bandwidth of copies a rank makes from its own heap; `mem_bw` if unset.
    #[serde(default)]
    pub self_bw: Option<f64>,
    pub arith_peak: f64,
    /// Bytes per matrix value.
    pub w: usize,
    /// Seconds added to every transfer.
    pub latency: f64,
    /// When false, local multiplies take no virtual time.
    #[serde(default = "default_true")]
    pub model_compute: bool,
}

fn default_true() -> bool {
    true
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::summit()
    }
}

impl CostModel {
    /// Summit-like V100 node: 3.83 GB/s injection share per GPU, 50 GB/s
    /// NVLink, 900 GB/s HBM2, 16 TFlop/s fp32.
    pub fn summit() -> Self {
        CostModel {
            net_bw: 3.83e9,
            intra_bw: 50e9,
            mem_bw: 900e9,
            self_bw: None,
            arith_peak: 16e12,
            w: 4,
            latency: 0.0,
            model_compute: true,
        }
    }

    /// Every transfer, including intra-node and self copies, runs at `net_bw`
    /// and computation is free. Memory bandwidth and peak are effectively
    /// unbounded so the roofline reduces to the network slope.
    pub fn pure_network(net_bw: f64) -> Self {
        CostModel {
            net_bw,
            intra_bw: net_bw,
            mem_bw: 1e30,
            self_bw: Some(net_bw),
            arith_peak: 1e30,
            w: 4,
            latency: 0.0,
            model_compute: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in [
            ("net_bw", self.net_bw),
            ("intra_bw", self.intra_bw),
            ("mem_bw", self.mem_bw),
            ("self_bw", self.self_bw.unwrap_or(self.mem_bw)),
            ("arith_peak", self.arith_peak),
        ] {
            if !(value > 0.0) {
                return Err(ModelError::Invalid { name, value });
            }
        }
        if !(self.latency >= 0.0) {
            return Err(ModelError::Invalid {
                name: "latency",
                value: self.latency,
            });
        }
        if self.w != 4 && self.w != 8 {
            return Err(ModelError::Invalid {
                name: "w",
                value: self.w as f64,
            });
        }
        Ok(())
    }

    pub fn link_bw(&self, link: LinkClass) -> f64 {
        match link {
            LinkClass::SelfRank => self.self_bw.unwrap_or(self.mem_bw),
            LinkClass::IntraNode => self.intra_bw,
            LinkClass::InterNode => self.net_bw,
        }
    }

    pub fn transfer_time(&self, link: LinkClass, bytes: u64) -> f64 {
        self.latency + bytes as f64 / self.link_bw(link)
    }

    /// A remote atomic is a round trip carrying one 8-byte word.
    pub fn atomic_time(&self, link: LinkClass) -> f64 {
        2.0 * self.latency + 8.0 / self.link_bw(link)
    }

    /// Local multiply time: the slower of the arithmetic and memory terms,
    /// i.e. `flops / local_peak` for this multiply's own intensity.
    pub fn compute_time(&self, flops: u64, bytes: u64) -> f64 {
        if !self.model_compute {
            return 0.0;
        }
        (flops as f64 / self.arith_peak).max(bytes as f64 / self.mem_bw)
    }
}

/// Where a transfer goes relative to its initiator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    SelfRank,
    IntraNode,
    InterNode,
}

/// Global problem dimensions for `C (m x n) = A (m x k) * B (k x n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemShape {
    pub m: f64,
    pub k: f64,
    pub n: f64,
    pub p: u64,
    /// Density of the sparse operand(s).
    pub d: f64,
    /// Bytes per value.
    pub w: usize,
    /// Bytes per CSR index.
    #[serde(default = "default_idx")]
    pub idx_bytes: usize,
    /// Accept a rank count that is not a perfect square and use the real
    /// square root (how the formulas are evaluated for e.g. 24 ranks).
    #[serde(default)]
    pub fractional_grid: bool,
}

fn default_idx() -> usize {
    4
}

impl ProblemShape {
    pub fn new(m: f64, k: f64, n: f64, p: u64, d: f64) -> Self {
        ProblemShape {
            m,
            k,
            n,
            p,
            d,
            w: 4,
            idx_bytes: 4,
            fractional_grid: false,
        }
    }

    pub fn with_fractional_grid(mut self) -> Self {
        self.fractional_grid = true;
        self
    }

    pub fn with_word(mut self, w: usize, idx_bytes: usize) -> Self {
        self.w = w;
        self.idx_bytes = idx_bytes;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in [("m", self.m), ("k", self.k), ("n", self.n)] {
            if !(value > 0.0) {
                return Err(ModelError::Invalid { name, value });
            }
        }
        if self.p == 0 {
            return Err(ModelError::Invalid { name: "p", value: 0.0 });
        }
        if !(self.d > 0.0 && self.d <= 1.0) {
            return Err(ModelError::Invalid { name: "d", value: self.d });
        }
        if self.w == 0 || self.idx_bytes == 0 {
            return Err(ModelError::Invalid {
                name: "w",
                value: self.w as f64,
            });
        }
        self.sqrt_p().map(|_| ())
    }

    pub fn sqrt_p(&self) -> Result<f64, ModelError> {
        let root = (self.p as f64).sqrt().round() as u64;
        if root * root == self.p {
            Ok(root as f64)
        } else if self.fractional_grid {
            Ok((self.p as f64).sqrt())
        } else {
            Err(ModelError::NotSquare(self.p))
        }
    }

    fn p(&self) -> f64 {
        self.p as f64
    }
}

/// Elements in one sparse A tile: values and column indices (`2dmk/p`) plus
/// the row pointer (`m/sqrt(p) + 1`).
pub fn sparse_a_tile_elems(s: &ProblemShape) -> Result<f64, ModelError> {
    s.validate()?;
    Ok(2.0 * s.d * s.m * s.k / s.p() + s.m / s.sqrt_p()? + 1.0)
}

/// Elements in one sparse B tile (the SpGEMM right operand).
pub fn sparse_b_tile_elems(s: &ProblemShape) -> Result<f64, ModelError> {
    s.validate()?;
    Ok(2.0 * s.d * s.k * s.n / s.p() + s.k / s.sqrt_p()? + 1.0)
}

pub fn dense_b_tile_elems(s: &ProblemShape) -> Result<f64, ModelError> {
    s.validate()?;
    Ok(s.k * s.n / s.p())
}

pub fn dense_c_tile_elems(s: &ProblemShape) -> Result<f64, ModelError> {
    s.validate()?;
    Ok(s.m * s.n / s.p())
}

/// Elements each rank receives per stationary-C SpMM iteration:
/// `kn/p + 2dmk/p + m/sqrt(p) + 1`.
pub fn comm_elems_per_iter(s: &ProblemShape) -> Result<f64, ModelError> {
    Ok(dense_b_tile_elems(s)? + sparse_a_tile_elems(s)?)
}

/// Bytes per SpMM iteration with values and indices sized separately:
/// `w (kn/p + dmk/p) + idx (dmk/p + m/sqrt(p) + 1)`.
/// Equals `w * comm_elems_per_iter` exactly when `idx_bytes == w`.
pub fn comm_bytes_per_iter(s: &ProblemShape) -> Result<f64, ModelError> {
    s.validate()?;
    let nnz = s.d * s.m * s.k / s.p();
    let w = s.w as f64;
    let idx = s.idx_bytes as f64;
    Ok(w * (s.k * s.n / s.p() + nnz) + idx * (nnz + s.m / s.sqrt_p()? + 1.0))
}

/// Flops in one local SpMM of an A tile against a B tile.
pub fn spmm_flops_per_iter(s: &ProblemShape) -> Result<f64, ModelError> {
    s.validate()?;
    Ok(2.0 * (s.d * s.m * s.k / s.p()) * (s.n / s.sqrt_p()?))
}

/// Flops over the bytes of the A, B and C tiles.
pub fn spmm_local_ai(s: &ProblemShape) -> Result<f64, ModelError> {
    let bytes = s.w as f64 * (sparse_a_tile_elems(s)? + dense_c_tile_elems(s)? + dense_b_tile_elems(s)?);
    Ok(spmm_flops_per_iter(s)? / bytes)
}

/// Flops over the bytes of the A and B tiles moved across the network.
pub fn spmm_internode_ai(s: &ProblemShape) -> Result<f64, ModelError> {
    let bytes = s.w as f64 * comm_elems_per_iter(s)?;
    Ok(spmm_flops_per_iter(s)? / bytes)
}

/// Local SpGEMM intensity bound `cf / ((3 + 2 cf) b)` with `b` bytes per
/// nonzero.
pub fn spgemm_local_ai(cf: f64, nnz_bytes: f64) -> Result<f64, ModelError> {
    if !(cf > 0.0) {
        return Err(ModelError::Invalid { name: "cf", value: cf });
    }
    if !(nnz_bytes > 0.0) {
        return Err(ModelError::Invalid {
            name: "b",
            value: nnz_bytes,
        });
    }
    Ok(cf / ((3.0 + 2.0 * cf) * nnz_bytes))
}

/// Measured flops of one component multiply over the bytes of one sparse A
/// and one sparse B tile.
pub fn spgemm_internode_ai(flops: f64, s: &ProblemShape) -> Result<f64, ModelError> {
    if !(flops > 0.0) {
        return Err(ModelError::Invalid {
            name: "flops",
            value: flops,
        });
    }
    let bytes = s.w as f64 * (sparse_a_tile_elems(s)? + sparse_b_tile_elems(s)?);
    Ok(flops / bytes)
}

/// Experimentally measured SpGEMM quantities (never estimated).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredSpgemm {
    /// Average flops per component multiply.
    pub flops_per_iter: f64,
    /// Flops per output nonzero.
    pub cf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    NetworkBound,
    ComputeBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RooflineReport {
    pub kind: ProductKind,
    pub shape: ProblemShape,
    pub cost: CostModel,
    pub flops_per_iter: f64,
    pub local_ai: f64,
    pub internode_ai: f64,
    /// `min(arith_peak, local_ai * mem_bw)`.
    pub local_peak: f64,
    /// `min(local_peak, internode_ai * net_bw)`.
    pub internode_bound: f64,
    pub bound_kind: BoundKind,
    /// Set when indices are counted with their own width instead of `w`.
    pub index_bytes_extended: bool,
}

/// Evaluates the inter-node roofline. The local roofline peak acts as the
/// ceiling and network bandwidth as the slope.
pub fn roofline(
    s: &ProblemShape,
    cost: &CostModel,
    kind: ProductKind,
    measured: Option<MeasuredSpgemm>,
) -> Result<RooflineReport, ModelError> {
    cost.validate()?;
    s.validate()?;
    let (flops, local_ai, internode_ai) = match kind {
        ProductKind::Spmm => (spmm_flops_per_iter(s)?, spmm_local_ai(s)?, spmm_internode_ai(s)?),
        ProductKind::Spgemm => {
            let m = measured.ok_or(ModelError::MissingMeasurement)?;
            let nnz_bytes = (s.w + s.idx_bytes) as f64;
            (
                m.flops_per_iter,
                spgemm_local_ai(m.cf, nnz_bytes)?,
                spgemm_internode_ai(m.flops_per_iter, s)?,
            )
        }
    };
    let local_peak = cost.arith_peak.min(local_ai * cost.mem_bw);
    let network = internode_ai * cost.net_bw;
    let internode_bound = local_peak.min(network);
    Ok(RooflineReport {
        kind,
        shape: *s,
        cost: *cost,
        flops_per_iter: flops,
        local_ai,
        internode_ai,
        local_peak,
        internode_bound,
        bound_kind: if network < local_peak {
            BoundKind::NetworkBound
        } else {
            BoundKind::ComputeBound
        },
        index_bytes_extended: s.idx_bytes != s.w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn dense_degenerate_substitution() {
        // m = k = n = sqrt(p) * t, d = 1 -> t^2 + 2t^2 + t + 1
        let t = 8.0;
        let s = ProblemShape::new(4.0 * t, 4.0 * t, 4.0 * t, 16, 1.0);
        assert_eq!(comm_elems_per_iter(&s).unwrap(), t * t + 2.0 * t * t + t + 1.0);
    }

    #[test]
    fn worked_example() {
        let s = ProblemShape::new(1024.0, 1024.0, 512.0, 16, 0.01);
        let v = comm_elems_per_iter(&s).unwrap();
        assert!(close(v, 32768.0 + 1310.72 + 256.0 + 1.0, 1e-12), "{v}");
        assert!(close(v, 34335.72, 1e-12));
    }

    #[test]
    fn non_square_rejected_unless_fractional() {
        let s = ProblemShape::new(100.0, 100.0, 8.0, 24, 0.1);
        assert_eq!(comm_elems_per_iter(&s), Err(ModelError::NotSquare(24)));
        assert!(comm_elems_per_iter(&s.with_fractional_grid()).is_ok());
    }

    #[test]
    fn invalid_density() {
        let s = ProblemShape::new(10.0, 10.0, 10.0, 4, 0.0);
        assert!(matches!(spmm_local_ai(&s), Err(ModelError::Invalid { name: "d", .. })));
    }

    #[test]
    fn bytes_match_elements_when_index_is_word_sized() {
        let s = ProblemShape::new(1024.0, 1024.0, 512.0, 16, 1.0 / 64.0);
        assert_eq!(comm_bytes_per_iter(&s).unwrap(), 4.0 * comm_elems_per_iter(&s).unwrap());
        let wide = s.with_word(4, 8);
        assert!(comm_bytes_per_iter(&wide).unwrap() > 4.0 * comm_elems_per_iter(&wide).unwrap());
    }

    #[test]
    fn shared_denominator_terms() {
        let s = ProblemShape::new(4096.0, 2048.0, 256.0, 64, 0.003);
        let w = s.w as f64;
        let numer = spmm_flops_per_iter(&s).unwrap();
        // inter-node denominator is exactly w * comm_elems_per_iter
        let inter = numer / (w * comm_elems_per_iter(&s).unwrap());
        assert_eq!(spmm_internode_ai(&s).unwrap(), inter);
        // local denominator adds only the C tile
        let local = numer / (w * (comm_elems_per_iter(&s).unwrap() + dense_c_tile_elems(&s).unwrap()));
        assert!(close(spmm_local_ai(&s).unwrap(), local, 1e-15));
    }

    #[test]
    fn spgemm_local_ai_values() {
        assert!(close(spgemm_local_ai(2.0, 8.0).unwrap(), 2.0 / 56.0, 1e-15));
        assert!(close(spgemm_local_ai(2.0, 8.0).unwrap(), 0.035714285714285, 1e-12));
        let lim = spgemm_local_ai(1e6, 8.0).unwrap();
        assert!(close(lim, 1.0 / 16.0, 1e-4));
        assert!(spgemm_local_ai(0.0, 8.0).is_err());
        assert!(spgemm_local_ai(1.0, -1.0).is_err());
    }

    #[test]
    fn spgemm_requires_measurement() {
        let s = ProblemShape::new(1000.0, 1000.0, 1000.0, 4, 0.01);
        assert_eq!(
            roofline(&s, &CostModel::summit(), ProductKind::Spgemm, None),
            Err(ModelError::MissingMeasurement)
        );
        let r = roofline(
            &s,
            &CostModel::summit(),
            ProductKind::Spgemm,
            Some(MeasuredSpgemm { flops_per_iter: 5e4, cf: 1.5 }),
        )
        .unwrap();
        assert!(r.internode_bound <= r.local_peak);
    }

    #[test]
    fn arithmetic_peak_caps_bound() {
        let s = ProblemShape::new(1e6, 1e6, 1e6, 4, 1.0);
        let mut cost = CostModel::summit();
        cost.net_bw = 1e30;
        cost.mem_bw = 1e30;
        let r = roofline(&s, &cost, ProductKind::Spmm, None).unwrap();
        assert_eq!(r.internode_bound, 16e12);
        assert_eq!(r.bound_kind, BoundKind::ComputeBound);
    }

    #[test]
    fn vanishing_network_bandwidth() {
        let s = ProblemShape::new(1e4, 1e4, 128.0, 16, 0.001);
        let mut cost = CostModel::summit();
        cost.net_bw = 1e-9;
        let r = roofline(&s, &cost, ProductKind::Spmm, None).unwrap();
        assert!(r.internode_bound < 1e-3);
        assert_eq!(r.bound_kind, BoundKind::NetworkBound);
    }

    #[test]
    fn cost_model_validation() {
        assert!(CostModel::summit().validate().is_ok());
        let mut c = CostModel::summit();
        c.w = 2;
        assert!(c.validate().is_err());
        c = CostModel::summit();
        c.net_bw = 0.0;
        assert!(c.validate().is_err());
        let inf = CostModel {
            net_bw: f64::INFINITY,
            intra_bw: f64::INFINITY,
            mem_bw: f64::INFINITY,
            self_bw: None,
            ..CostModel::summit()
        };
        assert_eq!(inf.transfer_time(LinkClass::InterNode, 1 << 20), 0.0);
    }

    proptest! {
        #[test]
        fn internode_ai_dominates_local(
            m in 64.0f64..1e7, k in 64.0f64..1e7, n in 1.0f64..4096.0,
            root in 1u64..40, d in 1e-6f64..1.0,
        ) {
            let s = ProblemShape::new(m, k, n, root * root, d);
            prop_assert!(spmm_internode_ai(&s).unwrap() >= spmm_local_ai(&s).unwrap());
        }

        #[test]
        fn internode_ai_grows_with_n(
            m in 64.0f64..1e7, k in 64.0f64..1e7, n in 1.0f64..4096.0,
            root in 1u64..40, d in 1e-6f64..1.0,
        ) {
            let s = ProblemShape::new(m, k, n, root * root, d);
            let wider = ProblemShape { n: 2.0 * n, ..s };
            prop_assert!(spmm_internode_ai(&wider).unwrap() > spmm_internode_ai(&s).unwrap());
        }

        #[test]
        fn bound_monotone_in_machine(
            scale_net in 1.0f64..10.0, scale_mem in 1.0f64..10.0, scale_peak in 1.0f64..10.0,
            n in 8.0f64..2048.0, d in 1e-5f64..0.5,
        ) {
            let s = ProblemShape::new(1e5, 1e5, n, 16, d);
            let base = CostModel::summit();
            let faster = CostModel {
                net_bw: base.net_bw * scale_net,
                mem_bw: base.mem_bw * scale_mem,
                arith_peak: base.arith_peak * scale_peak,
                ..base
            };
            let a = roofline(&s, &base, ProductKind::Spmm, None).unwrap();
            let b = roofline(&s, &faster, ProductKind::Spmm, None).unwrap();
            prop_assert!(b.internode_bound >= a.internode_bound);
            prop_assert_eq!(a.internode_bound, a.local_peak.min(a.internode_ai * base.net_bw));
        }
    }
}
