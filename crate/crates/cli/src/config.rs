//! Command-line flags and their translation into library types.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rdma_spmm::distmat::ProcGrid;
use rdma_spmm::gen_io::{read_matrix_market, rmat, uniform_tiles, DuplicateMode, RmatParams};
use rdma_spmm::kernels::CsrTile;
use rdma_spmm::model::CostModel;
use serde::Serialize;

use crate::CliError;

/// Where the sparse input comes from. Exactly one source must be given.
#[derive(Args, Clone, Debug, Serialize)]
pub struct InputArgs {
    /// R-MAT input: `scale=S,ef=E[,seed=N,a=..,b=..,c=..,d=..,permute,multiplicity]`.
    #[arg(long, value_name = "SPEC")]
    pub rmat: Option<String>,
    /// Matrix Market file (optionally gzip-compressed).
    #[arg(long, value_name = "PATH")]
    pub mtx: Option<PathBuf>,
    /// Fixed-density tiles: `m=M,k=K,d=D[,p=P,seed=N]`.
    #[arg(long, value_name = "SPEC")]
    pub uniform: Option<String>,
}

fn parse_kv(spec: &str) -> Result<Vec<(String, Option<String>)>, CliError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| match item.split_once('=') {
            Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), Some(v.trim().to_string()))),
            Some(_) => Err(CliError::Config(format!("bad item `{item}` in `{spec}`"))),
            None => Ok((item.to_string(), None)),
        })
        .collect()
}

fn num<V: std::str::FromStr>(key: &str, v: &Option<String>) -> Result<V, CliError> {
    v.as_deref()
        .ok_or_else(|| CliError::Config(format!("`{key}` needs a value")))?
        .parse()
        .map_err(|_| CliError::Config(format!("bad value for `{key}`: {}", v.as_deref().unwrap_or(""))))
}

pub fn parse_rmat(spec: &str, default_seed: u64) -> Result<RmatParams, CliError> {
    let mut p = RmatParams::graph500_like(10, default_seed);
    for (k, v) in parse_kv(spec)? {
        match k.as_str() {
            "scale" => p.scale = num(&k, &v)?,
            "ef" | "edgefactor" => p.edgefactor = num(&k, &v)?,
            "seed" => p.seed = num(&k, &v)?,
            "a" => p.a = num(&k, &v)?,
            "b" => p.b = num(&k, &v)?,
            "c" => p.c = num(&k, &v)?,
            "d" => p.d = num(&k, &v)?,
            "permute" => p.permute = true,
            "multiplicity" => p.duplicates = DuplicateMode::Multiplicity,
            _ => return Err(CliError::Config(format!("unknown R-MAT key `{k}`"))),
        }
    }
    p.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(p)
}

impl InputArgs {
    /// Loads or generates the sparse matrix. `p` is the rank count used as
    /// the default tile grid of uniform inputs.
    pub fn load(&self, p: usize, seed: u64) -> Result<CsrTile<f64>, CliError> {
        let given = [self.rmat.is_some(), self.mtx.is_some(), self.uniform.is_some()];
        if given.iter().filter(|&&g| g).count() != 1 {
            return Err(CliError::Config("give exactly one of --rmat, --mtx, --uniform".into()));
        }
        if let Some(spec) = &self.rmat {
            let params = parse_rmat(spec, seed)?;
            return rmat(&params).map_err(|e| CliError::Config(e.to_string()));
        }
        if let Some(path) = &self.mtx {
            if !path.exists() {
                return Err(CliError::Config(format!("{} does not exist", path.display())));
            }
            return read_matrix_market(path).map_err(|e| CliError::Config(e.to_string()));
        }
        let spec = self.uniform.as_deref().unwrap_or_default();
        let (mut m, mut k, mut d, mut tiles, mut s) = (None, None, None, p, seed);
        for (key, v) in parse_kv(spec)? {
            match key.as_str() {
                "m" => m = Some(num(&key, &v)?),
                "k" => k = Some(num(&key, &v)?),
                "d" => d = Some(num(&key, &v)?),
                "p" => tiles = num(&key, &v)?,
                "seed" => s = num(&key, &v)?,
                _ => return Err(CliError::Config(format!("unknown uniform key `{key}`"))),
            }
        }
        let (Some(m), Some(k), Some(d)) = (m, k, d) else {
            return Err(CliError::Config("--uniform needs m, k and d".into()));
        };
        uniform_tiles(m, k, tiles, d, s).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostPreset {
    /// Summit-like node parameters.
    Summit,
    /// Network-only: every transfer at the network bandwidth, free compute.
    PureNetwork,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct CostArgs {
    #[arg(long, value_enum, default_value_t = CostPreset::Summit)]
    pub cost: CostPreset,
    /// Inter-node bandwidth per rank, bytes/s.
    #[arg(long)]
    pub net_bw: Option<f64>,
    /// Intra-node bandwidth, bytes/s.
    #[arg(long)]
    pub intra_bw: Option<f64>,
    /// Local memory bandwidth, bytes/s.
    #[arg(long)]
    pub mem_bw: Option<f64>,
    /// Arithmetic peak, flop/s.
    #[arg(long)]
    pub peak: Option<f64>,
    /// Per-transfer latency, seconds.
    #[arg(long)]
    pub latency: Option<f64>,
}

impl CostArgs {
    pub fn model(&self) -> Result<CostModel, CliError> {
        let base = CostModel::summit();
        let mut c = match self.cost {
            CostPreset::Summit => base,
            CostPreset::PureNetwork => CostModel::pure_network(self.net_bw.unwrap_or(base.net_bw)),
        };
        if let Some(v) = self.net_bw {
            c.net_bw = v;
        }
        if let Some(v) = self.intra_bw {
            c.intra_bw = v;
        }
        if let Some(v) = self.mem_bw {
            c.mem_bw = v;
        }
        if let Some(v) = self.peak {
            c.arith_peak = v;
        }
        if let Some(v) = self.latency {
            c.latency = v;
        }
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }
}

/// Parses `RxC`.
pub fn parse_grid(s: &str) -> Result<ProcGrid, CliError> {
    let bad = || CliError::Config(format!("grid `{s}` is not of the form RxC"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (r, c) = (r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?);
    ProcGrid::new(r, c).map_err(|e| CliError::Config(e.to_string()))
}

/// Parses `TMxTKxTN`.
pub fn parse_tiling(s: &str) -> Result<[usize; 3], CliError> {
    let bad = || CliError::Config(format!("tile sizes `{s}` are not of the form TMxTKxTN"));
    let v: Vec<usize> = s
        .split(['x', 'X'])
        .map(|t| t.parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] if a > 0 && b > 0 && c > 0 => Ok([a, b, c]),
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmat_spec() {
        let p = parse_rmat("scale=12, ef=4,seed=9,permute,multiplicity", 0).unwrap();
        assert_eq!((p.scale, p.edgefactor, p.seed, p.permute), (12, 4, 9, true));
        assert_eq!(p.duplicates, DuplicateMode::Multiplicity);
        assert!(parse_rmat("scale=x", 0).is_err());
        assert!(parse_rmat("bogus=1", 0).is_err());
        assert!(parse_rmat("a=0.9", 0).is_err());
    }

    #[test]
    fn grid_and_tiles() {
        assert_eq!(parse_grid("2x3").unwrap(), ProcGrid::new(2, 3).unwrap());
        assert!(parse_grid("0x3").is_err());
        assert!(parse_grid("4").is_err());
        assert_eq!(parse_tiling("8x4x2").unwrap(), [8, 4, 2]);
        assert!(parse_tiling("8x4").is_err());
        assert!(parse_tiling("8x0x1").is_err());
    }

    #[test]
    fn cost_overrides() {
        let args = CostArgs {
            cost: CostPreset::PureNetwork,
            net_bw: Some(1e9),
            intra_bw: None,
            mem_bw: None,
            peak: None,
            latency: Some(1e-6),
        };
        let c = args.model().unwrap();
        assert_eq!((c.net_bw, c.intra_bw, c.latency), (1e9, 1e9, 1e-6));
        let bad = CostArgs { net_bw: Some(-1.0), ..args };
        assert!(bad.model().is_err());
    }
}
