//! Element types that can live in a tile and travel over the fabric.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;

/// A floating-point matrix element with a fixed little-endian wire encoding.
///
/// The word size `BYTES` is the `w` used throughout the communication model.
pub trait Scalar: Float + AddAssign + Default + Debug + Send + Sync + 'static {
    const BYTES: usize;

    fn write_le(self, out: &mut [u8]);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn write_le(self, out: &mut [u8]) {
        out[..4].copy_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn write_le(self, out: &mut [u8]) {
        out[..8].copy_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Width of one CSR index (`row_ptr` / `col_idx` entry) on the wire.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum IndexWidth {
    #[default]
    U32,
    U64,
}

impl IndexWidth {
    pub fn bytes(self) -> usize {
        match self {
            IndexWidth::U32 => 4,
            IndexWidth::U64 => 8,
        }
    }

    pub fn from_bytes(n: usize) -> Option<Self> {
        match n {
            4 => Some(IndexWidth::U32),
            8 => Some(IndexWidth::U64),
            _ => None,
        }
    }

    /// Largest index value that fits this width.
    pub fn max_value(self) -> u64 {
        match self {
            IndexWidth::U32 => u32::MAX as u64,
            IndexWidth::U64 => u64::MAX,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip() {
        let mut buf = [0u8; 8];
        1.5f32.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf), 1.5);
        (-2.25f64).write_le(&mut buf);
        assert_eq!(f64::read_le(&buf), -2.25);
    }

    #[test]
    fn index_width_bytes() {
        assert_eq!(IndexWidth::default().bytes(), 4);
        assert_eq!(IndexWidth::from_bytes(8), Some(IndexWidth::U64));
        assert_eq!(IndexWidth::from_bytes(2), None);
    }
}
