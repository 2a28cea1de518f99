//! Floating-point scalar abstraction shared by retrieval and metrics.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// A real scalar that vectors and scores can be stored in.
///
/// Besides arithmetic this fixes a little-endian byte layout so that indexes
/// round-trip through disk bit-exactly.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Short type tag written into persisted artifacts.
    const TAG: &'static str;
    /// Width of the little-endian encoding.
    const WIDTH: usize;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes exactly `Self::WIDTH` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// Converts an `f64` constant; panics only for types that cannot hold it.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("scalar literal out of range")
    }

    fn from_count(count: usize) -> Self {
        Self::from_usize(count).expect("count out of range")
    }
}

impl Scalar for f32 {
    const TAG: &'static str = "f32";
    const WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut raw = [0u8; 4];
        raw.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(raw)
    }
}

impl Scalar for f64 {
    const TAG: &'static str = "f64";
    const WIDTH: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(raw)
    }
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(T::zero(), |acc, &v| acc + v);
    Some(sum / T::from_count(values.len()))
}
