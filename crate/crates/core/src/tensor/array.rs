//! Dense n-dimensional arrays and the element trait shared by the engine.

use serde::{Deserialize, Serialize};

/// Floating-point element of a tensor.
///
/// The engine stores `f32` by default and `f64` where finite-difference
/// tolerances matter (gradient checks, oracle tests).
pub trait Element:
    num_traits::Float
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const BYTES: usize;
    /// Tag written into checkpoint manifests.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const BYTES: usize = 4;
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for f64 {
    const BYTES: usize = 8;
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Default element type for the training pipeline.
pub type Real = f32;

/// Contiguous row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayD<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> ArrayD<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ArrayD {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        ArrayD {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: E) -> Self {
        ArrayD {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_le_bytes() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf), 1.5);
        buf.clear();
        (-0.125f64).write_le(&mut buf);
        assert_eq!(f64::read_le(&buf), -0.125);
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_panics() {
        let _ = ArrayD::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0]);
    }
}
