//! Dense N-dimensional tensor value type.
//!
//! Row-major contiguous storage; image batches use NCHW layout throughout.
//! `Tensor` is plain data: cloning copies, and values move freely between
//! threads. Gradient tracking lives in [`crate::graph`], not here.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, validating that every extent is positive and the
    /// data length matches the shape product.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape {
                shape,
                detail: "extents must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidShape {
                shape,
                detail: format!("data length {} != shape product {}", data.len(), numel),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "extents must be positive, got {shape:?}"
        );
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a 1-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) || numel != self.numel() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                detail: format!("cannot reshape {:?} ({} elements)", self.shape, self.numel()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// NCHW dimensions of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                detail: "expected rank-4 NCHW tensor".into(),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.to_f64()).collect()
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape.to_vec(), data.iter().map(|&x| T::from_f64(x)).collect())
    }

    /// Wire format, used by checkpoint files and the µm-grid output:
    /// `[elem_size: u8][rank: u8][extent: u32 LE] * rank [scalar LE] * numel`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + 4 * self.shape.len() + T::BYTES * self.numel());
        out.push(T::BYTES as u8);
        out.push(self.shape.len() as u8);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Parses the wire format; returns the tensor and the bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let fail = |msg: &str| Error::Checkpoint(format!("tensor payload: {msg}"));
        if bytes.len() < 2 {
            return Err(fail("truncated header"));
        }
        if bytes[0] as usize != T::BYTES {
            return Err(fail(&format!(
                "element size {} does not match expected {}",
                bytes[0],
                T::BYTES
            )));
        }
        let rank = bytes[1] as usize;
        let mut off = 2;
        if bytes.len() < off + 4 * rank {
            return Err(fail("truncated extents"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            shape.push(e);
            off += 4;
        }
        let numel: usize = shape.iter().product();
        if bytes.len() < off + numel * T::BYTES {
            return Err(fail("truncated payload"));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(T::read_le(&bytes[off..]));
            off += T::BYTES;
        }
        Ok((Self::from_vec(shape, data)?, off))
    }
}

/// Flat index into an NCHW tensor.
#[inline(always)]
pub fn nchw_index(c_total: usize, h_total: usize, w_total: usize, n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * c_total + c) * h_total + h) * w_total + w
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_zero_extent() {
        let err = Tensor::<f32>::from_vec(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
    }

    #[test]
    fn rejects_length_mismatch() {
        let err = Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
    }

    #[test]
    fn bytes_header_layout() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let b = t.to_bytes();
        assert_eq!(b[0], 4);
        assert_eq!(b[1], 2);
        assert_eq!(u32::from_le_bytes(b[2..6].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 3);
        assert_eq!(b.len(), 2 + 8 + 6 * 4);
    }

    #[test]
    fn wrong_elem_size_rejected() {
        let t = Tensor::<f32>::scalar(1.5);
        let b = t.to_bytes();
        assert!(Tensor::<f64>::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_f64(shape in proptest::collection::vec(1usize..5, 1..4)) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|i| (i as f64).sin() * 1e3).collect();
            let t = Tensor::<f64>::from_vec(shape, data).unwrap();
            let (back, used) = Tensor::<f64>::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(used, t.to_bytes().len());
            prop_assert_eq!(back, t);
        }
    }
}
