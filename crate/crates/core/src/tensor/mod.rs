//! Dense row-major tensors and the deterministic kernels that operate on them.
//!
//! Every reduction runs in a fixed sequential order and accumulates in `f64`
//! before rounding back to `f32`, so identical inputs always produce
//! bit-identical outputs.

mod kernels;

pub use kernels::{attention, layernorm, matmul_fp, matmul_int, softmax_rows, LAYERNORM_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-axis `f32` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    /// Axis holding video frames, if any.
    frame_axis: Option<usize>,
}

impl Tensor {
    /// Builds a tensor, checking the element count and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "zero-length axis in shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("element {i} is {}", data[i])));
        }
        Ok(Self {
            shape,
            data,
            frame_axis: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            frame_axis: None,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Construction for kernel outputs whose shape is already known to be right.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            frame_axis: None,
        }
    }

    pub fn with_frame_axis(mut self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::Dimension(format!(
                "frame axis {axis} out of range for rank {}",
                self.shape.len()
            )));
        }
        self.frame_axis = Some(axis);
        Ok(self)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn frame_axis(&self) -> Option<usize> {
        self.frame_axis
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Length of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when all leading axes are flattened.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    /// Same data under a new shape. Drops the frame annotation.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
            frame_axis: None,
        })
    }

    /// Flattens leading axes into a `[rows, last_dim]` matrix.
    pub fn into_matrix(self) -> Self {
        let cols = self.last_dim();
        let rows = self.rows();
        Self {
            shape: vec![rows, cols],
            data: self.data,
            frame_axis: None,
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!(
                "expected a matrix, got shape {s:?}"
            ))),
        }
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.with_data(data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(self.with_data(data))
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.with_data(self.data.iter().map(|v| v * factor).collect())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Keeps shape and frame annotation, swaps the values.
    fn with_data(&self, data: Vec<f32>) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data,
            frame_axis: self.frame_axis,
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64).abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Little-endian bytes of the values, in storage order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matrix_view_and_transpose() {
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f32).collect())
            .unwrap()
            .with_frame_axis(0)
            .unwrap();
        assert_eq!(t.rows(), 4);
        let m = t.into_matrix();
        assert_eq!(m.shape(), &[4, 3]);
        let tt = m.transpose().unwrap();
        assert_eq!(tt.shape(), &[3, 4]);
        assert_eq!(tt.data()[1], 3.0);
    }

    #[test]
    fn norms() {
        let t = Tensor::new(vec![2], vec![3.0, -4.0]).unwrap();
        assert_eq!(t.l1_norm(), 7.0);
        assert_eq!(t.l2_norm(), 5.0);
        assert_eq!(t.max_abs(), 4.0);
    }
}
