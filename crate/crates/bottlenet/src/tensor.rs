//! Dense 4-D tensors in (batch, height, width, channels) row-major order.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(batch: usize, h: usize, w: usize, c: usize) -> Self {
        Shape { batch, h, w, c }
    }

    pub fn len(&self) -> usize {
        self.batch * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial-and-channel part, ignoring batch.
    pub fn hwc(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.batch, self.h, self.w, self.c)
    }
}

/// Dense f64 tensor, row-major (batch, h, w, c).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::InvalidConfig(format!(
                "data length {} does not match shape {}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn idx(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        ((b * self.shape.h + y) * self.shape.w + x) * self.shape.c + c
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(b, y, x, c)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, y: usize, x: usize, c: usize) -> &mut f64 {
        let i = self.idx(b, y, x, c);
        &mut self.data[i]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_len_and_index() {
        let t = Tensor::zeros(Shape::new(2, 3, 4, 5));
        assert_eq!(t.data.len(), 120);
        assert_eq!(t.idx(0, 0, 0, 0), 0);
        assert_eq!(t.idx(1, 2, 3, 4), 119);
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec(Shape::new(1, 2, 2, 1), vec![0.0; 3]).is_err());
    }

    #[test]
    fn min_max() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(t.min(), -1.0);
        assert_eq!(t.max(), 2.0);
    }
}
