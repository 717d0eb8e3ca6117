//! Minimal row-major matrix storage for feature maps and weights.
//!
//! The pipeline moves rectangular blocks of `f32` around (tokens, feature
//! maps, projection weights); a thin dense container with a few hot-loop
//! helpers covers all of it.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Mismatch { expected: String, got: String },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::default(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape<U>(&self, other: &Mat<U>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

impl Mat<f32> {
    /// `self (n x k) * w^T (k x m)` + optional bias, i.e. applies a linear
    /// layer whose weight matrix is stored as `m x k` (one output per row).
    pub fn linear(&self, w: &Mat<f32>, bias: Option<&[f32]>) -> Mat<f32> {
        assert_eq!(self.cols, w.cols, "linear: input dim mismatch");
        let m = w.rows;
        let mut out = Mat::zeros(self.rows, m);
        for r in 0..self.rows {
            let x = self.row(r);
            let o = out.row_mut(r);
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for (j, oj) in o.iter_mut().enumerate() {
                let wr = w.row(j);
                let mut acc = 0.0f32;
                for i in 0..x.len() {
                    acc += x[i] * wr[i];
                }
                *oj += acc;
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum; errors if shapes differ.
    pub fn add(&self, other: &Mat<f32>) -> Result<Mat<f32>, ShapeError> {
        if !self.same_shape(other) {
            return Err(ShapeError::Mismatch {
                expected: self.shape_str(),
                got: other.shape_str(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Mat::from_vec(self.rows, self.cols, data))
    }
}

/// Per-point feature map: one `channels()`-wide descriptor row per point.
/// Row `i` always corresponds to point `i` of the cloud it was extracted
/// from.
pub type FeatureMap = Mat<f32>;
