//! Dense row-major containers: [`Mat`] for feature matrices and
//! [`LatentGrid`] for images and noise.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Row-major matrix. Spatial feature maps are stored as `(h*w) x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: {rows}x{cols} needs {} values", rows * cols);
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, rhs.rows, "matmul: inner dims");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        S::gemm(self.rows, self.cols, rhs.cols, S::one(), &self.data, false, &rhs.data, false, S::zero(), &mut out.data);
        out
    }

    /// `self * rhs^T`.
    pub fn matmul_t(&self, rhs: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, rhs.cols, "matmul_t: inner dims");
        let mut out = Mat::zeros(self.rows, rhs.rows);
        S::gemm(self.rows, self.cols, rhs.rows, S::one(), &self.data, false, &rhs.data, true, S::zero(), &mut out.data);
        out
    }

    /// `out += self^T * rhs`.
    pub fn t_matmul_acc(&self, rhs: &Mat<S>, out: &mut [S]) {
        assert_eq!(self.rows, rhs.rows, "t_matmul: inner dims");
        S::gemm(self.cols, self.rows, rhs.cols, S::one(), &self.data, true, &rhs.data, false, S::one(), out);
    }

    pub fn add_assign(&mut self, other: &Mat<S>) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign: shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Mat<T> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| T::c(v.f64())).collect() }
    }
}

/// Grid dimensions shared by images, noise and predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        GridShape { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `H x W x C` real-valued grid, stored HWC. At this scale the latent is the
/// image itself (values in `[-1, 1]` inside the model, `[0, 1]` on disk).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<S> {
    pub shape: GridShape,
    pub data: Vec<S>,
}

impl<S: Scalar> LatentGrid<S> {
    pub fn zeros(shape: GridShape) -> Self {
        LatentGrid { shape, data: vec![S::zero(); shape.len()] }
    }

    pub fn filled(shape: GridShape, v: S) -> Self {
        LatentGrid { shape, data: vec![v; shape.len()] }
    }

    pub fn from_vec(shape: GridShape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(CoreError::Shape(format!(
                "grid {}x{}x{} needs {} values, got {}",
                shape.height,
                shape.width,
                shape.channels,
                shape.len(),
                data.len()
            )));
        }
        Ok(LatentGrid { shape, data })
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.width + x) * self.shape.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> S {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: S) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[S] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.shape.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        LatentGrid { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> LatentGrid<T> {
        LatentGrid { shape: self.shape, data: self.data.iter().map(|v| T::c(v.f64())).collect() }
    }

    /// View as an `(h*w) x c` matrix.
    pub fn to_mat(&self) -> Mat<S> {
        Mat::from_vec(self.shape.height * self.shape.width, self.shape.channels, self.data.clone())
    }

    /// Rectangular window `[y0, y0+h) x [x0, x0+w)`; must lie inside the grid.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.shape.height || x0 + w > self.shape.width {
            return Err(CoreError::Shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.shape.height, self.shape.width
            )));
        }
        let c = self.shape.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let i = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[i..i + w * c]);
        }
        Ok(LatentGrid { shape: GridShape::new(h, w, c), data })
    }
}
