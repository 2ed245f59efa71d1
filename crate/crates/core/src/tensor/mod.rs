//! Dense row-major matrices, seeded synthetic generators and the `.stt`
//! on-disk tensor format.

mod gen;
mod io;

pub use gen::{gen_gaussian_matrix, gen_gaussian_qkv, gen_outlier_qkv, OutlierQkv, Qkv};
pub use io::{load_tensor, save_tensor, sidecar_path, TensorHeader};

use crate::error::{Result, StemError};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(StemError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(StemError::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Contiguous copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm of row `r`, accumulated in f64.
    pub fn row_norm(&self, r: usize) -> f64 {
        self.row(r)
            .iter()
            .map(|x| {
                let v = x.widen();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Product `self · rhs` with f64 accumulation.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(StemError::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        let mut acc = vec![0f64; rhs.cols];
        for r in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (k, &a) in self.row(r).iter().enumerate() {
                let a = a.widen();
                for (slot, &b) in acc.iter_mut().zip(rhs.row(k)) {
                    *slot += a * b.widen();
                }
            }
            for (dst, &a) in out.row_mut(r).iter_mut().zip(&acc) {
                *dst = T::narrow(a);
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.widen() - b.widen()).abs())
            .fold(0.0, f64::max))
    }

    /// Mean squared elementwise difference.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a.widen() - b.widen();
                d * d
            })
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Frobenius norm of `self − other`.
    pub fn frobenius_diff(&self, other: &Self) -> Result<f64> {
        Ok((self.mse(other)? * self.data.len() as f64).sqrt())
    }

    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.widen();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Same matrix with row count padded with zero rows up to `rows`.
    pub fn pad_rows(&self, rows: usize) -> Self {
        let mut data = self.data.clone();
        data.resize(rows.max(self.rows) * self.cols, T::zero());
        Self {
            rows: rows.max(self.rows),
            cols: self.cols,
            data,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::narrow(x.widen())).collect(),
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(StemError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::<f32>::from_vec(2, 3, vec![0.0; 5]).is_err());
        let m = Matrix::<f32>::from_vec(2, 3, (0..6).map(|x| x as f32).collect()).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(m.get(0, 2), 2.0);
    }

    #[test]
    fn matmul_small() {
        let a = Matrix::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::<f64>::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 1.0, 4.0, 3.0]);
        assert!(a.matmul(&Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn pad_rows_appends_zeros() {
        let m = Matrix::<f32>::identity(2).pad_rows(3);
        assert_eq!(m.shape(), (3, 2));
        assert_eq!(m.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn frobenius_of_difference() {
        let a = Matrix::<f32>::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let z = Matrix::zeros(2, 2);
        assert_eq!(a.frobenius_diff(&z).unwrap(), 5.0);
        assert_eq!(a.frobenius(), 5.0);
        assert_eq!(a.mse(&z).unwrap(), 25.0 / 4.0);
    }
}
