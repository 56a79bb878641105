use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Column vector (`n × 1`).
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `y = A x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("Matrix::matvec", self.cols, x.len())?;
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, x))
            .collect())
    }

    /// `y += A x`, dims assumed checked by the caller.
    pub(crate) fn matvec_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        if self.cols == 0 {
            return;
        }
        for (yi, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *yi += dot(row, x);
        }
    }

    /// `y = Aᵀ v`
    pub fn tr_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("Matrix::tr_matvec", self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        self.tr_matvec_acc(v, &mut out);
        Ok(out)
    }

    /// `y += Aᵀ v`
    pub(crate) fn tr_matvec_acc(&self, v: &[f64], y: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        if self.cols == 0 {
            return;
        }
        for (vi, row) in v.iter().zip(self.data.chunks_exact(self.cols)) {
            if *vi == 0.0 {
                continue;
            }
            for (yj, a) in y.iter_mut().zip(row) {
                *yj += vi * a;
            }
        }
    }

    /// `A += u vᵀ`
    pub(crate) fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        if self.cols == 0 {
            return;
        }
        for (ui, row) in u.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if *ui == 0.0 {
                continue;
            }
            for (a, vj) in row.iter_mut().zip(v) {
                *a += ui * vj;
            }
        }
    }

    /// Elementwise `self += other`.
    pub(crate) fn add_assign_slice(&mut self, other: &[f64]) {
        debug_assert_eq!(other.len(), self.data.len());
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert_eq!(a.tr_matvec(&[1.0, 1.0]).unwrap(), vec![5.0, 7.0, 9.0]);
        assert!(a.matvec(&[1.0]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn outer_product_accumulates() {
        let mut a = Matrix::zeros(2, 2);
        a.add_outer(&[1.0, 2.0], &[3.0, 4.0]);
        a.add_outer(&[1.0, 0.0], &[1.0, 1.0]);
        assert_eq!(a.as_slice(), &[4.0, 5.0, 6.0, 8.0]);
    }
}
