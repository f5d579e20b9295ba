//! Minimal dense/low-rank linear algebra and elementary functions shared by
//! the rest of the crate, plus a finite-difference gradient oracle for tests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value encountered at coordinate {0}")]
    NonFinite(usize),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if x.len() != self.cols {
            return Err(NumericsError::DimMismatch(format!(
                "matvec: matrix is {}x{}, vector has length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Transpose-matvec: returns Aᵀx where x has length `rows`.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if x.len() != self.rows {
            return Err(NumericsError::DimMismatch(format!(
                "matvec_t: matrix is {}x{}, vector has length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * xi;
            }
        }
        Ok(out)
    }

    /// Accumulate the outer product a·bᵀ into self (shape rows=len(a), cols=len(b)).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for i in 0..self.rows {
            let ai = a[i];
            if ai == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, bv) in row.iter_mut().zip(b) {
                *r += ai * bv;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Product form `left · right` where left is rows×r and right is r×cols.
/// The full matrix is never materialized in hot paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankMatrix {
    pub left: Matrix,
    pub right: Matrix,
}

impl LowRankMatrix {
    pub fn rank(&self) -> usize {
        self.left.cols
    }

    pub fn rows(&self) -> usize {
        self.left.rows
    }

    pub fn cols(&self) -> usize {
        self.right.cols
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        let mid = self.right.matvec(x)?;
        self.left.matvec(&mid)
    }

    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        let mid = self.left.matvec_t(x)?;
        self.right.matvec_t(&mid)
    }

    pub fn materialize(&self) -> Matrix {
        let (m, r, n) = (self.left.rows, self.left.cols, self.right.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for k in 0..r {
                let lik = self.left.get(i, k);
                for j in 0..n {
                    out.data[i * n + j] += lik * self.right.get(k, j);
                }
            }
        }
        out
    }
}

/// A weight matrix that is either dense or stored in low-rank factored form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Weight {
    Dense(Matrix),
    LowRank(LowRankMatrix),
}

impl Weight {
    pub fn rows(&self) -> usize {
        match self {
            Weight::Dense(m) => m.rows,
            Weight::LowRank(lr) => lr.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Weight::Dense(m) => m.cols,
            Weight::LowRank(lr) => lr.cols(),
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        match self {
            Weight::Dense(m) => m.matvec(x),
            Weight::LowRank(lr) => lr.matvec(x),
        }
    }

    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        match self {
            Weight::Dense(m) => m.matvec_t(x),
            Weight::LowRank(lr) => lr.matvec_t(x),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Weight::Dense(m) => m.is_finite(),
            Weight::LowRank(lr) => lr.left.is_finite() && lr.right.is_finite(),
        }
    }

    /// `Some(r)` for factored weights, `None` for dense.
    pub fn low_rank(&self) -> Option<usize> {
        match self {
            Weight::Dense(_) => None,
            Weight::LowRank(lr) => Some(lr.rank()),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

/// Max-subtraction stabilized softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "softmax of empty vector");
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probability floor keeping -log p finite.
pub const CE_PROB_FLOOR: f64 = 1e-12;

pub fn cross_entropy(p: &[f64], y: usize) -> f64 {
    assert!(y < p.len(), "class index out of range");
    -(p[y].max(CE_PROB_FLOOR)).ln()
}

/// Central-difference gradient oracle: (f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if eps <= 0.0 {
        return Err(NumericsError::InvalidArg("eps must be positive".into()));
    }
    let mut grad = vec![0.0; theta.len()];
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        work[i] = theta[i] + eps;
        let fp = f(&work);
        work[i] = theta[i] - eps;
        let fm = f(&work);
        work[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericsError::NonFinite(i));
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}
