//! Dense linear-algebra helpers shared by every estimator.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlqeError};

pub type Mat = DMatrix<f64>;
pub type Vect = DVector<f64>;

/// A sequence of `len` vectors of dimension `dim`, stored as a `dim x len`
/// column-major array so each time step is one contiguous column.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    data: Mat,
}

impl Trajectory {
    pub fn zeros(dim: usize, len: usize) -> Self {
        Self {
            data: Mat::zeros(dim, len),
        }
    }

    pub fn from_columns(dim: usize, cols: &[Vect]) -> Self {
        let mut t = Self::zeros(dim, cols.len());
        for (i, c) in cols.iter().enumerate() {
            t.set(i, c);
        }
        t
    }

    /// Builds from row-major nested vectors (`rows[i]` is step `i`).
    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut t = Self::zeros(dim, rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(RlqeError::DimensionMismatch(format!(
                    "step {i} has length {} but dimension is {dim}",
                    r.len()
                )));
            }
            for (k, v) in r.iter().enumerate() {
                t.data[(k, i)] = *v;
            }
        }
        Ok(t)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| self.data.column(i).iter().copied().collect())
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self, i: usize) -> Vect {
        self.data.column(i).into_owned()
    }

    pub fn set(&mut self, i: usize, v: &Vect) {
        self.data.set_column(i, v);
    }

    pub fn as_matrix(&self) -> &Mat {
        &self.data
    }

    pub fn into_matrix(self) -> Mat {
        self.data
    }

    pub fn from_matrix(data: Mat) -> Self {
        Self { data }
    }

    /// First `len` steps.
    pub fn prefix(&self, len: usize) -> Self {
        Self {
            data: self.data.columns(0, len).into_owned(),
        }
    }

    pub fn map_steps(&self, f: impl Fn(Vect) -> Vect, out_dim: usize) -> Self {
        let mut out = Self::zeros(out_dim, self.len());
        for i in 0..self.len() {
            out.set(i, &f(self.step(i)));
        }
        out
    }

    /// Largest Euclidean distance between corresponding steps.
    pub fn max_step_distance(&self, other: &Self) -> f64 {
        (0..self.len())
            .map(|i| (self.data.column(i) - other.data.column(i)).norm())
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            data: &self.data * c,
        }
    }
}

impl Serialize for Trajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let dim = rows.first().map_or(0, Vec::len);
        Trajectory::from_rows(dim, &rows).map_err(serde::de::Error::custom)
    }
}

/// Matrices serialize as row-major nested arrays.
pub mod mat_serde {
    use super::Mat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix".into());
        }
        Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Wrapper so a matrix can sit inside serde-derived containers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerMat(#[serde(with = "mat_serde")] pub Mat);

/// Spectral norm (largest singular value).
pub fn op_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    m.singular_values().max()
}

/// Symmetric eigendecomposition with eigenvalues in ascending order and a
/// sign convention (largest-magnitude entry positive) so results are
/// reproducible.
pub fn sym_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let pivot = col.iter().copied().fold(0.0_f64, |acc, v| {
            if v.abs() > acc.abs() + 1e-12 {
                v
            } else {
                acc
            }
        });
        if pivot < 0.0 {
            col = -col;
        }
        vectors.set_column(k, &col);
    }
    (values, vectors)
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.max()
}

/// Euclidean projection of a symmetric matrix onto the PSD cone.
pub fn project_psd(m: &Mat) -> Mat {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * Mat::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

pub fn mat_pow(a: &Mat, mut k: u64) -> Mat {
    let n = a.nrows();
    let mut result = Mat::identity(n, n);
    let mut base = a.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result
}

pub fn spectral_radius(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    if a.nrows() == 1 {
        return a[(0, 0)].abs();
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn is_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Symmetric positive-definite block-tridiagonal system
/// `H x = g`, with `H[i][i] = diag[i]` and `H[i][i-1] = lower[i]`
/// (`lower[0]` unused). Solved by block Cholesky in `O(n d^3)`.
pub struct BlockTridiagonal {
    pub diag: Vec<Mat>,
    pub lower: Vec<Mat>,
}

impl BlockTridiagonal {
    pub fn solve(&self, rhs: &[Vect]) -> Result<Vec<Vect>> {
        let n = self.diag.len();
        if rhs.len() != n || self.lower.len() != n {
            return Err(RlqeError::DimensionMismatch(
                "block tridiagonal sizes disagree".into(),
            ));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut factors: Vec<Cholesky<f64, Dyn>> = Vec::with_capacity(n);
        let mut z: Vec<Vect> = Vec::with_capacity(n);
        for i in 0..n {
            let (schur, zi) = if i == 0 {
                (self.diag[0].clone(), rhs[0].clone())
            } else {
                let prev = &factors[i - 1];
                let l = &self.lower[i];
                // S_i = D_i - L_i S_{i-1}^{-1} L_i^T
                let sinv_lt = prev.solve(&l.transpose());
                let sinv_z = prev.solve(&z[i - 1]);
                (&self.diag[i] - l * sinv_lt, &rhs[i] - l * sinv_z)
            };
            let sym = (&schur + schur.transpose()) * 0.5;
            let chol = Cholesky::new(sym).ok_or_else(|| {
                RlqeError::InvalidInput(format!("block {i} of the normal equations is not positive definite"))
            })?;
            factors.push(chol);
            z.push(zi);
        }
        let mut x = vec![Vect::zeros(0); n];
        x[n - 1] = factors[n - 1].solve(&z[n - 1]);
        for i in (0..n - 1).rev() {
            let r = &z[i] - self.lower[i + 1].transpose() * &x[i + 1];
            x[i] = factors[i].solve(&r);
        }
        Ok(x)
    }

    /// Dense assembly, for tests and small oracles.
    pub fn to_dense(&self) -> Mat {
        let n = self.diag.len();
        let d = self.diag.first().map_or(0, |m| m.nrows());
        let mut h = Mat::zeros(n * d, n * d);
        for i in 0..n {
            h.view_mut((i * d, i * d), (d, d)).copy_from(&self.diag[i]);
            if i > 0 {
                h.view_mut((i * d, (i - 1) * d), (d, d))
                    .copy_from(&self.lower[i]);
                h.view_mut(((i - 1) * d, i * d), (d, d))
                    .copy_from(&self.lower[i].transpose());
            }
        }
        h
    }
}
