//! Alternating-direction augmented Lagrangian solver for small
//! block-diagonal semidefinite programs
//!
//! ```text
//! min <C, X>  s.t.  <A_k, X> = b_k,  X = diag(X_1, ..., X_n) psd
//! ```
//!
//! Symmetric blocks are stored as scaled half-vectorizations (off-diagonal
//! entries times sqrt 2), which makes the trace inner product Euclidean.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlqeError};
use crate::linalg::{project_psd, Mat};

/// One coefficient: `coef * X_block[i, j]`, with `i <= j` and off-diagonal
/// entries counted once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub block: usize,
    pub i: usize,
    pub j: usize,
    pub coef: f64,
}

impl Entry {
    pub fn new(block: usize, i: usize, j: usize, coef: f64) -> Self {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        Self { block, i, j, coef }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SdpProblem {
    pub block_sizes: Vec<usize>,
    pub objective: Vec<Entry>,
    /// `sum entries = rhs`.
    pub constraints: Vec<(Vec<Entry>, f64)>,
}

impl SdpProblem {
    pub fn add_block(&mut self, size: usize) -> usize {
        self.block_sizes.push(size);
        self.block_sizes.len() - 1
    }

    pub fn constrain(&mut self, entries: Vec<Entry>, rhs: f64) {
        self.constraints.push((entries, rhs));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdpSettings {
    pub max_iters: usize,
    pub tol: f64,
    pub mu0: f64,
}

impl Default for SdpSettings {
    fn default() -> Self {
        Self {
            max_iters: 200_000,
            tol: 1e-9,
            mu0: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdpResult {
    pub blocks: Vec<Mat>,
    pub y: Vec<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Layout {
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    dim: usize,
}

impl Layout {
    fn new(sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut dim = 0;
        for &n in sizes {
            offsets.push(dim);
            dim += n * (n + 1) / 2;
        }
        Self {
            offsets,
            sizes: sizes.to_vec(),
            dim,
        }
    }

    fn index(&self, e: &Entry) -> usize {
        self.offsets[e.block] + e.j * (e.j + 1) / 2 + e.i
    }

    fn unpack(&self, v: &DVector<f64>, block: usize) -> Mat {
        let n = self.sizes[block];
        let off = self.offsets[block];
        let mut m = Mat::zeros(n, n);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for j in 0..n {
            for i in 0..=j {
                let x = v[off + j * (j + 1) / 2 + i];
                if i == j {
                    m[(i, i)] = x;
                } else {
                    m[(i, j)] = x * r;
                    m[(j, i)] = x * r;
                }
            }
        }
        m
    }

    fn pack(&self, m: &Mat, block: usize, v: &mut DVector<f64>) {
        let n = self.sizes[block];
        let off = self.offsets[block];
        let s = std::f64::consts::SQRT_2;
        for j in 0..n {
            for i in 0..=j {
                v[off + j * (j + 1) / 2 + i] = if i == j { m[(i, i)] } else { m[(i, j)] * s };
            }
        }
    }

    /// Projection of every block onto the psd cone.
    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for b in 0..self.sizes.len() {
            if self.sizes[b] == 1 {
                let k = self.offsets[b];
                out[k] = v[k].max(0.0);
            } else {
                self.pack(&project_psd(&self.unpack(v, b)), b, &mut out);
            }
        }
        out
    }
}

fn svec_coef(e: &Entry) -> f64 {
    if e.i == e.j {
        e.coef
    } else {
        e.coef * std::f64::consts::FRAC_1_SQRT_2
    }
}

/// Sparse rows with duplicate indices merged.
fn sparse_rows(layout: &Layout, cons: &[(Vec<Entry>, f64)]) -> Vec<Vec<(usize, f64)>> {
    cons.iter()
        .map(|(entries, _)| {
            let mut row: Vec<(usize, f64)> = entries.iter().map(|e| (layout.index(e), svec_coef(e))).collect();
            row.sort_by_key(|&(k, _)| k);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (k, c) in row {
                match merged.last_mut() {
                    Some(last) if last.0 == k => last.1 += c,
                    _ => merged.push((k, c)),
                }
            }
            merged.retain(|&(_, c)| c != 0.0);
            merged
        })
        .collect()
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

pub fn solve_sdp(problem: &SdpProblem, settings: &SdpSettings) -> Result<SdpResult> {
    let layout = Layout::new(&problem.block_sizes);
    let n = layout.dim;
    let m = problem.constraints.len();
    for e in problem.objective.iter().chain(problem.constraints.iter().flat_map(|c| c.0.iter())) {
        if e.block >= layout.sizes.len() || e.j >= layout.sizes[e.block] {
            return Err(RlqeError::InvalidInput("entry outside its block".into()));
        }
    }
    let mut rows = sparse_rows(&layout, &problem.constraints);
    let mut b = DVector::from_iterator(m, problem.constraints.iter().map(|c| c.1));
    // Unit-norm rows.
    let mut norms = vec![0.0; m];
    for (k, row) in rows.iter_mut().enumerate() {
        let nrm = row.iter().map(|&(_, c)| c * c).sum::<f64>().sqrt();
        norms[k] = nrm;
        if nrm == 0.0 {
            if b[k].abs() > 1e-12 {
                return Err(RlqeError::InvalidInput(format!("constraint {k} is 0 = {}", b[k])));
            }
            continue;
        }
        for e in row.iter_mut() {
            e.1 /= nrm;
        }
        b[k] /= nrm;
    }
    let mut c: DVector<f64> = DVector::zeros(n);
    for e in &problem.objective {
        c[layout.index(e)] += svec_coef(e);
    }
    let c_scale = c.amax().max(1e-300);
    let c = c / c_scale;

    let apply = |x: &DVector<f64>| DVector::from_iterator(m, rows.iter().map(|r| r.iter().map(|&(k, v)| v * x[k]).sum()));
    let apply_t = |y: &DVector<f64>| {
        let mut out = DVector::zeros(n);
        for (r, &yk) in rows.iter().zip(y.iter()) {
            for &(k, v) in r {
                out[k] += v * yk;
            }
        }
        out
    };

    let mut aat = DMatrix::zeros(m, m);
    for p in 0..m {
        for q in 0..=p {
            let v = sparse_dot(&rows[p], &rows[q]);
            aat[(p, q)] = v;
            aat[(q, p)] = v;
        }
    }
    let reg = 1e-12 * aat.diagonal().amax().max(1.0);
    for p in 0..m {
        aat[(p, p)] += reg;
    }
    let chol = Cholesky::new(aat).ok_or_else(|| RlqeError::InvalidInput("constraint system is singular".into()))?;

    let b_norm = 1.0 + b.norm();
    let c_norm = 1.0 + c.norm();
    let mut x = DVector::zeros(n);
    let mut s = DVector::zeros(n);
    let mut y = DVector::zeros(m);
    let mut mu = settings.mu0;
    let (mut pinf, mut dinf, mut gap) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut ratio_acc = 0.0;
    let mut iters = 0;
    let mut converged = false;
    while iters < settings.max_iters {
        iters += 1;
        let rhs = (&b - apply(&x)) * mu + apply(&(&c - &s));
        y = chol.solve(&rhs);
        let aty = apply_t(&y);
        let v = &c - &aty - &x * mu;
        s = layout.project(&v);
        x = (&s - &v) / mu;

        if iters % 10 == 0 || iters == settings.max_iters {
            pinf = (apply(&x) - &b).norm() / b_norm;
            dinf = (&c - &aty - &s).norm() / c_norm;
            let (pobj, dobj) = (c.dot(&x), b.dot(&y));
            gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
            if pinf.max(dinf).max(gap) < settings.tol {
                converged = true;
                break;
            }
            ratio_acc += (pinf.max(1e-300) / dinf.max(1e-300)).ln();
            if iters % 50 == 0 {
                let r = ratio_acc / 5.0;
                ratio_acc = 0.0;
                if r > 1.0 {
                    mu = (mu * 1.6).min(1e6);
                } else if r < -1.0 {
                    mu = (mu / 1.6).max(1e-6);
                }
            }
        }
    }
    let blocks = (0..layout.sizes.len()).map(|k| layout.unpack(&x, k)).collect();
    // Undo the row and objective scalings for the reported dual.
    let y_orig: Vec<f64> = y
        .iter()
        .zip(&norms)
        .map(|(&yk, &nrm)| if nrm == 0.0 { 0.0 } else { yk * c_scale / nrm })
        .collect();
    Ok(SdpResult {
        blocks,
        primal_objective: c.dot(&x) * c_scale,
        dual_objective: b.dot(&y) * c_scale,
        y: y_orig,
        primal_residual: pinf,
        dual_residual: dinf,
        gap,
        iterations: iters,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_minimization_with_unit_diagonal() {
        // C = [[2, 1], [1, 2]] over unit-diagonal psd X: optimum 2 at X = [[1, -1], [-1, 1]].
        let mut p = SdpProblem::default();
        let k = p.add_block(2);
        p.objective = vec![Entry::new(k, 0, 0, 2.0), Entry::new(k, 1, 1, 2.0), Entry::new(k, 0, 1, 2.0)];
        p.constrain(vec![Entry::new(k, 0, 0, 1.0)], 1.0);
        p.constrain(vec![Entry::new(k, 1, 1, 1.0)], 1.0);
        let r = solve_sdp(&p, &SdpSettings::default()).unwrap();
        assert!(r.converged);
        assert!((r.primal_objective - 2.0).abs() < 1e-6, "{}", r.primal_objective);
        assert!((r.dual_objective - 2.0).abs() < 1e-6);
        assert!((r.blocks[0][(0, 1)] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn scalar_blocks_are_a_linear_program() {
        // min x + 2y s.t. x + y = 1, x, y >= 0.
        let mut p = SdpProblem::default();
        let bx = p.add_block(1);
        let by = p.add_block(1);
        p.objective = vec![Entry::new(bx, 0, 0, 1.0), Entry::new(by, 0, 0, 2.0)];
        p.constrain(vec![Entry::new(bx, 0, 0, 1.0), Entry::new(by, 0, 0, 1.0)], 1.0);
        let r = solve_sdp(&p, &SdpSettings::default()).unwrap();
        assert!((r.primal_objective - 1.0).abs() < 1e-6);
        assert!((r.blocks[0][(0, 0)] - 1.0).abs() < 1e-5);
        assert!((r.y[0] - 1.0).abs() < 1e-5);
    }
}
