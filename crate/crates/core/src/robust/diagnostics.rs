//! Spectral and pathwise checks on returned solutions.

use crate::lds::SystemModel;
use crate::linalg::{min_eigenvalue, sym_eigen, Mat, Trajectory};
use crate::obs::{gram_terms, SubspaceSplit};

/// Orthonormal basis of the range of a projector.
fn range_basis(pi: &Mat) -> Mat {
    let (vals, vecs) = sym_eigen(pi);
    let cols: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > 0.5).collect();
    Mat::from_fn(pi.nrows(), cols.len(), |r, c| vecs[(r, cols[c])])
}

/// Per window: `lambda_min` on the observable range of
/// `Pi (sum a*_i a_i G_i) Pi - Pi O_t Pi / 100`, with `O_t` scaled to the
/// window length. `+inf` when the observable subspace is trivial.
pub fn subsampling_certificate(model: &SystemModel, t: usize, split: &SubspaceSplit, a_star: &[bool], a_hat: &[f64]) -> Vec<f64> {
    let grams = gram_terms(&model.a, &model.b, t);
    let basis = range_basis(&split.pi);
    let t_len = a_star.len();
    let n_windows = t_len.div_ceil(t);
    (0..n_windows)
        .map(|l| {
            if basis.ncols() == 0 {
                return f64::INFINITY;
            }
            let range = l * t..((l + 1) * t).min(t_len);
            let len = range.len() as f64;
            let mut acc = -&split.gram_t * (len / t as f64 / 100.0);
            for (j, i) in range.enumerate() {
                let w = if a_star[i] { a_hat[i] } else { 0.0 };
                if w != 0.0 {
                    acc += &grams[j] * w;
                }
            }
            min_eigenvalue(&(basis.transpose() * acc * &basis))
        })
        .collect()
}

/// `e_l = ||x_hat[l t] - x*[l t]||^2` for each window start.
pub fn window_errors(x_hat: &Trajectory, x_star: &Trajectory, t: usize) -> Vec<f64> {
    (0..x_hat.len()).step_by(t).map(|i| (x_hat.step(i) - x_star.step(i)).norm_squared()).collect()
}

/// Fraction of windows `l >= 1` with `e_l <= e_{l-1} / 2 + floor`.
pub fn contraction_rate(errors: &[f64], floor: f64) -> f64 {
    if errors.len() < 2 {
        return 1.0;
    }
    let ok = errors.windows(2).filter(|w| w[1] <= 0.5 * w[0] + floor).count();
    ok as f64 / (errors.len() - 1) as f64
}

/// Largest `a*_i a_i (||B A^j Pi q||^2 - 4 ||B A^j Pi_perp q||^2)` over
/// windows and offsets `j`, with `q` the window-start error.
pub fn cancellation_excess(
    model: &SystemModel,
    t: usize,
    split: &SubspaceSplit,
    x_hat: &Trajectory,
    x_star: &Trajectory,
    a_star: &[bool],
    a_hat: &[f64],
) -> f64 {
    let t_len = x_hat.len();
    let mut worst = f64::NEG_INFINITY;
    let mut powers = Vec::with_capacity(t);
    let mut p = Mat::identity(model.state_dim(), model.state_dim());
    for _ in 0..t {
        powers.push(&model.b * &p);
        p = &model.a * p;
    }
    for start in (0..t_len).step_by(t) {
        let q = x_hat.step(start) - x_star.step(start);
        let (qo, qu) = (&split.pi * &q, &split.pi_perp * &q);
        for j in 0..t.min(t_len - start) {
            let i = start + j;
            let w = if a_star[i] { a_hat[i] } else { 0.0 };
            if w == 0.0 {
                continue;
            }
            let v = w * ((&powers[j] * &qo).norm_squared() - 4.0 * (&powers[j] * &qu).norm_squared());
            worst = worst.max(v);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::subspace_split_at;
    use crate::testbeds;

    #[test]
    fn full_clean_mask_certifies() {
        let model = testbeds::coordinate_cycle(3, 60);
        let split = subspace_split_at(&model.a, &model.b, 12, 0.5);
        let cert = subsampling_certificate(&model, 12, &split, &[true; 60], &[1.0; 60]);
        assert_eq!(cert.len(), 5);
        // O_12 = 4 I here, so the certificate is 4 - 4/100.
        assert!(cert.iter().all(|&c| (c - 3.96).abs() < 1e-9), "{cert:?}");
    }

    #[test]
    fn contraction_counts() {
        assert_eq!(contraction_rate(&[8.0, 4.0, 2.5, 1.0], 0.0), 2.0 / 3.0);
        assert_eq!(contraction_rate(&[8.0, 4.0, 2.5, 1.0], 1.0), 1.0);
    }

    #[test]
    fn exact_estimate_has_no_excess() {
        let model = testbeds::hard_subspace(20);
        let split = subspace_split_at(&model.a, &model.b, 4, 1e-3);
        let x = Trajectory::zeros(3, 20);
        assert_eq!(cancellation_excess(&model, 4, &split, &x, &x, &[true; 20], &[1.0; 20]), 0.0);
    }
}
