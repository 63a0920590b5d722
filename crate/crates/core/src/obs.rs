//! Observability constants, window sizing, the observable/unobservable
//! split and matrix-concentration diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RlqeError};
use crate::linalg::{mat_pow, mat_serde, max_eigenvalue, min_eigenvalue, op_norm, sym_eigen, Mat};

/// Eigenvalues within this distance of the split threshold count as observable.
pub const SPLIT_TIE_TOL: f64 = 1e-9;

/// Denominator of the split threshold `kappa t / (40000 rho^4)`.
pub const SPLIT_DENOM: f64 = 40000.0;

/// `sum_{i<s} (A^i)^T B^T B A^i`.
///
/// Uses `O_{p+q} = O_p + (A^p)^T O_q A^p` so very long windows cost
/// `O(log s)` products.
pub fn observability_gram(a: &Mat, b: &Mat, s: u64) -> Mat {
    let d = a.nrows();
    let btb = b.transpose() * b;
    // (gram, power) for the current binary block length
    let mut block_gram = btb;
    let mut block_pow = a.clone();
    let mut acc_gram = Mat::zeros(d, d);
    let mut acc_pow = Mat::identity(d, d);
    let mut k = s;
    while k > 0 {
        if k & 1 == 1 {
            acc_gram += acc_pow.transpose() * &block_gram * &acc_pow;
            acc_pow = &acc_pow * &block_pow;
        }
        k >>= 1;
        if k > 0 {
            block_gram = &block_gram + block_pow.transpose() * &block_gram * &block_pow;
            block_pow = &block_pow * &block_pow;
        }
    }
    symmetrize(acc_gram)
}

fn symmetrize(m: Mat) -> Mat {
    (&m + m.transpose()) * 0.5
}

/// Single term `(A^i)^T B^T B A^i` for each `i < t`.
pub fn gram_terms(a: &Mat, b: &Mat, t: usize) -> Vec<Mat> {
    let d = a.nrows();
    let mut p = Mat::identity(d, d);
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        let bp = b * &p;
        out.push(bp.transpose() * bp);
        p = a * &p;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityProfile {
    pub s: usize,
    pub kappa: f64,
    pub alpha: f64,
    pub rho: f64,
    pub b_norm: f64,
    #[serde(with = "mat_serde")]
    pub gram_s: Mat,
    pub horizon_checked: usize,
    pub warning: Option<String>,
}

/// Smallest observable `s <= s_max`, the conditioning constants of `O_s`
/// and `rho = max_{j <= horizon} ||A^j||`.
pub fn estimate_constants(a: &Mat, b: &Mat, s_max: usize, horizon: usize) -> Result<ObservabilityProfile> {
    if s_max == 0 || horizon == 0 {
        return Err(RlqeError::InvalidInput("s_max and horizon must be >= 1".into()));
    }
    if a.nrows() != a.ncols() || b.ncols() != a.nrows() {
        return Err(RlqeError::DimensionMismatch("A must be d x d and B m x d".into()));
    }
    let terms = gram_terms(a, b, s_max);
    let d = a.nrows();
    let mut gram = Mat::zeros(d, d);
    let mut found = None;
    for (k, term) in terms.iter().enumerate() {
        gram += term;
        let lo = min_eigenvalue(&gram);
        let hi = max_eigenvalue(&gram);
        if lo > 1e-10 * hi.max(1.0) {
            found = Some((k + 1, lo, hi));
            break;
        }
    }
    let (s, lo, hi) = found.ok_or(RlqeError::Unobservable { s_max })?;

    let mut rho: f64 = 1.0;
    let mut p = Mat::identity(d, d);
    let mut half_norm = 1.0;
    let mut last_norm = 1.0;
    for j in 1..=horizon {
        p = a * &p;
        let n = op_norm(&p);
        rho = rho.max(n);
        if j == horizon / 2 {
            half_norm = n;
        }
        last_norm = n;
    }
    if horizon == 1 {
        half_norm = 1.0;
    }
    let warning = (last_norm > 10.0 * half_norm)
        .then(|| format!("possibly unstable: ||A^{horizon}|| = {last_norm:.3e} exceeds 10x ||A^{}||", horizon / 2));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(ObservabilityProfile {
        s,
        kappa: lo / s as f64,
        alpha: hi / s as f64,
        rho,
        b_norm: op_norm(b),
        gram_s: gram,
        horizon_checked: horizon,
        warning,
    })
}

/// Which log factor the window formula uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WindowStage {
    /// `log(dT/delta)`.
    LogT,
    /// `log(d/delta1)`.
    LogLogT { delta1: f64 },
}

/// `C_win kappa^-2 rho^12 ||B||^4 * log-term`, before rounding.
pub fn window_formula(profile: &ObservabilityProfile, d: usize, horizon: usize, delta: f64, stage: WindowStage, c_win: f64) -> f64 {
    let log_term = match stage {
        WindowStage::LogT => (d as f64 * horizon as f64 / delta).ln(),
        WindowStage::LogLogT { delta1 } => (d as f64 / delta1).ln(),
    };
    c_win * profile.kappa.powi(-2) * profile.rho.powi(12) * profile.b_norm.powi(4) * log_term.max(0.0)
}

/// Window size without the `t <= T` check; saturates at `u64::MAX`.
pub fn window_size_unchecked(profile: &ObservabilityProfile, d: usize, horizon: usize, delta: f64, stage: WindowStage, c_win: f64) -> u64 {
    let raw = window_formula(profile, d, horizon, delta, stage, c_win);
    let s = profile.s as u64;
    // Guard the ceiling against rounding noise in exact cases like log(e) = 1.
    let need = (raw - 1e-9 * raw.abs().max(1.0)).ceil().max(0.0);
    let need = if need >= u64::MAX as f64 { u64::MAX } else { need as u64 };
    let t = need.max(s);
    t.div_ceil(s).saturating_mul(s)
}

pub fn window_size(profile: &ObservabilityProfile, d: usize, horizon: usize, delta: f64, stage: WindowStage, c_win: f64) -> Result<usize> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(RlqeError::InvalidInput("delta must be positive".into()));
    }
    let t = window_size_unchecked(profile, d, horizon, delta, stage, c_win);
    if t > horizon as u64 {
        let min_horizon = match stage {
            WindowStage::LogLogT { .. } => t,
            WindowStage::LogT => min_viable_horizon(profile, d, delta, c_win),
        };
        return Err(RlqeError::HorizonTooShort {
            window: t.min(usize::MAX as u64) as usize,
            horizon,
            min_horizon: min_horizon.min(usize::MAX as u64) as usize,
        });
    }
    Ok(t as usize)
}

/// Smallest `T` with `t(T) <= T` for the log-T stage.
fn min_viable_horizon(profile: &ObservabilityProfile, d: usize, delta: f64, c_win: f64) -> u64 {
    let fits = |h: u64| window_size_unchecked(profile, d, h as usize, delta, WindowStage::LogT, c_win) <= h;
    let mut hi = 1u64;
    while !fits(hi) {
        if hi >= 1 << 62 {
            return u64::MAX;
        }
        hi *= 2;
    }
    let mut lo = hi / 2;
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceSplit {
    pub t: u64,
    pub zeta: f64,
    #[serde(with = "mat_serde")]
    pub pi: Mat,
    #[serde(with = "mat_serde")]
    pub pi_perp: Mat,
    #[serde(with = "mat_serde")]
    pub gram_t: Mat,
}

/// Split at the default threshold `kappa t / (40000 rho^4)`.
pub fn subspace_split(a: &Mat, b: &Mat, profile: &ObservabilityProfile, t: u64) -> Result<SubspaceSplit> {
    if t == 0 || t % profile.s as u64 != 0 {
        return Err(RlqeError::InvalidInput(format!("window {t} is not a positive multiple of s = {}", profile.s)));
    }
    let zeta = profile.kappa * t as f64 / (SPLIT_DENOM * profile.rho.powi(4));
    Ok(subspace_split_at(a, b, t, zeta))
}

/// Split of `O_t` at an explicit threshold.
pub fn subspace_split_at(a: &Mat, b: &Mat, t: u64, zeta: f64) -> SubspaceSplit {
    let gram_t = observability_gram(a, b, t);
    let d = a.nrows();
    let (vals, vecs) = sym_eigen(&gram_t);
    let mut pi = Mat::zeros(d, d);
    for (k, &lam) in vals.iter().enumerate() {
        if lam >= zeta - SPLIT_TIE_TOL {
            let v = vecs.column(k);
            pi += &v * v.transpose();
        }
    }
    let pi_perp = Mat::identity(d, d) - &pi;
    SubspaceSplit {
        t,
        zeta,
        pi,
        pi_perp,
        gram_t,
    }
}

/// `lambda_max(Pi_perp (A^t)^T A^t Pi_perp)`: how much of the unobservable
/// subspace survives one window.
pub fn check_unobservable_decay(split: &SubspaceSplit, a: &Mat) -> f64 {
    if split.pi_perp.iter().all(|v| v.abs() < 1e-15) {
        return 0.0;
    }
    let at = mat_pow(a, split.t);
    let m = &split.pi_perp * at.transpose() * &at * &split.pi_perp;
    max_eigenvalue(&symmetrize(m)).max(0.0)
}

/// `|| sum_i mask_i (A^i)^T B^T B A^i - (1 - eta_hat) O_t ||` with
/// `eta_hat` the empirical corruption rate of the mask.
pub fn subsample_deviation(mask: &[bool], a: &Mat, b: &Mat) -> f64 {
    let n = mask.len().max(1) as f64;
    let eta_hat = mask.iter().filter(|m| !**m).count() as f64 / n;
    subsample_deviation_at(mask, a, b, eta_hat)
}

/// Same as [`subsample_deviation`] against a given corruption rate.
pub fn subsample_deviation_at(mask: &[bool], a: &Mat, b: &Mat, eta: f64) -> f64 {
    let d = a.nrows();
    let mut kept = Mat::zeros(d, d);
    let mut full = Mat::zeros(d, d);
    for (g, &keep) in gram_terms(a, b, mask.len()).iter().zip(mask) {
        full += g;
        if keep {
            kept += g;
        }
    }
    op_norm(&(kept - full * (1.0 - eta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbeds;
    use approx::assert_relative_eq;

    fn naive_gram(a: &Mat, b: &Mat, s: usize) -> Mat {
        let mut g = Mat::zeros(a.nrows(), a.nrows());
        let mut p = Mat::identity(a.nrows(), a.nrows());
        for _ in 0..s {
            g += p.transpose() * b.transpose() * b * &p;
            p = a * p;
        }
        g
    }

    #[test]
    fn scalar_walk_gram_is_s() {
        let one = Mat::from_element(1, 1, 1.0);
        for s in [1u64, 5, 17] {
            assert_relative_eq!(observability_gram(&one, &one, s)[(0, 0)], s as f64);
        }
    }

    #[test]
    fn swap_system_needs_two_steps() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let b = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(observability_gram(&a, &b, 1), Mat::from_diagonal(&crate::linalg::Vect::from_vec(vec![1.0, 0.0])));
        assert_relative_eq!(observability_gram(&a, &b, 2), Mat::identity(2, 2));
    }

    #[test]
    fn doubling_matches_naive_sum() {
        let a = Mat::from_row_slice(3, 3, &[0.3, -0.8, 0.1, 0.5, 0.2, -0.4, 0.0, 0.6, 0.7]);
        let b = Mat::from_row_slice(2, 3, &[1.0, 0.0, -0.5, 0.3, 2.0, 0.0]);
        for s in [1, 2, 7, 13, 32] {
            assert_relative_eq!(observability_gram(&a, &b, s as u64), naive_gram(&a, &b, s), epsilon = 1e-10);
        }
    }

    #[test]
    fn constants_of_reference_systems() {
        let one = Mat::from_element(1, 1, 1.0);
        let p = estimate_constants(&one, &one, 4, 100).unwrap();
        assert_eq!((p.s, p.kappa, p.alpha, p.rho), (1, 1.0, 1.0, 1.0));

        let cyc = testbeds::coordinate_cycle(3, 10);
        assert_eq!(estimate_constants(&cyc.a, &cyc.b, 10, 40).unwrap().s, 3);

        let half = Mat::from_element(1, 1, 0.5);
        assert_eq!(estimate_constants(&half, &one, 4, 100).unwrap().rho, 1.0);
    }

    #[test]
    fn unobservable_system_rejected() {
        let a = Mat::identity(2, 2);
        let b = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(matches!(estimate_constants(&a, &b, 5, 10), Err(RlqeError::Unobservable { s_max: 5 })));
    }

    #[test]
    fn growth_warning_for_unstable_dynamics() {
        let a = Mat::from_element(1, 1, 1.1);
        let one = Mat::from_element(1, 1, 1.0);
        assert!(estimate_constants(&a, &one, 2, 100).unwrap().warning.is_some());
        assert!(estimate_constants(&one, &one, 2, 100).unwrap().warning.is_none());
    }

    fn unit_profile() -> ObservabilityProfile {
        ObservabilityProfile {
            s: 1,
            kappa: 1.0,
            alpha: 1.0,
            rho: 1.0,
            b_norm: 1.0,
            gram_s: Mat::identity(1, 1),
            horizon_checked: 1,
            warning: None,
        }
    }

    #[test]
    fn unit_constants_give_unit_window() {
        let horizon = 10;
        let delta = horizon as f64 / std::f64::consts::E;
        assert_eq!(window_size(&unit_profile(), 1, horizon, delta, WindowStage::LogT, 1.0).unwrap(), 1);
    }

    #[test]
    fn window_grows_only_through_the_log() {
        let p = unit_profile();
        for horizon in [1000usize, 4000, 20000] {
            let t1 = window_size(&p, 1, horizon, 0.05, WindowStage::LogT, 4.0).unwrap() as f64;
            let t2 = window_size(&p, 1, 2 * horizon, 0.05, WindowStage::LogT, 4.0).unwrap() as f64;
            let log_term = (horizon as f64 / 0.05).ln();
            assert!(t2 >= t1);
            // one extra unit allowed for the ceiling
            assert!(t2 / t1 <= 1.0 + 2f64.ln() / log_term + 1.0 / t1);
        }
    }

    #[test]
    fn cycle_window_is_multiple_of_three() {
        let cyc = testbeds::coordinate_cycle(3, 4096);
        let p = estimate_constants(&cyc.a, &cyc.b, 10, 4 * 4096).unwrap();
        // kappa = 1/3, rho = 1, ||B|| = 1: 4 * 9 * ln(3 * 4096 / 0.05) = 446.3 -> 447 -> 447
        let expected = (4.0 * 9.0 * (3.0f64 * 4096.0 / 0.05).ln()).ceil() as usize;
        let expected = expected.div_ceil(3) * 3;
        let t = window_size(&p, 3, 4096, 0.05, WindowStage::LogT, 4.0).unwrap();
        assert_eq!(t, expected);
        assert_eq!(t % 3, 0);
    }

    #[test]
    fn short_horizon_reports_minimum() {
        match window_size(&unit_profile(), 1, 10, 0.05, WindowStage::LogT, 4.0) {
            Err(RlqeError::HorizonTooShort { window, horizon, min_horizon }) => {
                assert!(window > horizon);
                let p = unit_profile();
                assert!(window_size(&p, 1, min_horizon, 0.05, WindowStage::LogT, 4.0).is_ok());
                assert!(window_size(&p, 1, min_horizon - 1, 0.05, WindowStage::LogT, 4.0).is_err());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_extremes() {
        let a = Mat::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.5]);
        let b = Mat::identity(2, 2);
        let all = subspace_split_at(&a, &b, 4, 1e-3);
        assert_relative_eq!(all.pi, Mat::identity(2, 2), epsilon = 1e-12);
        let none = subspace_split_at(&a, &b, 4, 1e6);
        assert_relative_eq!(none.pi, Mat::zeros(2, 2), epsilon = 1e-12);
        assert_eq!(check_unobservable_decay(&all, &a), 0.0);
    }

    #[test]
    fn hard_subspace_points_along_third_axis() {
        let sys = testbeds::hard_subspace(100);
        let t = 2000u64;
        let split = subspace_split_at(&sys.a, &sys.b, t, 10.0);
        let (vals, _) = sym_eigen(&split.pi_perp);
        assert!(vals.iter().filter(|v| **v > 0.5).count() >= 1);
        let e3 = crate::linalg::Vect::from_vec(vec![0.0, 0.0, 1.0]);
        assert!((&split.pi_perp * &e3).norm() >= 0.9);
    }

    #[test]
    fn nilpotent_dynamics_annihilate() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let b = Mat::from_row_slice(1, 2, &[0.0, 1.0]);
        let split = subspace_split_at(&a, &b, 2, 1e9);
        assert_eq!(check_unobservable_decay(&split, &a), 0.0);
    }

    #[test]
    fn subsample_deviation_degenerate_masks() {
        let a = Mat::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let b = Mat::from_row_slice(1, 2, &[1.0, 1.0]);
        assert!(subsample_deviation(&[true; 12], &a, &b) < 1e-12);
        assert!(subsample_deviation(&[false; 12], &a, &b) < 1e-12);
    }

    #[test]
    fn gram_nesting_and_epochs() {
        let sys = testbeds::coordinate_cycle(3, 10);
        let s = 3u64;
        let o_s = observability_gram(&sys.a, &sys.b, s);
        for r in 1..6u64 {
            let t = r * s;
            let o_t = observability_gram(&sys.a, &sys.b, t);
            assert!(min_eigenvalue(&(&o_t - &o_s)) > -1e-12);
            let mut epochs = Mat::zeros(3, 3);
            for k in 0..r {
                let p = mat_pow(&sys.a, k * s);
                epochs += p.transpose() * &o_s * p;
            }
            assert_relative_eq!(o_t, epochs, epsilon = 1e-10);
        }
    }
}
