//! Stationary robust filtering for strictly stable systems: the Wiener
//! predictor, its depth-`h` truncation and the output clipping rule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RlqeError};
use crate::kalman::stability_constants;
use crate::lds::SystemModel;
use crate::linalg::{mat_serde, op_norm, spectral_radius, Mat, Vect};

/// Largest spectral radius of `A` accepted as strictly stable.
pub const STABILITY_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WienerModel {
    /// Predictor gain: `x_{t+1|t} = F x_{t|t-1} + K y_t`.
    #[serde(with = "mat_serde")]
    pub k: Mat,
    /// `A - K B`.
    #[serde(with = "mat_serde")]
    pub f: Mat,
    /// Stationary state covariance.
    #[serde(with = "mat_serde")]
    pub sigma: Mat,
    /// Contraction rate used by the depth schedule.
    pub f_rate: f64,
    /// `sqrt(E ||K y_0||^2)` under the stationary law.
    pub sigma_y: f64,
    pub h: usize,
    pub tau_trunc: f64,
}

/// `sigma2 * sum_k A^k (A^k)^T`, summed until increments drop below 1e-14.
pub fn stationary_covariance(model: &SystemModel) -> Result<Mat> {
    let sr = spectral_radius(&model.a);
    if sr >= 1.0 - STABILITY_MARGIN {
        return Err(RlqeError::NotStrictlyStable(sr));
    }
    let d = model.state_dim();
    let mut sigma = Mat::zeros(d, d);
    let mut p = Mat::identity(d, d);
    for _ in 0..10_000_000 {
        let inc = &p * p.transpose() * model.sigma2;
        sigma += &inc;
        if inc.amax() < 1e-14 * sigma.amax().max(1.0) {
            break;
        }
        p = &model.a * p;
    }
    Ok(sigma)
}

/// Steady-state predictor from the converged Kalman gain. `h` and
/// `tau_trunc` start disabled (`h = 1`, no clipping); set them with
/// [`WienerModel::with_schedule`].
pub fn stationary_gain(model: &SystemModel) -> Result<WienerModel> {
    let sigma = stationary_covariance(model)?;
    let stab = stability_constants(model, 1)?;
    let k = &model.a * &stab.steady_gain;
    let f = &model.a - &k * &model.b;
    let f_norm = op_norm(&f);
    // A non-normal F can have norm >= 1 while still contracting.
    let f_rate = if f_norm < 1.0 { f_norm } else { spectral_radius(&f) };
    let m = model.obs_dim();
    let cov_y = &model.b * &sigma * model.b.transpose() + Mat::identity(m, m) * model.tau2;
    let sigma_y = (&k * cov_y * k.transpose()).trace().max(0.0).sqrt();
    Ok(WienerModel {
        k,
        f,
        sigma,
        f_rate,
        sigma_y,
        h: 1,
        tau_trunc: f64::INFINITY,
    })
}

/// `(h, tau)` for corruption rate `eta`:
/// `h = ceil(c_h log(1/eta) / log(1/rate))`,
/// `tau = c_tau sigma_y ((1/eta) log(1/eta))^{1/3}`.
pub fn schedule_params(wm: &WienerModel, eta: f64, c_h: f64, c_tau: f64) -> Result<(usize, f64)> {
    if !(eta > 0.0 && eta < 0.5) {
        return Err(RlqeError::InvalidInput(format!("eta must be in (0, 1/2), got {eta}")));
    }
    let log_inv = (1.0 / eta).ln();
    let h = if wm.f_rate <= 0.0 {
        1
    } else {
        let raw = c_h * log_inv / (1.0 / wm.f_rate).ln();
        ((raw - 1e-9 * raw.max(1.0)).ceil() as usize).max(1)
    };
    let tau = c_tau * wm.sigma_y * (log_inv / eta).cbrt();
    Ok((h, tau))
}

impl WienerModel {
    pub fn with_schedule(mut self, eta: f64, c_h: f64, c_tau: f64) -> Result<Self> {
        let (h, tau) = schedule_params(&self, eta, c_h, c_tau)?;
        self.h = h;
        self.tau_trunc = tau;
        Ok(self)
    }

    /// `||F||^{s-1}` summed over `s >= 1`.
    pub fn gain_series(&self, terms: usize) -> f64 {
        let n = op_norm(&self.f);
        (0..terms).map(|s| n.powi(s as i32)).sum()
    }
}

/// Output of the truncated filter.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedPrediction {
    pub estimate: Vect,
    /// Fewer than `h` past observations were available.
    pub padded: bool,
    /// The linear output exceeded the clipping radius and was zeroed.
    pub clipped: bool,
}

/// `f_tau(sum_{s=1}^h F^{s-1} K y_{t-s})` where `past` ends at `y_{t-1}`.
pub fn truncated_filter(wm: &WienerModel, past: &[Vect]) -> TruncatedPrediction {
    let d = wm.f.nrows();
    let padded = past.len() < wm.h;
    let mut acc = Vect::zeros(d);
    // Horner: acc <- F acc + K y, oldest first.
    for y in past.iter().rev().take(wm.h).rev() {
        acc = &wm.f * acc + &wm.k * y;
    }
    let clipped = acc.norm() > wm.tau_trunc;
    if clipped {
        acc.fill(0.0);
    }
    TruncatedPrediction {
        estimate: acc,
        padded,
        clipped,
    }
}

/// Untruncated predictions over the full history, started from zero:
/// entry `t` predicts `x_t` from `y_0 .. y_{t-1}`.
pub fn wiener_predictions(wm: &WienerModel, y: &[Vect]) -> Vec<Vect> {
    let d = wm.f.nrows();
    let mut out = Vec::with_capacity(y.len());
    let mut x = Vect::zeros(d);
    for yt in y {
        out.push(x.clone());
        x = &wm.f * &x + &wm.k * yt;
    }
    out
}

/// Truncated predictions for every `t`, each from the last `h` observations.
pub fn truncated_predictions(wm: &WienerModel, y: &[Vect]) -> Vec<Vect> {
    (0..y.len()).map(|t| truncated_filter(wm, &y[..t]).estimate).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::{simulate_with, InitialState};
    use crate::testbeds;
    use approx::assert_relative_eq;

    #[test]
    fn memoryless_dynamics() {
        let model = SystemModel::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 10).unwrap();
        let wm = stationary_gain(&model).unwrap();
        assert_relative_eq!(wm.sigma[(0, 0)], 1.0);
        assert_eq!(wm.k[(0, 0)], 0.0);
        assert_eq!(wm.f[(0, 0)], 0.0);
    }

    #[test]
    fn scalar_stationary_variance() {
        let wm = stationary_gain(&testbeds::stable_scalar(10)).unwrap();
        assert_relative_eq!(wm.sigma[(0, 0)], 1.0 / (1.0 - 0.25), epsilon = 1e-12);
    }

    #[test]
    fn marginal_dynamics_rejected() {
        assert!(matches!(
            stationary_gain(&testbeds::scalar_random_walk(10)),
            Err(RlqeError::NotStrictlyStable(_))
        ));
    }

    #[test]
    fn series_matches_geometric_sum() {
        let wm = stationary_gain(&testbeds::stable_scalar(10)).unwrap();
        let n = op_norm(&wm.f);
        assert!((wm.gain_series(200) - 1.0 / (1.0 - n)).abs() < 0.01 / (1.0 - n));
    }

    #[test]
    fn zero_input_and_clipping() {
        let wm = stationary_gain(&testbeds::stable_scalar(10)).unwrap().with_schedule(0.1, 2.0, 1.0).unwrap();
        let zeros = vec![Vect::zeros(1); 10];
        assert_eq!(truncated_filter(&wm, &zeros).estimate, Vect::zeros(1));
        let mut spike = zeros.clone();
        spike[9] = Vect::from_element(1, 2.0 * wm.tau_trunc / wm.k[(0, 0)]);
        let out = truncated_filter(&wm, &spike);
        assert!(out.clipped);
        assert_eq!(out.estimate, Vect::zeros(1));
    }

    #[test]
    fn schedule_monotone_and_unit_case() {
        let wm = stationary_gain(&testbeds::stable_scalar(10)).unwrap();
        let mut prev = (0, 0.0);
        for eta in [0.4, 0.2, 0.1, 0.05, 0.025] {
            let (h, tau) = schedule_params(&wm, eta, 2.0, 1.0).unwrap();
            assert!(h >= prev.0 && tau > prev.1);
            prev = (h, tau);
        }
        let unit = WienerModel {
            f_rate: (-1.0f64).exp(),
            ..wm.clone()
        };
        assert_eq!(schedule_params(&unit, (-1.0f64).exp(), 1.0, 1.0).unwrap().0, 1);
        assert!(schedule_params(&wm, 0.5, 2.0, 1.0).is_err());
    }

    #[test]
    fn deep_truncation_tracks_full_filter() {
        let model = testbeds::stable_scalar(400);
        let mut wm = stationary_gain(&model).unwrap();
        wm.h = 30;
        let ep = simulate_with(&model, 3, &InitialState::Gaussian(wm.sigma.clone())).unwrap();
        let y: Vec<Vect> = (0..400).map(|i| ep.y.step(i)).collect();
        let full = wiener_predictions(&wm, &y);
        let trunc = truncated_predictions(&wm, &y);
        let ky = (wm.sigma_y).max(1e-12);
        let bound = op_norm(&wm.f).powi(30) * wm.gain_series(100) * ky * 10.0 + 1e-12;
        for t in 30..400 {
            assert!((&full[t] - &trunc[t]).norm() <= bound);
        }
    }

    #[test]
    fn joint_noise_scaling_is_equivariant() {
        let model = testbeds::stable_scalar(50);
        let scaled = model.rescaled_noise(3.0);
        let wm = stationary_gain(&model).unwrap().with_schedule(0.1, 2.0, 1.0).unwrap();
        let ws = stationary_gain(&scaled).unwrap().with_schedule(0.1, 2.0, 1.0).unwrap();
        let ep = simulate_with(&model, 4, &InitialState::Prior).unwrap();
        let y: Vec<Vect> = (0..50).map(|i| ep.y.step(i)).collect();
        let ys: Vec<Vect> = y.iter().map(|v| v * 3.0).collect();
        for (a, b) in truncated_predictions(&wm, &y).iter().zip(truncated_predictions(&ws, &ys)) {
            assert!((a * 3.0 - b).norm() < 1e-10);
        }
    }
}
