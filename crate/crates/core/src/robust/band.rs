//! Per-index confidence band around a first-stage trajectory.

use serde::{Deserialize, Serialize};

use crate::lds::SystemModel;
use crate::linalg::Trajectory;
use crate::obs::ObservabilityProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub center: Trajectory,
    pub radius: Vec<f64>,
    pub e_noise: f64,
    /// Square of the additive floor of the radius.
    pub eps_geo: f64,
    pub floor: f64,
    pub t_pre: usize,
}

impl ConfidenceBand {
    /// Fraction of indices `>= from` where `x` lies inside the band.
    pub fn coverage(&self, x: &Trajectory, from: usize) -> f64 {
        let n = x.len().saturating_sub(from);
        if n == 0 {
            return 1.0;
        }
        let inside = (from..x.len())
            .filter(|&i| (x.step(i) - self.center.step(i)).norm() <= self.radius[i])
            .count();
        inside as f64 / n as f64
    }
}

/// `tau^2 (m + log(T/delta)) + t rho^2 ||B||^2 sigma^2 (d + log(T/delta))`.
pub fn noise_energy(model: &SystemModel, profile: &ObservabilityProfile, horizon: usize, delta: f64, t: usize) -> f64 {
    let log_t = (horizon as f64 / delta).ln();
    let (d, m) = (model.state_dim() as f64, model.obs_dim() as f64);
    model.tau2 * (m + log_t) + t as f64 * profile.rho.powi(2) * profile.b_norm.powi(2) * model.sigma2 * (d + log_t)
}

/// `r_i = c_band (rho 2^{-l(i)/2} R (sqrt d + sqrt log(1/delta)) + rho^4 sqrt(E_noise t_pre / kappa))`
/// with `l(i) = floor(i / t_pre)`.
pub fn confidence_band(
    center: &Trajectory,
    profile: &ObservabilityProfile,
    model: &SystemModel,
    delta: f64,
    t_pre: usize,
    c_band: f64,
) -> ConfidenceBand {
    let t_len = center.len();
    let e_noise = noise_energy(model, profile, t_len, delta, t_pre);
    let floor = c_band * profile.rho.powi(4) * (e_noise * t_pre as f64 / profile.kappa).sqrt();
    let geo = c_band * profile.rho * model.r2.sqrt() * ((model.state_dim() as f64).sqrt() + (1.0 / delta).ln().sqrt());
    let radius = (0..t_len)
        .map(|i| geo * 2f64.powf(-((i / t_pre.max(1)) as f64) / 2.0) + floor)
        .collect();
    ConfidenceBand {
        center: center.clone(),
        radius,
        e_noise,
        eps_geo: floor * floor,
        floor,
        t_pre,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::estimate_constants;
    use crate::testbeds;

    fn band_for(model: &SystemModel, t_len: usize) -> ConfidenceBand {
        let prof = estimate_constants(&model.a, &model.b, 1, 4 * t_len).unwrap();
        confidence_band(&Trajectory::zeros(1, t_len), &prof, model, 0.05, 32, 4.0)
    }

    #[test]
    fn radius_decays_to_floor() {
        let band = band_for(&testbeds::scalar_random_walk(4096), 4096);
        let last = *band.radius.last().unwrap();
        assert!((last - band.floor).abs() <= 1e-12 * band.floor);
        assert!(band.radius.windows(2).all(|w| w[1] <= w[0]));
        assert!(band.radius.iter().all(|&r| r > 0.0));
    }

    #[test]
    fn prior_scale_moves_only_geometric_term() {
        let m1 = testbeds::scalar_random_walk(256);
        let mut m2 = m1.clone();
        m2.r2 *= 4.0;
        let (b1, b2) = (band_for(&m1, 256), band_for(&m2, 256));
        assert_eq!(b1.floor, b2.floor);
        for i in 0..256 {
            let (g1, g2) = (b1.radius[i] - b1.floor, b2.radius[i] - b2.floor);
            assert!((g2 - 2.0 * g1).abs() < 1e-9 * g2.max(1.0));
        }
    }
}
