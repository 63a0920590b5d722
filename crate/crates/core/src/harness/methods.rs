//! Estimators compared by the harness, including the oblivious baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RlqeError};
use crate::kalman::{filter_predictions, run_filter, smoother};
use crate::lds::{EpisodeData, SystemModel};
use crate::linalg::{Mat, Trajectory, Vect};
use crate::online::{choose_radius, predict_all, TwoStageConfig};
use crate::robust::{confidence_band, sos_kalman_pipeline, stage_one, ConfidenceBand, RobustConfig};
use crate::wiener::{stationary_gain, truncated_predictions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OracleSmoother,
    NaiveKalman,
    ObliviousThreshold,
    TruncatedWiener,
    RobustSmootherV1,
    SosKalman,
    TwoStageOnline,
    ObliviousShrinkage,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::OracleSmoother => "oracle_smoother",
            Self::NaiveKalman => "naive_kalman",
            Self::ObliviousThreshold => "oblivious_threshold",
            Self::TruncatedWiener => "truncated_wiener",
            Self::RobustSmootherV1 => "robust_smoother_v1",
            Self::SosKalman => "sos_kalman",
            Self::TwoStageOnline => "two_stage_online",
            Self::ObliviousShrinkage => "oblivious_shrinkage",
        }
    }

    /// Causal methods report predictions rather than a smoothed trajectory.
    pub fn is_online(self) -> bool {
        matches!(self, Self::TruncatedWiener | Self::TwoStageOnline)
    }
}

/// Knobs shared by every method in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSettings {
    pub eta: f64,
    pub delta: f64,
    pub robust: RobustConfig,
    /// Threshold `c sqrt(T)` of the oblivious removal baseline.
    pub threshold_scale: f64,
    pub c_r: f64,
    pub c_h: f64,
    pub c_tau: f64,
    /// Variance of corrupted observations assumed by the shrinkage baseline;
    /// `None` uses the clean observation variance.
    pub corruption_variance: Option<f64>,
}

/// What a method produced on one episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MethodOutput {
    pub x_hat: Option<Trajectory>,
    /// Column `i` predicts `x_{i+1}` from `y_0 ..= y_i`.
    pub predictions: Option<Trajectory>,
    pub band: Option<ConfidenceBand>,
    /// First index past the band burn-in.
    pub band_from: usize,
    pub flags: Vec<String>,
}

/// Drops every observation with `||y_i|| >= threshold`, then smooths the rest.
/// With nothing left the prior mean (zero) is returned and flagged.
pub fn oblivious_threshold_baseline(model: &SystemModel, y: &Trajectory, threshold: f64) -> Result<(Trajectory, Vec<String>)> {
    if !(threshold > 0.0) {
        return Err(RlqeError::InvalidInput(format!("threshold must be positive, got {threshold}")));
    }
    let mask: Vec<bool> = (0..y.len()).map(|i| y.step(i).norm() < threshold).collect();
    if !mask.iter().any(|k| *k) {
        return Ok((Trajectory::zeros(model.state_dim(), y.len()), vec!["all observations dropped".into()]));
    }
    Ok((smoother(model, y, &mask)?.x_hat, Vec::new()))
}

/// Best mask-oblivious per-step shrinkage `x_i = c y_i` for `A = 0, B = I`:
/// `c = (1 - eta) (s^2 + t^2) / t^2 / ((1 - eta)(s^2 + t^2)(1/t^2 + 1/s^2) + eta v / s^2)`
/// with `s^2 = sigma2`, `t^2 = tau2` and `v` the corrupted variance.
pub fn shrinkage_factor(model: &SystemModel, eta: f64, corruption_variance: f64) -> f64 {
    let (s2, t2) = (model.sigma2, model.tau2);
    let clean = (1.0 - eta) * (s2 + t2);
    clean / t2 / (clean * (1.0 / t2 + 1.0 / s2) + eta * corruption_variance / s2)
}

pub fn oblivious_shrinkage(model: &SystemModel, y: &Trajectory, eta: f64, corruption_variance: Option<f64>) -> Result<Trajectory> {
    let d = model.state_dim();
    if model.a.amax() != 0.0 || model.b != Mat::identity(d, d) {
        return Err(RlqeError::InvalidInput("oblivious shrinkage needs A = 0 and B = I".into()));
    }
    let v = corruption_variance.unwrap_or(model.sigma2 + model.tau2);
    Ok(y.scale(shrinkage_factor(model, eta, v)))
}

/// Radius of the online correction. The band radius does not depend on the
/// data, so it is computed up front around a zero center.
pub fn online_config(model: &SystemModel, eta: f64, delta: f64, cfg: &RobustConfig, c_r: f64) -> Result<TwoStageConfig> {
    let t_len = model.horizon;
    let ys = Trajectory::zeros(model.obs_dim(), t_len);
    let s1 = stage_one(model, &ys, eta, delta, cfg)?;
    let band = confidence_band(&Trajectory::zeros(model.state_dim(), t_len), &s1.profile, model, delta, s1.t_pre, cfg.c_band);
    Ok(TwoStageConfig {
        r: choose_radius(&band, s1.profile.b_norm, s1.profile.rho, c_r),
        refresh_every: s1.t_pre,
        warmup: 2 * s1.t_pre,
        eta,
        delta,
        robust: cfg.clone(),
    })
}

/// Shifts per-time predictions (`x_t` from `y_{<t}`) into the harness layout.
fn shift_predictions(d: usize, preds: &[Vect]) -> Trajectory {
    let cols: Vec<Vect> = (0..preds.len())
        .map(|i| preds.get(i + 1).cloned().unwrap_or_else(|| Vect::zeros(d)))
        .collect();
    Trajectory::from_columns(d, &cols)
}

pub fn run_method(method: Method, ep: &EpisodeData, s: &MethodSettings) -> Result<MethodOutput> {
    let model = &ep.model;
    let t_len = ep.horizon();
    let mut out = MethodOutput::default();
    match method {
        Method::OracleSmoother => out.x_hat = Some(smoother(model, &ep.y, &ep.a_star)?.x_hat),
        Method::NaiveKalman => {
            out.x_hat = Some(smoother(model, &ep.y, &vec![true; t_len])?.x_hat);
            out.predictions = Some(filter_predictions(model, &run_filter(model, &ep.y, None)?));
        }
        Method::ObliviousThreshold => {
            let (x, flags) = oblivious_threshold_baseline(model, &ep.y, s.threshold_scale * (t_len as f64).sqrt())?;
            out.x_hat = Some(x);
            out.flags = flags;
        }
        Method::ObliviousShrinkage => out.x_hat = Some(oblivious_shrinkage(model, &ep.y, s.eta, s.corruption_variance)?),
        Method::RobustSmootherV1 => {
            let s1 = stage_one(model, &ep.y, s.eta, s.delta, &s.robust)?;
            out.x_hat = Some(s1.solution.x_hat);
            out.band_from = 2 * s1.t_pre;
            out.band = Some(s1.band);
            out.flags = s1.flags;
        }
        Method::SosKalman => {
            let p = sos_kalman_pipeline(model, &ep.y, s.eta, s.delta, &s.robust)?;
            out.x_hat = Some(p.solution.x_hat);
            out.band_from = 2 * p.t_pre;
            out.band = Some(p.band);
            out.flags = p.flags;
        }
        Method::TwoStageOnline => {
            let cfg = online_config(model, s.eta, s.delta, &s.robust, s.c_r)?;
            let run = predict_all(model, &ep.y, &cfg)?;
            let fired = run.corrected.iter().filter(|f| **f).count();
            out.flags = run.flags;
            out.flags.push(format!("r = {:.6e}, corrections = {fired}", cfg.r));
            out.predictions = Some(run.predictions);
        }
        Method::TruncatedWiener => {
            let wm = stationary_gain(model)?.with_schedule(s.eta, s.c_h, s.c_tau)?;
            let cols: Vec<Vect> = (0..t_len).map(|i| ep.y.step(i)).collect();
            let preds = truncated_predictions(&wm, &cols);
            out.flags.push(format!("h = {}, tau = {:.6e}", wm.h, wm.tau_trunc));
            out.predictions = Some(shift_predictions(model.state_dim(), &preds));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::clean_nll;
    use crate::lds::{apply_corruptions, simulate, AdversaryStrategy};
    use crate::testbeds;

    #[test]
    fn infinite_threshold_is_naive() {
        let model = testbeds::scalar_random_walk(50);
        let ep = simulate(&model, 3).unwrap();
        let (x, flags) = oblivious_threshold_baseline(&model, &ep.y, 1e18).unwrap();
        assert!(flags.is_empty());
        let naive = smoother(&model, &ep.y, &[true; 50]).unwrap();
        assert!(x.max_step_distance(&naive.x_hat) < 1e-12);
    }

    #[test]
    fn tiny_threshold_is_prior_mean() {
        let model = testbeds::scalar_random_walk(20);
        let ep = simulate(&model, 3).unwrap();
        let (x, flags) = oblivious_threshold_baseline(&model, &ep.y, 1e-300).unwrap();
        assert_eq!(flags.len(), 1);
        assert_eq!(x, Trajectory::zeros(1, 20));
        assert!(clean_nll(&x, &ep).unwrap() > 0.0);
    }

    #[test]
    fn shrinkage_matches_closed_form() {
        let model = testbeds::memoryless(2, 10);
        for eta in [0.0, 0.1, 0.3] {
            let c = shrinkage_factor(&model, eta, 2.0);
            assert!((c - (1.0 - eta) / (2.0 - eta)).abs() < 1e-15);
        }
        assert!(oblivious_shrinkage(&testbeds::scalar_random_walk(5), &Trajectory::zeros(1, 5), 0.1, None).is_err());
    }

    #[test]
    fn every_method_runs() {
        let model = testbeds::stable_scalar(96);
        let ep = apply_corruptions(&simulate(&model, 1).unwrap(), 0.1, &AdversaryStrategy::Spike { scale: 10.0 }, 1).unwrap();
        let s = MethodSettings {
            eta: 0.1,
            delta: 0.05,
            robust: RobustConfig::default(),
            threshold_scale: 3.0,
            c_r: 2.0,
            c_h: 1.0,
            c_tau: 1.0,
            corruption_variance: None,
        };
        for m in [
            Method::OracleSmoother,
            Method::NaiveKalman,
            Method::ObliviousThreshold,
            Method::TruncatedWiener,
            Method::RobustSmootherV1,
            Method::SosKalman,
            Method::TwoStageOnline,
        ] {
            let out = run_method(m, &ep, &s).unwrap();
            assert_eq!(out.x_hat.is_none(), m.is_online(), "{}", m.name());
        }
    }
}
