//! Causal two-stage prediction: observations far from an offline robust
//! reference are replaced by the reference, then a standard Kalman filter
//! runs on the corrected stream.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RlqeError};
use crate::kalman::{first_step, filter_step, stability_constants, FilterState, StabilityConstants};
use crate::lds::SystemModel;
use crate::linalg::{op_norm, Trajectory, Vect};
use crate::robust::{sos_kalman_pipeline, ConfidenceBand, RobustConfig};

/// Smallest radius returned by [`choose_radius`].
pub const MIN_RADIUS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    /// Correction radius in observation norm.
    pub r: f64,
    /// Offline refresh period in steps.
    pub refresh_every: usize,
    /// Steps observed before the first offline solve; no correction fires
    /// earlier.
    pub warmup: usize,
    pub eta: f64,
    pub delta: f64,
    pub robust: RobustConfig,
}

impl TwoStageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) {
            return Err(RlqeError::InvalidInput(format!("correction radius must be positive, got {}", self.r)));
        }
        if self.refresh_every == 0 {
            return Err(RlqeError::InvalidInput("refresh_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Keeps `y_t` when `||y_t - y'_t|| <= r`, otherwise substitutes `y'_t`.
/// Returns the corrected window and which steps were replaced.
pub fn correct_observations(y: &[Vect], y_ref: &[Vect], r: f64) -> Result<(Vec<Vect>, Vec<bool>)> {
    if y.len() != y_ref.len() {
        return Err(RlqeError::DimensionMismatch("observation and reference lengths differ".into()));
    }
    Ok(y.iter()
        .zip(y_ref)
        .map(|(yt, rt)| if (yt - rt).norm() <= r { (yt.clone(), false) } else { (rt.clone(), true) })
        .unzip())
}

/// `c_r ||B|| rho max_i radius_i` over indices past the first two windows,
/// clamped below at [`MIN_RADIUS`].
pub fn choose_radius(band: &ConfidenceBand, b_norm: f64, rho: f64, c_r: f64) -> f64 {
    let burn_in = 2 * band.t_pre;
    let tail = band.radius.iter().skip(burn_in).copied().fold(f64::NEG_INFINITY, f64::max);
    let base = if tail.is_finite() { tail } else { band.floor };
    (c_r * b_norm * rho * base).max(MIN_RADIUS)
}

/// Streaming predictor. Each [`feed`](Self::feed) call consumes `y_i` and
/// returns `x_{i+1|i}`; nothing after `y_i` is ever read.
pub struct TwoStagePredictor {
    model: SystemModel,
    config: TwoStageConfig,
    history: Vec<Vect>,
    reference: Option<(usize, Vect)>,
    state: Option<FilterState>,
    corrected: Vec<bool>,
    flags: Vec<String>,
}

impl TwoStagePredictor {
    pub fn new(model: &SystemModel, config: TwoStageConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        Ok(Self {
            model: model.clone(),
            config,
            history: Vec::new(),
            reference: None,
            state: None,
            corrected: Vec::new(),
            flags: Vec::new(),
        })
    }

    /// Reruns the offline stage on everything seen so far and keeps the
    /// last state of its output.
    fn refresh(&mut self) {
        let i = self.history.len();
        let model = self.model.with_horizon(i);
        let y = Trajectory::from_columns(self.model.obs_dim(), &self.history);
        match sos_kalman_pipeline(&model, &y, self.config.eta, self.config.delta, &self.config.robust) {
            Ok(out) => self.reference = Some((i - 1, out.solution.x_hat.step(i - 1))),
            Err(e) => self.flags.push(format!("offline stage failed at step {}: {e}", i - 1)),
        }
    }

    /// Reference observation for step `i`: the stored reference state
    /// propagated through the dynamics.
    fn reference_obs(&self, i: usize) -> Option<Vect> {
        let (at, x) = self.reference.as_ref()?;
        let mut x = x.clone();
        for _ in *at..i {
            x = &self.model.a * x;
        }
        Some(&self.model.b * x)
    }

    pub fn feed(&mut self, y: &Vect) -> Result<Vect> {
        if y.len() != self.model.obs_dim() {
            return Err(RlqeError::DimensionMismatch("observation dimension".into()));
        }
        self.history.push(y.clone());
        let i = self.history.len() - 1;
        let n = self.history.len();
        if n >= self.config.warmup.max(1) && (self.reference.is_none() || n % self.config.refresh_every == 0) {
            self.refresh();
        }
        let (obs, fired) = match self.reference_obs(i) {
            Some(y_ref) => {
                let (c, f) = correct_observations(std::slice::from_ref(y), std::slice::from_ref(&y_ref), self.config.r)?;
                (c.into_iter().next().expect("one"), f[0])
            }
            None => (y.clone(), false),
        };
        self.corrected.push(fired);
        let st = match &self.state {
            None => first_step(Some(&obs), &self.model),
            Some(prev) => filter_step(prev, Some(&obs), &self.model),
        };
        let pred = &self.model.a * &st.x_post;
        self.state = Some(st);
        Ok(pred)
    }

    pub fn corrected(&self) -> &[bool] {
        &self.corrected
    }

    pub fn flags(&self) -> &[String] {
        &self.flags
    }
}

/// Output of a full pass of the predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageRun {
    /// `x_{i+1|i}` in column `i`.
    pub predictions: Trajectory,
    /// `x_{i|i}` in column `i`.
    pub posteriors: Trajectory,
    pub corrected: Vec<bool>,
    pub flags: Vec<String>,
}

/// Feeds a whole sequence through a fresh predictor.
pub fn predict_all(model: &SystemModel, y: &Trajectory, config: &TwoStageConfig) -> Result<TwoStageRun> {
    let mut p = TwoStagePredictor::new(model, config.clone())?;
    let mut preds = Vec::with_capacity(y.len());
    let mut posts = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        preds.push(p.feed(&y.step(i))?);
        posts.push(p.state.as_ref().expect("fed").x_post.clone());
    }
    let d = model.state_dim();
    Ok(TwoStageRun {
        predictions: Trajectory::from_columns(d, &preds),
        posteriors: Trajectory::from_columns(d, &posts),
        corrected: p.corrected,
        flags: p.flags,
    })
}

/// Bound on the posterior gap `||x''_{i|i} - x_{i|i}||` against the filter
/// fed clean observations, for `i >= start`:
///
/// `lambda (delta^{i-start+1} g + sum_{start <= s <= i} delta^{i-s} ||K_s|| e (1 - a*_s))`
///
/// with `g` the gap at `start - 1` (ignored when `start = 0`) and `e` a cap
/// on `||y''_s - y*_s||` at corrupted steps. With the reference within `r`
/// of the clean observations, `e = 2 r` is guaranteed. Entries before
/// `start` are NaN; multiply by `||A||` for one-step predictions.
pub fn pathwise_bound(stab: &StabilityConstants, a_star: &[bool], e: f64, start: usize, gap: f64) -> Vec<f64> {
    let mut acc = if start == 0 { 0.0 } else { gap };
    a_star
        .iter()
        .enumerate()
        .map(|(s, &clean)| {
            if s < start {
                return f64::NAN;
            }
            acc *= stab.delta_stab;
            if !clean {
                acc += stab.gain_norms[s] * e;
            }
            stab.lambda * acc
        })
        .collect()
}

/// Time-averaged excess allowed by the pathwise bound:
/// `||A|| K_bound lambda r (eta + 3 sqrt(eta / T)) / (1 - delta_stab)`.
pub fn mean_excess_bound(model: &SystemModel, stab: &StabilityConstants, r: f64, eta: f64, horizon: usize) -> f64 {
    let t = horizon.max(1) as f64;
    op_norm(&model.a) * stab.k_bound * stab.lambda * r * (eta + 3.0 * (eta / t).sqrt()) / (1.0 - stab.delta_stab)
}

/// `x''_{i+1|i}` from `y_0 ..= y_i` with a fresh predictor.
pub fn predict_next(history: &[Vect], model: &SystemModel, config: &TwoStageConfig) -> Result<Vect> {
    if history.is_empty() {
        return Err(RlqeError::InvalidInput("empty history".into()));
    }
    let mut p = TwoStagePredictor::new(model, config.clone())?;
    let mut last = None;
    for y in history {
        last = Some(p.feed(y)?);
    }
    Ok(last.expect("nonempty"))
}

/// Stability constants sized for a run of `horizon` steps.
pub fn predictor_stability(model: &SystemModel, horizon: usize) -> Result<StabilityConstants> {
    stability_constants(model, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::{filter_predictions, run_filter};
    use crate::lds::{apply_corruptions, simulate, AdversaryStrategy};
    use crate::linalg::Trajectory;
    use crate::robust::confidence_band;
    use crate::testbeds;

    fn cfg(r: f64) -> TwoStageConfig {
        TwoStageConfig {
            r,
            refresh_every: 16,
            warmup: 32,
            eta: 0.1,
            delta: 0.05,
            robust: RobustConfig::default(),
        }
    }

    #[test]
    fn correction_cases() {
        let y = vec![Vect::from_element(1, 1.0), Vect::from_element(1, 5.0)];
        let (same, fired) = correct_observations(&y, &y, 0.5).unwrap();
        assert_eq!(same, y);
        assert_eq!(fired, vec![false, false]);
        let refs = vec![Vect::from_element(1, 1.0), Vect::from_element(1, 4.0)];
        assert_eq!(correct_observations(&y, &refs, 1e18).unwrap().0, y);
        let (c, fired) = correct_observations(&y, &refs, 0.5).unwrap();
        assert_eq!(c[1], refs[1]);
        assert_eq!(fired, vec![false, true]);
    }

    #[test]
    fn radius_clamp_and_scaling() {
        let model = testbeds::scalar_random_walk(64);
        let prof = crate::obs::estimate_constants(&model.a, &model.b, 1, 256).unwrap();
        let mut band = confidence_band(&Trajectory::zeros(1, 64), &prof, &model, 0.05, 8, 4.0);
        band.radius = vec![0.0; 64];
        band.floor = 0.0;
        assert_eq!(choose_radius(&band, 1.0, 1.0, 2.0), MIN_RADIUS);
        band.radius = vec![3.0; 64];
        assert_eq!(choose_radius(&band, 2.0, 1.5, 2.0), 18.0);
    }

    #[test]
    fn causal() {
        let model = testbeds::scalar_random_walk(40);
        let ep = simulate(&model, 3).unwrap();
        let a = predict_all(&model, &ep.y, &cfg(3.0)).unwrap().predictions;
        let mut y2 = ep.y.clone();
        for i in 25..40 {
            y2.set(i, &Vect::from_element(1, 1e6));
        }
        let b = predict_all(&model, &y2, &cfg(3.0)).unwrap().predictions;
        for i in 0..25 {
            assert_eq!(a.step(i), b.step(i));
        }
    }

    #[test]
    fn huge_radius_is_the_plain_filter() {
        let model = testbeds::scalar_random_walk(30);
        let ep = simulate(&model, 5).unwrap();
        let run = predict_all(&model, &ep.y, &cfg(1e18)).unwrap();
        assert!(run.corrected.iter().all(|f| !f));
        let p = run.predictions;
        let reference = filter_predictions(&model, &run_filter(&model, &ep.y, None).unwrap());
        assert!(p.max_step_distance(&reference) < 1e-12);
    }

    #[test]
    fn pathwise_bound_holds() {
        let model = testbeds::scalar_random_walk(128);
        let clean = simulate(&model, 2).unwrap();
        let ep = apply_corruptions(&clean, 0.1, &AdversaryStrategy::Spike { scale: 60.0 }, 2).unwrap();
        let r = 20.0;
        let run = predict_all(&model, &ep.y, &cfg(r)).unwrap();
        assert!(run.corrected.iter().any(|f| *f));
        // The bound presumes the reference stays within r of the clean
        // observations, so no clean step is ever replaced.
        assert!((0..128).all(|i| !(run.corrected[i] && ep.a_star[i])));
        let states = run_filter(&model, &ep.y_star, None).unwrap();
        let stab = predictor_stability(&model, 128).unwrap();
        let start = 32;
        let gap = (run.posteriors.step(start - 1) - &states[start - 1].x_post).norm();
        let bound = pathwise_bound(&stab, &ep.a_star, 2.0 * r, start, gap);
        assert!(bound[..start].iter().all(|b| b.is_nan()));
        for i in start..128 {
            let gap = (run.posteriors.step(i) - &states[i].x_post).norm();
            assert!(gap <= bound[i] + 1e-8, "step {i}: {gap} > {}", bound[i]);
        }
    }
}
