//! Oracle baselines: the causal Kalman filter, the masked smoother in
//! information form, the clean posterior objective and filter stability
//! constants.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RlqeError};
use crate::lds::{EpisodeData, SystemModel};
use crate::linalg::{op_norm, spectral_radius, BlockTridiagonal, Mat, Trajectory, Vect};

/// Filter quantities at one time step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    /// `x_{t|t-1}`
    pub x_pred: Vect,
    pub p_pred: Mat,
    /// `x_{t|t}`
    pub x_post: Vect,
    pub p_post: Mat,
    pub gain: Mat,
    /// Innovation covariance.
    pub s: Mat,
}

fn symmetrize(m: Mat) -> Mat {
    (&m + m.transpose()) * 0.5
}

fn measurement_update(x_pred: Vect, p_pred: Mat, y: Option<&Vect>, model: &SystemModel) -> FilterState {
    let d = model.state_dim();
    let m = model.obs_dim();
    let b = &model.b;
    let s = symmetrize(b * &p_pred * b.transpose() + Mat::identity(m, m) * model.tau2);
    let Some(y) = y else {
        return FilterState {
            x_post: x_pred.clone(),
            p_post: p_pred.clone(),
            x_pred,
            p_pred,
            gain: Mat::zeros(d, m),
            s,
        };
    };
    let chol = s.clone().cholesky().expect("innovation covariance is at least tau2 * I");
    let gain = chol.solve(&(b * &p_pred)).transpose();
    let innovation = y - b * &x_pred;
    let x_post = &x_pred + &gain * innovation;
    // Joseph form keeps the covariance symmetric PSD.
    let ikb = Mat::identity(d, d) - &gain * b;
    let p_post = symmetrize(&ikb * &p_pred * ikb.transpose() + &gain * gain.transpose() * model.tau2);
    FilterState {
        x_pred,
        p_pred,
        x_post,
        p_post,
        gain,
        s,
    }
}

/// First step: the prior `N(0, R^2 I)` is the a-priori estimate.
pub fn first_step(y0: Option<&Vect>, model: &SystemModel) -> FilterState {
    let d = model.state_dim();
    measurement_update(Vect::zeros(d), Mat::identity(d, d) * model.r2, y0, model)
}

/// Time update from the previous posterior followed by a measurement
/// update. A missing observation leaves the posterior at the prediction.
pub fn filter_step(prev: &FilterState, y: Option<&Vect>, model: &SystemModel) -> FilterState {
    let d = model.state_dim();
    let x_pred = &model.a * &prev.x_post;
    let p_pred = symmetrize(&model.a * &prev.p_post * model.a.transpose() + Mat::identity(d, d) * model.sigma2);
    measurement_update(x_pred, p_pred, y, model)
}

/// Causal filter over a whole sequence; `mask[i] = false` drops step `i`.
pub fn run_filter(model: &SystemModel, y: &Trajectory, mask: Option<&[bool]>) -> Result<Vec<FilterState>> {
    check_obs(model, y, mask)?;
    let mut out: Vec<FilterState> = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let keep = mask.is_none_or(|m| m[i]);
        let yi = y.step(i);
        let obs = keep.then_some(&yi);
        let st = match out.last() {
            None => first_step(obs, model),
            Some(prev) => filter_step(prev, obs, model),
        };
        out.push(st);
    }
    Ok(out)
}

/// One-step-ahead predictions `x_{i+1|i} = A x_{i|i}`.
pub fn filter_predictions(model: &SystemModel, states: &[FilterState]) -> Trajectory {
    let cols: Vec<Vect> = states.iter().map(|s| &model.a * &s.x_post).collect();
    Trajectory::from_columns(model.state_dim(), &cols)
}

fn check_obs(model: &SystemModel, y: &Trajectory, mask: Option<&[bool]>) -> Result<()> {
    if !y.is_empty() && y.dim() != model.obs_dim() {
        return Err(RlqeError::DimensionMismatch(format!(
            "observations have dimension {} but B has {} rows",
            y.dim(),
            model.obs_dim()
        )));
    }
    if let Some(m) = mask {
        if m.len() != y.len() {
            return Err(RlqeError::DimensionMismatch("mask length differs from horizon".into()));
        }
    }
    Ok(())
}

/// Smoothed trajectory and the attained objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmootherOutput {
    pub x_hat: Trajectory,
    /// Column 0 unused (zero); `w_hat[i] = x_hat[i] - A x_hat[i-1]`.
    pub w_hat: Trajectory,
    pub objective: f64,
}

/// Quadratic pull `sum_i c_i ||x_i - target_i||^2` added to the smoother.
#[derive(Debug, Clone)]
pub struct Anchors {
    pub weights: Vec<f64>,
    pub targets: Trajectory,
}

/// Clean posterior objective with per-step fit weights:
/// `(1/T) (sum_i c_i ||B x_i - y_i||^2 / tau2 + sum_{i>=1} ||x_i - A x_{i-1}||^2 / sigma2 + ||x_0||^2 / R2)`.
pub fn weighted_objective(model: &SystemModel, x: &Trajectory, y: &Trajectory, weights: &[f64]) -> f64 {
    let t_len = x.len();
    if t_len == 0 {
        return 0.0;
    }
    let mut total = x.step(0).norm_squared() / model.r2;
    for i in 0..t_len {
        let xi = x.step(i);
        if weights[i] != 0.0 {
            total += weights[i] * (&model.b * &xi - y.step(i)).norm_squared() / model.tau2;
        }
        if i > 0 {
            total += (&xi - &model.a * x.step(i - 1)).norm_squared() / model.sigma2;
        }
    }
    total / t_len as f64
}

pub fn mask_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
}

/// Exact minimizer of the clean objective restricted to `mask`.
pub fn smoother(model: &SystemModel, y: &Trajectory, mask: &[bool]) -> Result<SmootherOutput> {
    weighted_smoother(model, y, &mask_weights(mask), None)
}

/// Minimizer of the weighted objective plus optional anchor penalties,
/// solved as one block-tridiagonal SPD system. The reported objective
/// excludes the anchor term.
pub fn weighted_smoother(model: &SystemModel, y: &Trajectory, weights: &[f64], anchors: Option<&Anchors>) -> Result<SmootherOutput> {
    check_obs(model, y, None)?;
    let t_len = y.len();
    if weights.len() != t_len {
        return Err(RlqeError::DimensionMismatch("weights length differs from horizon".into()));
    }
    if let Some(an) = anchors {
        if an.weights.len() != t_len || an.targets.len() != t_len {
            return Err(RlqeError::DimensionMismatch("anchor length differs from horizon".into()));
        }
    }
    let d = model.state_dim();
    if t_len == 0 {
        return Ok(SmootherOutput {
            x_hat: Trajectory::zeros(d, 0),
            w_hat: Trajectory::zeros(d, 0),
            objective: 0.0,
        });
    }
    let eye = Mat::identity(d, d);
    let btb = model.b.transpose() * &model.b / model.tau2;
    let ata = model.a.transpose() * &model.a / model.sigma2;
    let off = -&model.a / model.sigma2;
    let mut diag = Vec::with_capacity(t_len);
    let mut lower = Vec::with_capacity(t_len);
    let mut rhs = Vec::with_capacity(t_len);
    for i in 0..t_len {
        let mut di = &btb * weights[i];
        let mut gi = model.b.transpose() * y.step(i) * (weights[i] / model.tau2);
        if i == 0 {
            di += &eye / model.r2;
        } else {
            di += &eye / model.sigma2;
        }
        if i + 1 < t_len {
            di += &ata;
        }
        if let Some(an) = anchors {
            let c = an.weights[i];
            if c != 0.0 {
                di += &eye * c;
                gi += an.targets.step(i) * c;
            }
        }
        diag.push(di);
        lower.push(if i == 0 { Mat::zeros(d, d) } else { off.clone() });
        rhs.push(gi);
    }
    let xs = BlockTridiagonal { diag, lower }.solve(&rhs)?;
    let x_hat = Trajectory::from_columns(d, &xs);
    let w_hat = process_noise(model, &x_hat);
    let objective = weighted_objective(model, &x_hat, y, weights);
    Ok(SmootherOutput {
        x_hat,
        w_hat,
        objective,
    })
}

/// `w_i = x_i - A x_{i-1}`, column 0 left at zero.
pub fn process_noise(model: &SystemModel, x: &Trajectory) -> Trajectory {
    let mut w = Trajectory::zeros(x.dim(), x.len());
    for i in 1..x.len() {
        w.set(i, &(x.step(i) - &model.a * x.step(i - 1)));
    }
    w
}

/// Clean posterior negative log-likelihood scored against the true mask.
pub fn clean_nll(x_hat: &Trajectory, episode: &EpisodeData) -> Result<f64> {
    if x_hat.len() != episode.horizon() || (x_hat.len() > 0 && x_hat.dim() != episode.model.state_dim()) {
        return Err(RlqeError::DimensionMismatch("trajectory does not match the episode".into()));
    }
    Ok(weighted_objective(&episode.model, x_hat, &episode.y, &mask_weights(&episode.a_star)))
}

/// `OPT`: the objective of the smoother that knows the true mask.
pub fn opt_value(episode: &EpisodeData) -> Result<f64> {
    Ok(smoother(&episode.model, &episode.y, &episode.a_star)?.objective)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub nll: f64,
    pub opt: f64,
    pub excess: f64,
    /// `||x_hat[l t] - x_star[l t]||^2` for each window start.
    pub per_window_state_err: Vec<f64>,
}

pub fn risk_report(x_hat: &Trajectory, episode: &EpisodeData, window: usize) -> Result<RiskReport> {
    let nll = clean_nll(x_hat, episode)?;
    let opt = opt_value(episode)?;
    let per_window_state_err = (0..episode.horizon())
        .step_by(window.max(1))
        .map(|i| (x_hat.step(i) - episode.x_star.step(i)).norm_squared())
        .collect();
    Ok(RiskReport {
        nll,
        opt,
        excess: nll - opt,
        per_window_state_err,
    })
}

/// Empirical exponential-stability constants of the filter error dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    pub lambda: f64,
    pub delta_stab: f64,
    pub k_bound: f64,
    /// Gain norms `||K_t||` for `t < horizon`.
    pub gain_norms: Vec<f64>,
    #[serde(with = "crate::linalg::mat_serde")]
    pub steady_gain: Mat,
    #[serde(with = "crate::linalg::mat_serde")]
    pub steady_p_post: Mat,
    pub converged_after: usize,
}

pub const RICCATI_TOL: f64 = 1e-12;
pub const RICCATI_MAX_STEPS: usize = 100_000;

/// Gain sequence of the fully observed filter from the prior, until the
/// posterior covariance settles (or the step cap).
fn gain_sequence(model: &SystemModel, min_len: usize) -> (Vec<Mat>, Mat, usize) {
    let mut st = first_step(Some(&Vect::zeros(model.obs_dim())), model);
    let mut gains = vec![st.gain.clone()];
    let mut converged = None;
    let dummy = Vect::zeros(model.obs_dim());
    for step in 1..RICCATI_MAX_STEPS.max(min_len) {
        let next = filter_step(&st, Some(&dummy), model);
        let change = (&next.p_post - &st.p_post).abs().max();
        gains.push(next.gain.clone());
        st = next;
        if converged.is_none() && change <= RICCATI_TOL {
            converged = Some(step);
        }
        if converged.is_some() && gains.len() >= min_len {
            break;
        }
    }
    (gains, st.p_post, converged.unwrap_or(RICCATI_MAX_STEPS))
}

/// `(lambda, delta_stab, K_bound)` for runs of length `horizon`.
pub fn stability_constants(model: &SystemModel, horizon: usize) -> Result<StabilityConstants> {
    model.validate()?;
    let d = model.state_dim();
    let horizon = horizon.max(1);
    let (gains, p_post, converged_after) = gain_sequence(model, horizon);
    let eye = Mat::identity(d, d);
    let steady_gain = gains.last().expect("nonempty").clone();
    let f_inf = (&eye - &steady_gain * &model.b) * &model.a;
    let sr = spectral_radius(&f_inf);
    if sr >= 1.0 {
        return Err(RlqeError::FilterUnstable(sr));
    }
    let delta_stab = if op_norm(&f_inf) < 1e-14 { 0.0 } else { sr + 1e-3 * (1.0 - sr) };
    let closed: Vec<Mat> = gains[..horizon].iter().map(|k| (&eye - k * &model.b) * &model.a).collect();

    // Transition Phi(t, s) = F_t ... F_{s+1}; track the worst ratio to delta^{t-s}.
    let mut lambda: f64 = 1.0;
    let ln_delta = delta_stab.ln();
    for s in 0..horizon {
        let mut phi = eye.clone();
        for (gap, f) in closed.iter().enumerate().take(horizon).skip(s + 1) {
            phi = f * &phi;
            let n = op_norm(&phi);
            if n <= 1e-300 {
                break;
            }
            let steps = (gap - s) as f64;
            let ratio = if delta_stab == 0.0 { f64::INFINITY } else { (n.ln() - steps * ln_delta).exp() };
            lambda = lambda.max(ratio);
        }
    }
    let gain_norms: Vec<f64> = gains[..horizon].iter().map(op_norm).collect();
    let k_bound = gains.iter().map(op_norm).fold(0.0, f64::max);
    Ok(StabilityConstants {
        lambda,
        delta_stab,
        k_bound,
        gain_norms,
        steady_gain,
        steady_p_post: p_post,
        converged_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::{apply_corruptions, simulate, AdversaryStrategy};
    use approx::assert_relative_eq;

    const GOLDEN: f64 = 0.618_033_988_749_894_8;

    fn golden_fixed_point() -> f64 {
        // p <- (p + 1) / (p + 2) iterated from the prior variance.
        let mut p = 1.0 / 2.0;
        for _ in 0..200 {
            p = (p + 1.0) / (p + 2.0);
        }
        p
    }

    #[test]
    fn blind_sensor_leaves_prediction_untouched() {
        let model = SystemModel::new(Mat::from_element(1, 1, 0.9), Mat::zeros(1, 1), 1.0, 1.0, 2.0, 5).unwrap();
        let st = first_step(Some(&Vect::from_element(1, 3.0)), &model);
        let st = filter_step(&st, Some(&Vect::from_element(1, -4.0)), &model);
        assert_eq!(st.x_post, st.x_pred);
        assert_relative_eq!(st.p_post, st.p_pred, epsilon = 1e-15);
    }

    #[test]
    fn scalar_riccati_reaches_golden_ratio() {
        let model = SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 1.0, 10).unwrap();
        let st = stability_constants(&model, 64).unwrap();
        let oracle = golden_fixed_point();
        assert!((oracle - GOLDEN).abs() < 1e-12);
        assert!((st.steady_p_post[(0, 0)] - oracle).abs() < 1e-10);
        assert!((st.steady_gain[(0, 0)] - oracle).abs() < 1e-10);
        assert!((st.delta_stab - (1.0 - oracle)).abs() < 1e-3);
        assert!((st.k_bound - oracle).abs() < 1e-6);
    }

    #[test]
    fn memoryless_dynamics_forget_in_one_step() {
        let model = SystemModel::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 10).unwrap();
        assert_eq!(stability_constants(&model, 32).unwrap().delta_stab, 0.0);
    }

    #[test]
    fn precise_sensor_fits_observation() {
        let model = SystemModel::scalar(1.0, 1.0, 1.0, 1e-12, 1.0, 10).unwrap();
        let st = first_step(Some(&Vect::from_element(1, 2.5)), &model);
        assert!((st.x_post[0] - 2.5).abs() < 1e-5);
        assert!((st.gain[(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_gives_prior_mean() {
        let model = SystemModel::scalar(0.8, 1.0, 1.0, 1.0, 1.0, 20).unwrap();
        let ep = simulate(&model, 2).unwrap();
        let out = smoother(&model, &ep.y, &[false; 20]).unwrap();
        assert!(out.x_hat.as_matrix().amax() < 1e-14);
        assert!(out.objective.abs() < 1e-14);
    }

    #[test]
    fn single_step_closed_form() {
        let (r2, tau2) = (2.0, 0.5);
        let model = SystemModel::scalar(1.0, 1.0, 1.0, tau2, r2, 1).unwrap();
        let y = Trajectory::from_columns(1, &[Vect::from_element(1, 3.0)]);
        let out = smoother(&model, &y, &[true]).unwrap();
        let x = 3.0 * r2 / (r2 + tau2);
        assert!((out.x_hat.step(0)[0] - x).abs() < 1e-12);
        let obj = (x - 3.0f64).powi(2) / tau2 + x * x / r2;
        assert!((out.objective - obj).abs() < 1e-12);
    }

    #[test]
    fn smoother_matches_dense_normal_equations() {
        let model = SystemModel::scalar(0.7, 1.3, 0.4, 0.9, 1.5, 5).unwrap();
        let ep = simulate(&model, 17).unwrap();
        let mask = [true, false, true, true, false];
        let out = smoother(&model, &ep.y, &mask).unwrap();
        // Dense least squares: stack residuals r = M x - c with weights.
        let (a, b) = (0.7, 1.3);
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut e = vec![0.0; 5];
        e[0] = 1.0 / model.r2.sqrt();
        rows.push((e, 0.0));
        for i in 1..5 {
            let mut r = vec![0.0; 5];
            r[i] = 1.0 / model.sigma2.sqrt();
            r[i - 1] = -a / model.sigma2.sqrt();
            rows.push((r, 0.0));
        }
        for (i, keep) in mask.iter().enumerate() {
            if *keep {
                let mut r = vec![0.0; 5];
                r[i] = b / model.tau2.sqrt();
                rows.push((r, ep.y.step(i)[0] / model.tau2.sqrt()));
            }
        }
        let m = Mat::from_fn(rows.len(), 5, |r, c| rows[r].0[c]);
        let c = Vect::from_fn(rows.len(), |r, _| rows[r].1);
        let x = (m.transpose() * &m).cholesky().unwrap().solve(&(m.transpose() * c));
        for i in 0..5 {
            assert!((out.x_hat.step(i)[0] - x[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn smoother_end_matches_filter() {
        let a = Mat::from_row_slice(2, 2, &[0.95, 0.2, -0.1, 0.9]);
        let b = Mat::from_row_slice(1, 2, &[1.0, 0.3]);
        let model = SystemModel::new(a, b, 0.5, 0.8, 3.0, 60).unwrap();
        let ep = simulate(&model, 5).unwrap();
        let sm = smoother(&model, &ep.y, &[true; 60]).unwrap();
        let fl = run_filter(&model, &ep.y, None).unwrap();
        assert!((sm.x_hat.step(59) - &fl[59].x_post).norm() < 1e-8);
    }

    #[test]
    fn oracle_attains_opt_and_dynamics_hold() {
        let model = SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 1.0, 80).unwrap();
        let ep = apply_corruptions(&simulate(&model, 1).unwrap(), 0.2, &AdversaryStrategy::Spike { scale: 20.0 }, 2).unwrap();
        let out = smoother(&model, &ep.y, &ep.a_star).unwrap();
        assert!((clean_nll(&out.x_hat, &ep).unwrap() - out.objective).abs() < 1e-9);
        for i in 1..80 {
            let lhs = out.x_hat.step(i);
            let rhs = &model.a * out.x_hat.step(i - 1) + out.w_hat.step(i);
            assert!((lhs - rhs).norm() < 1e-12);
        }
        let naive = smoother(&model, &ep.y, &[true; 80]).unwrap();
        assert!(clean_nll(&naive.x_hat, &ep).unwrap() >= out.objective - 1e-8);
    }

    #[test]
    fn curvature_is_quadratic() {
        let model = SystemModel::scalar(0.9, 1.0, 1.0, 1.0, 1.0, 30).unwrap();
        let ep = simulate(&model, 8).unwrap();
        let out = smoother(&model, &ep.y, &ep.a_star).unwrap();
        let mut pts = Vec::new();
        for k in 0..6 {
            let eps = 1e-1 / 2f64.powi(k);
            let mut x = out.x_hat.clone();
            let mut v = x.step(10);
            v[0] += eps;
            x.set(10, &v);
            pts.push((eps.ln(), (clean_nll(&x, &ep).unwrap() - out.objective).ln()));
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((1.9..=2.1).contains(&slope), "slope {slope}");
    }
}
