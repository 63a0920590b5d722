//! Two-stage robust smoother: a log-T window program seeds a band, then a
//! log-log-T window program is solved inside it.

use serde::{Deserialize, Serialize};

use super::band::{confidence_band, ConfidenceBand};
use super::config::{Backend, RobustConfig};
use super::program::{build_program, ProgramParams, ProgramSpec, Stage2Inputs};
use super::{brute_force_program, solve_alternating, solve_moment_relaxation, SmootherSolution};
use crate::error::{Result, RlqeError};
use crate::lds::SystemModel;
use crate::linalg::Trajectory;
use crate::obs::{estimate_constants, window_size, window_size_unchecked, ObservabilityProfile, WindowStage};

/// Runs the backend selected in `cfg`.
pub fn solve(spec: &ProgramSpec, cfg: &RobustConfig) -> Result<SmootherSolution> {
    match cfg.backend {
        Backend::Alternating => solve_alternating(spec, &cfg.alternating),
        Backend::Moment => solve_moment_relaxation(spec, &cfg.moment),
        Backend::BruteForce => brute_force_program(spec),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub solution: SmootherSolution,
    pub stage1: SmootherSolution,
    pub band: ConfidenceBand,
    pub profile: ObservabilityProfile,
    pub t_pre: usize,
    /// Second-stage window; equals `t_pre` when only stage 1 ran.
    pub t: usize,
    pub delta1: f64,
    pub stage1_only: bool,
    pub flags: Vec<String>,
}

/// Largest multiple of `s` not above `horizon`.
fn clamp_window(s: usize, horizon: usize) -> Result<usize> {
    let t = horizon - horizon % s;
    if t == 0 {
        return Err(RlqeError::HorizonTooShort {
            window: s,
            horizon,
            min_horizon: s,
        });
    }
    Ok(t)
}

/// `delta1 = c_delta log(1/delta) / log^3 T`, clamped to
/// `[(t / (eta T)) log(1/delta), 1/2]` where `t` is the second-stage window
/// at the unclamped value. Returns `(delta1, t)` with `t` recomputed at the
/// clamped value.
pub fn delta1_schedule(
    profile: &ObservabilityProfile,
    d: usize,
    horizon: usize,
    eta: f64,
    delta: f64,
    c_delta: f64,
    c_win: f64,
) -> (f64, u64) {
    let log_inv = (1.0 / delta).ln();
    let t_of = |delta1: f64| window_size_unchecked(profile, d, horizon, delta, WindowStage::LogLogT { delta1 }, c_win);
    let delta1 = if eta <= 0.0 {
        0.5
    } else {
        let raw = c_delta * log_inv / (horizon as f64).ln().powi(3);
        let raw = if raw.is_finite() && raw > 0.0 { raw } else { 0.5 };
        let floor = t_of(raw.min(0.5)) as f64 / (eta * horizon as f64) * log_inv;
        raw.max(floor).min(0.5)
    };
    (delta1, t_of(delta1))
}

/// First-stage output: the log-T window program, its solution and band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOne {
    pub solution: SmootherSolution,
    pub band: ConfidenceBand,
    pub profile: ObservabilityProfile,
    pub t_pre: usize,
    /// The log-T window did not fit in the horizon and was clamped.
    pub clamped: bool,
    pub flags: Vec<String>,
}

/// Profile, log-T window and first-stage solve with its band.
pub fn stage_one(model: &SystemModel, y: &Trajectory, eta: f64, delta: f64, cfg: &RobustConfig) -> Result<StageOne> {
    model.validate()?;
    let t_len = y.len();
    let d = model.state_dim();
    if t_len == 0 {
        return Err(RlqeError::InvalidInput("empty observation sequence".into()));
    }
    let s_max = cfg.s_max.unwrap_or(d);
    let profile = estimate_constants(&model.a, &model.b, s_max, 4 * t_len).map_err(|e| e.in_stage("profile"))?;
    let mut flags = Vec::new();
    if let Some(w) = &profile.warning {
        flags.push(w.clone());
    }
    let mut clamped = false;
    let t_pre = match window_size(&profile, d, t_len, delta, WindowStage::LogT, cfg.c_win) {
        Ok(t) => t,
        Err(RlqeError::HorizonTooShort { window, min_horizon, .. }) => {
            clamped = true;
            flags.push(format!("stage1_only: first-stage window {window} exceeds T = {t_len} (needs T >= {min_horizon})"));
            clamp_window(profile.s, t_len).map_err(|e| e.in_stage("stage 1"))?
        }
        Err(e) => return Err(e.in_stage("stage 1")),
    };
    let params = ProgramParams {
        eta,
        delta,
        t: t_pre,
        constants: cfg.program1,
        options: cfg.options,
        k: None,
        stage2: None,
    };
    let spec = build_program(1, model, y, &profile, &params).map_err(|e| e.in_stage("stage 1"))?;
    let solution = solve(&spec, cfg).map_err(|e| e.in_stage("stage 1"))?;
    flags.extend(solution.flags.iter().map(|f| format!("stage 1: {f}")));
    let band = confidence_band(&solution.x_hat, &profile, model, delta, t_pre, cfg.c_band);
    Ok(StageOne {
        solution,
        band,
        profile,
        t_pre,
        clamped,
        flags,
    })
}

/// Stage 1 on the log-T window, band extraction, then stage 2 on the
/// log-log-T window constrained to the band.
pub fn sos_kalman_pipeline(model: &SystemModel, y: &Trajectory, eta: f64, delta: f64, cfg: &RobustConfig) -> Result<PipelineOutput> {
    let StageOne {
        solution: stage1,
        band,
        profile,
        t_pre,
        clamped: stage1_only,
        mut flags,
    } = stage_one(model, y, eta, delta, cfg)?;
    let t_len = y.len();
    let d = model.state_dim();
    if stage1_only {
        return Ok(PipelineOutput {
            solution: stage1.clone(),
            stage1,
            band,
            profile,
            t_pre,
            t: t_pre,
            delta1: 0.5,
            stage1_only,
            flags,
        });
    }

    let (delta1, t_raw) = delta1_schedule(&profile, d, t_len, eta, delta, cfg.c_delta, cfg.c_win);
    let t = if t_raw > t_len as u64 {
        flags.push(format!("second-stage window {t_raw} clamped to T = {t_len}"));
        clamp_window(profile.s, t_len).map_err(|e| e.in_stage("stage 2"))?
    } else {
        t_raw as usize
    };
    let params2 = ProgramParams {
        eta,
        delta,
        t,
        constants: cfg.program2,
        options: cfg.options,
        k: None,
        stage2: Some(Stage2Inputs {
            delta1,
            x_prime: stage1.x_hat.clone(),
            eps_geo: band.eps_geo,
            band_window: t_pre,
        }),
    };
    let spec2 = build_program(2, model, y, &profile, &params2).map_err(|e| e.in_stage("stage 2"))?;
    let solution = solve(&spec2, cfg).map_err(|e| e.in_stage("stage 2"))?;
    flags.extend(solution.flags.iter().map(|f| format!("stage 2: {f}")));
    Ok(PipelineOutput {
        solution,
        stage1,
        band,
        profile,
        t_pre,
        t,
        delta1,
        stage1_only,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::smoother;
    use crate::lds::{apply_corruptions, simulate, AdversaryStrategy};
    use crate::testbeds;

    #[test]
    fn clean_pipeline_is_the_smoother() {
        for (name, model) in testbeds::builtin_suite(200) {
            let ep = simulate(&model, 9).unwrap();
            let out = sos_kalman_pipeline(&model, &ep.y, 0.0, 0.05, &RobustConfig::default()).unwrap();
            let reference = smoother(&model, &ep.y, &ep.a_star).unwrap();
            let scale = reference.x_hat.as_matrix().amax().max(1.0);
            assert!(
                out.solution.x_hat.max_step_distance(&reference.x_hat) <= 1e-6 * scale,
                "{name}: {:?}",
                out.flags
            );
        }
    }

    #[test]
    fn short_horizon_degrades_to_stage_one() {
        let model = testbeds::hard_subspace(12);
        let ep = simulate(&model, 1).unwrap();
        let out = sos_kalman_pipeline(&model, &ep.y, 0.1, 0.05, &RobustConfig::default()).unwrap();
        assert!(out.stage1_only);
        assert!(out.flags.iter().any(|f| f.starts_with("stage1_only")));
    }

    #[test]
    fn delta1_is_clamped() {
        let model = testbeds::scalar_random_walk(512);
        let prof = estimate_constants(&model.a, &model.b, 1, 2048).unwrap();
        let (d1, t) = delta1_schedule(&prof, 1, 512, 0.1, 0.05, 1.0, 4.0);
        assert!(d1 > 0.0 && d1 <= 0.5);
        assert!(t >= 1);
        assert_eq!(delta1_schedule(&prof, 1, 512, 0.0, 0.05, 1.0, 4.0).0, 0.5);
    }

    #[test]
    fn spikes_are_rejected() {
        let model = testbeds::scalar_random_walk(256);
        let clean = simulate(&model, 4).unwrap();
        let ep = apply_corruptions(&clean, 0.1, &AdversaryStrategy::Spike { scale: 16.0 }, 4).unwrap();
        let out = sos_kalman_pipeline(&model, &ep.y, 0.1, 0.05, &RobustConfig::default()).unwrap();
        let naive = smoother(&model, &ep.y, &vec![true; 256]).unwrap();
        let opt = crate::kalman::opt_value(&ep).unwrap();
        let robust = crate::kalman::clean_nll(&out.solution.x_hat, &ep).unwrap() - opt;
        let naive_excess = crate::kalman::clean_nll(&naive.x_hat, &ep).unwrap() - opt;
        assert!(robust < 0.1 * naive_excess, "{robust} vs {naive_excess}");
    }
}
