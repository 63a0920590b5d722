//! Robust offline smoothing: constraint programs, solver backends,
//! confidence bands and the two-stage pipeline.

mod alternating;
mod band;
pub mod calibrate;
mod config;
pub mod diagnostics;
mod moment;
mod oracle;
mod pipeline;
mod program;
pub mod sdp;

pub use alternating::solve_alternating;
pub use band::{confidence_band, noise_energy, ConfidenceBand};
pub use config::{AlternatingConfig, Backend, MomentConfig, ProgramConstants, ProgramOptions, RobustConfig};
pub use moment::{solve_moment_relaxation, RelaxedMoments};
pub use oracle::{brute_force_oracle, brute_force_program, OracleSolution, BRUTE_FORCE_MAX_HORIZON};
pub use pipeline::{delta1_schedule, solve, sos_kalman_pipeline, stage_one, PipelineOutput, StageOne};
pub use program::{
    build_program, check_feasibility, default_k, required_c14, required_constants, true_window_indicators, window_requirements,
    Candidate, Constraint, ConstraintKind, ConstraintStatus, FeasibilityReport, ProgramParams, ProgramSpec, Rhs, Stage2Inputs,
    FEAS_REL_TOL,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kalman::{weighted_smoother, Anchors, SmootherOutput};
use crate::linalg::Trajectory;

/// Output of any robust backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmootherSolution {
    pub x_hat: Trajectory,
    /// Column 0 unused; `x_hat[i] = A x_hat[i-1] + w_hat[i]`.
    pub w_hat: Trajectory,
    /// `y_i - B x_hat[i]` on accepted steps, zero elsewhere.
    pub v_hat: Trajectory,
    /// Clean-step indicators in `[0, 1]`.
    pub a_hat: Vec<f64>,
    pub b_hat: Option<Vec<f64>>,
    pub objective: f64,
    /// Certified lower bound on the program optimum, when the backend has one.
    pub lower_bound: Option<f64>,
    pub feasibility: FeasibilityReport,
    pub backend: Backend,
    pub rounds: usize,
    pub converged: bool,
    pub flags: Vec<String>,
    /// First moments from the relaxation backend.
    pub relaxed: Option<RelaxedMoments>,
}

impl SmootherSolution {
    /// Indicators rounded at 1/2.
    pub fn rounded_mask(&self) -> Vec<bool> {
        self.a_hat.iter().map(|&a| a >= 0.5).collect()
    }
}

/// Masked quadratic of the program, exactly: the weighted smoother with the
/// prior switched off when the program omits it.
pub(crate) fn solve_weighted(spec: &ProgramSpec, weights: &[f64], anchors: Option<&Anchors>) -> Result<SmootherOutput> {
    if spec.version == 2 && !spec.options.include_prior_term {
        let mut model = spec.model.clone();
        model.r2 *= 1e12;
        let mut out = weighted_smoother(&model, &spec.y, weights, anchors)?;
        out.objective = spec.objective(&out.x_hat, weights);
        Ok(out)
    } else {
        weighted_smoother(&spec.model, &spec.y, weights, anchors)
    }
}

/// Packages a trajectory and indicators with their feasibility report.
pub(crate) fn package(
    spec: &ProgramSpec,
    x: Trajectory,
    a: Vec<f64>,
    b: Option<Vec<f64>>,
    backend: Backend,
) -> Result<SmootherSolution> {
    let objective = spec.objective(&x, &a);
    let cand = Candidate::from_trajectory(spec, x, a, b);
    let feasibility = check_feasibility(&cand, spec)?;
    Ok(SmootherSolution {
        x_hat: cand.x,
        w_hat: cand.w,
        v_hat: cand.v,
        a_hat: cand.a,
        b_hat: cand.b,
        objective,
        lower_bound: None,
        feasibility,
        backend,
        rounds: 0,
        converged: true,
        flags: Vec::new(),
        relaxed: None,
    })
}

/// Combinatorial part of a program (cardinality, window subsampling and,
/// for the second program, the window-failure budgets) for 0/1 indicators.
pub(crate) fn core_admissible(spec: &ProgramSpec, a: &[f64], b: Option<&[f64]>) -> bool {
    let tol = 1e-9;
    if a.iter().sum::<f64>() < spec.scalar_rhs(4) - tol * spec.horizon() as f64 {
        return false;
    }
    let window_ok = |l: usize| spec.window_slack(l, a) >= -FEAS_REL_TOL * spec.gram_t.0.amax().max(1.0);
    match (spec.version, b) {
        (1, _) => (0..spec.n_windows).all(window_ok),
        (_, Some(b)) => {
            if b.iter().sum::<f64>() < spec.scalar_rhs(7) - tol {
                return false;
            }
            let bad: f64 = (0..spec.horizon()).map(|i| (1.0 - b[spec.window_of(i)]) * (1.0 - a[i])).sum();
            if bad > spec.scalar_rhs(8) * spec.horizon() as f64 + tol {
                return false;
            }
            (0..spec.n_windows).all(|l| b[l] == 0.0 || window_ok(l))
        }
        _ => false,
    }
}

/// Cheapest window indicators for a mask: exactly the failing windows are
/// switched off. `None` when no indicator choice admits the mask.
pub(crate) fn minimal_indicators(spec: &ProgramSpec, a: &[f64]) -> Option<Vec<f64>> {
    let b = true_window_indicators(spec, a);
    core_admissible(spec, a, Some(&b)).then_some(b)
}
