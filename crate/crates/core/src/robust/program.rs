//! The two constraint programs as explicit numeric systems, candidate
//! solutions and the feasibility checker.

use serde::{Deserialize, Serialize};

use super::config::{ProgramConstants, ProgramOptions};
use crate::error::{Result, RlqeError};
use crate::kalman::{process_noise, weighted_objective};
use crate::lds::{EpisodeData, SystemModel};
use crate::linalg::{max_eigenvalue, min_eigenvalue, Mat, SerMat, Trajectory, Vect};
use crate::obs::{gram_terms, ObservabilityProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Boolean,
    LinearEq,
    QuadraticBound,
    Cardinality,
    PsdWindow,
    Band,
    AvgNoise,
}

/// Numeric right-hand side of one constraint family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rhs {
    /// Equality against zero.
    Zero,
    Scalar(f64),
    PerIndex(Vec<f64>),
    PerWindow(Vec<SerMat>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub id: u8,
    pub kind: ConstraintKind,
    pub name: String,
    /// Matrix coefficient where one applies (`A` for dynamics, `B` for
    /// measurements).
    pub coefficients: Option<SerMat>,
    pub rhs: Rhs,
}

/// Second-stage inputs: the first-stage trajectory and its band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Inputs {
    pub delta1: f64,
    pub x_prime: Trajectory,
    pub eps_geo: f64,
    /// Window length of the first stage; the band term decays per such window.
    pub band_window: usize,
}

/// Parameters for [`build_program`].
#[derive(Debug, Clone)]
pub struct ProgramParams {
    pub eta: f64,
    pub delta: f64,
    pub t: usize,
    pub constants: ProgramConstants,
    pub options: ProgramOptions,
    /// Even Hoelder exponent; defaults to `max(2, 2 floor(log(1/eta)))`.
    pub k: Option<usize>,
    pub stage2: Option<Stage2Inputs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramSpec {
    pub version: u8,
    pub model: SystemModel,
    pub y: Trajectory,
    pub eta: f64,
    pub delta: f64,
    pub t: usize,
    pub n_windows: usize,
    pub k: usize,
    pub rho: f64,
    pub alpha: f64,
    pub b_norm: f64,
    pub constants: ProgramConstants,
    pub options: ProgramOptions,
    pub stage2: Option<Stage2Inputs>,
    /// `(A^j)^T B^T B A^j` for `j < t`.
    pub window_grams: Vec<SerMat>,
    pub gram_t: SerMat,
    pub constraints: Vec<Constraint>,
}

pub fn default_k(eta: f64) -> usize {
    if eta <= 0.0 {
        return 2;
    }
    let k = 2 * ((1.0 / eta).ln().floor().max(0.0) as usize);
    k.max(2)
}

impl ProgramSpec {
    pub fn horizon(&self) -> usize {
        self.y.len()
    }

    pub fn window_of(&self, i: usize) -> usize {
        i / self.t
    }

    /// Index range of window `l`.
    pub fn window_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = l * self.t;
        start..(start + self.t).min(self.horizon())
    }

    pub fn constraint(&self, id: u8) -> &Constraint {
        self.constraints.iter().find(|c| c.id == id).expect("constraint id present")
    }

    pub fn scalar_rhs(&self, id: u8) -> f64 {
        match &self.constraint(id).rhs {
            Rhs::Scalar(v) => *v,
            other => panic!("constraint {id} has non-scalar rhs {other:?}"),
        }
    }

    pub fn window_rhs(&self, id: u8) -> &[SerMat] {
        match &self.constraint(id).rhs {
            Rhs::PerWindow(v) => v,
            other => panic!("constraint {id} has no window rhs {other:?}"),
        }
    }

    /// Id of the per-window subsampling constraint.
    pub fn psd_id(&self) -> u8 {
        if self.version == 1 {
            7
        } else {
            14
        }
    }

    /// Largest number of steps a candidate may mark corrupted.
    pub fn drop_budget(&self) -> usize {
        let rhs = self.scalar_rhs(4);
        let need = (rhs - 1e-9).ceil().max(0.0) as usize;
        self.horizon().saturating_sub(need)
    }

    /// Largest number of windows the second program may mark as failing.
    pub fn window_failure_budget(&self) -> usize {
        if self.version == 1 {
            return 0;
        }
        let need = (self.scalar_rhs(7) - 1e-9).ceil().max(0.0) as usize;
        self.n_windows.saturating_sub(need)
    }

    /// Objective of the program for trajectory `x` and clean weights `a`.
    pub fn objective(&self, x: &Trajectory, a: &[f64]) -> f64 {
        let val = weighted_objective(&self.model, x, &self.y, a);
        if self.version == 2 && !self.options.include_prior_term {
            val - x.step(0).norm_squared() / self.model.r2 / self.horizon() as f64
        } else {
            val
        }
    }

    /// `sum_{j in window} (1 - a_j) G_j` for window `l`.
    pub fn window_dropped_gram(&self, l: usize, a: &[f64]) -> Mat {
        let d = self.model.state_dim();
        let mut acc = Mat::zeros(d, d);
        for (j, i) in self.window_range(l).enumerate() {
            let w = 1.0 - a[i];
            if w != 0.0 {
                acc += &self.window_grams[j].0 * w;
            }
        }
        acc
    }

    /// Smallest eigenvalue of `rhs_l - sum (1 - a_j) G_j`.
    pub fn window_slack(&self, l: usize, a: &[f64]) -> f64 {
        let rhs = &self.window_rhs(self.psd_id())[l].0;
        let m = rhs - self.window_dropped_gram(l, a);
        if m.nrows() == 1 {
            m[(0, 0)]
        } else {
            min_eigenvalue(&m)
        }
    }
}

fn window_bound(spec_t: usize, len: usize, eta: f64, gram_t: &Mat, extra: f64) -> Mat {
    let d = gram_t.nrows();
    let scale = len as f64 / spec_t as f64;
    (gram_t * eta + Mat::identity(d, d) * extra) * scale
}

/// Emits every numbered constraint with numeric right-hand sides.
pub fn build_program(
    version: u8,
    model: &SystemModel,
    y: &Trajectory,
    profile: &ObservabilityProfile,
    params: &ProgramParams,
) -> Result<ProgramSpec> {
    model.validate()?;
    let t_len = y.len();
    let (d, m) = (model.state_dim(), model.obs_dim());
    if t_len == 0 || y.dim() != m {
        return Err(RlqeError::DimensionMismatch("observations do not match the model".into()));
    }
    let ProgramParams {
        eta,
        delta,
        t,
        constants,
        options,
        k,
        stage2,
    } = params.clone();
    if !(0.0..0.5).contains(&eta) {
        return Err(RlqeError::BreakdownPoint(eta));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(RlqeError::InvalidInput(format!("delta must be in (0, 1), got {delta}")));
    }
    if t == 0 || t % profile.s != 0 {
        return Err(RlqeError::InvalidInput(format!("window {t} is not a multiple of s = {}", profile.s)));
    }
    if t > t_len {
        return Err(RlqeError::HorizonTooShort {
            window: t,
            horizon: t_len,
            min_horizon: t,
        });
    }
    let k = k.unwrap_or_else(|| default_k(eta));
    if k < 2 || k % 2 != 0 {
        return Err(RlqeError::InvalidInput(format!("Hoelder exponent must be even and >= 2, got {k}")));
    }
    let stage2 = match (version, stage2) {
        (1, _) => None,
        (2, Some(s)) => {
            if s.x_prime.len() != t_len || s.x_prime.dim() != d {
                return Err(RlqeError::DimensionMismatch("reference trajectory does not match".into()));
            }
            if !(s.delta1 > 0.0 && s.delta1 <= 0.5) || !s.eps_geo.is_finite() || s.band_window == 0 {
                return Err(RlqeError::InvalidInput("invalid second-stage parameters".into()));
            }
            Some(s)
        }
        (2, None) => return Err(RlqeError::InvalidInput("second program needs a reference trajectory".into())),
        (v, _) => return Err(RlqeError::InvalidInput(format!("unknown program version {v}"))),
    };

    let tf = t_len as f64;
    let (df, mf) = (d as f64, m as f64);
    let rho = profile.rho;
    let alpha = profile.alpha;
    let b_norm = profile.b_norm;
    let (sigma2, tau2, r2) = (model.sigma2, model.tau2, model.r2);
    let log_inv_delta = (1.0 / delta).ln();
    let grams = gram_terms(&model.a, &model.b, t);
    let gram_t = grams.iter().fold(Mat::zeros(d, d), |acc, g| acc + g);
    let n_windows = t_len.div_ceil(t);
    let window_lens: Vec<usize> = (0..n_windows).map(|l| t.min(t_len - l * t)).collect();
    let c = |id: u8| constants.get(id);

    let card = (1.0 - 1.01 * eta) * tf - c(4) * (eta * tf * log_inv_delta).sqrt();
    let mut cs = vec![
        Constraint {
            id: 1,
            kind: ConstraintKind::Boolean,
            name: "a_i^2 = a_i".into(),
            coefficients: None,
            rhs: Rhs::Zero,
        },
        Constraint {
            id: 2,
            kind: ConstraintKind::LinearEq,
            name: "x_i = A x_{i-1} + w_i".into(),
            coefficients: Some(SerMat(model.a.clone())),
            rhs: Rhs::Zero,
        },
        Constraint {
            id: 3,
            kind: ConstraintKind::LinearEq,
            name: if version == 2 && options.measurement_uses_previous_state {
                "a_i (y_i - B x_{i-1} - v_i) = 0".into()
            } else {
                "a_i (y_i - B x_i - v_i) = 0".into()
            },
            coefficients: Some(SerMat(model.b.clone())),
            rhs: Rhs::Zero,
        },
        Constraint {
            id: 4,
            kind: ConstraintKind::Cardinality,
            name: "sum_i a_i >= (1 - 1.01 eta) T - C4 sqrt(eta T log(1/delta))".into(),
            coefficients: None,
            rhs: Rhs::Scalar(card),
        },
    ];

    let x0_bound = r2 * (df + log_inv_delta * if version == 1 { c(8) } else { c(5) });
    if version == 1 {
        let log_t = (tf / delta).ln();
        let psd_extra = c(7) * rho * rho * b_norm * b_norm * (t as f64 * (df * tf / (t as f64 * delta)).ln()).sqrt();
        cs.extend([
            Constraint {
                id: 5,
                kind: ConstraintKind::QuadraticBound,
                name: "||v_i||^2 <= C5 tau^2 (m + log(T/delta))".into(),
                coefficients: None,
                rhs: Rhs::Scalar(c(5) * tau2 * (mf + log_t)),
            },
            Constraint {
                id: 6,
                kind: ConstraintKind::QuadraticBound,
                name: "||w_i||^2 <= C6 sigma^2 (d + log(T/delta))".into(),
                coefficients: None,
                rhs: Rhs::Scalar(c(6) * sigma2 * (df + log_t)),
            },
            Constraint {
                id: 7,
                kind: ConstraintKind::PsdWindow,
                name: "sum_j (1 - a_j) G_j <= eta O_t + C7 rho^2 ||B||^2 sqrt(t log(dT/(t delta))) I".into(),
                coefficients: None,
                rhs: Rhs::PerWindow(
                    window_lens
                        .iter()
                        .map(|&len| SerMat(window_bound(t, len, eta, &gram_t, psd_extra)))
                        .collect(),
                ),
            },
            Constraint {
                id: 8,
                kind: ConstraintKind::QuadraticBound,
                name: "||x_0||^2 <= R^2 (d + C8 log(1/delta))".into(),
                coefficients: None,
                rhs: Rhs::Scalar(x0_bound),
            },
        ]);
    } else {
        let s2 = stage2.as_ref().expect("checked above");
        let delta1 = s2.delta1;
        let hold = eta.powf(1.0 - 2.0 / k as f64);
        let kf = k as f64;
        let band: Vec<f64> = (0..t_len)
            .map(|i| {
                let l = (i / s2.band_window) as i32;
                s2.eps_geo + c(9) * rho * rho * r2 * (df + log_inv_delta) / 2f64.powi(l)
            })
            .collect();
        let psd_extra = c(14) * rho * rho * b_norm * b_norm * (t as f64 * (df / delta1).ln().max(0.0)).sqrt();
        cs.extend([
            Constraint {
                id: 5,
                kind: ConstraintKind::QuadraticBound,
                name: "||x_0||^2 <= R^2 (d + C5 log(1/delta))".into(),
                coefficients: None,
                rhs: Rhs::Scalar(x0_bound),
            },
            Constraint {
                id: 6,
                kind: ConstraintKind::Boolean,
                name: "b_l^2 = b_l".into(),
                coefficients: None,
                rhs: Rhs::Zero,
            },
            Constraint {
                id: 7,
                kind: ConstraintKind::Cardinality,
                name: "sum_l b_l >= (1 - delta1) n_windows".into(),
                coefficients: None,
                rhs: Rhs::Scalar((1.0 - delta1) * n_windows as f64),
            },
            Constraint {
                id: 8,
                kind: ConstraintKind::Cardinality,
                name: "(1/T) sum_i (1 - b_l(i)) (1 - a_i) <= eta delta1".into(),
                coefficients: None,
                rhs: Rhs::Scalar(eta * delta1),
            },
            Constraint {
                id: 9,
                kind: ConstraintKind::Band,
                name: "||x_i - x'_i||^2 <= eps_geo + C9 rho^2 R^2 (d + log(1/delta)) / 2^l(i)".into(),
                coefficients: None,
                rhs: Rhs::PerIndex(band),
            },
            Constraint {
                id: 10,
                kind: ConstraintKind::AvgNoise,
                name: "(1/T) sum (1 - a) ||sum_i B A^(j-i) w||^2 <= C10 eta^(1-2/k) t alpha sigma^2 rho^2 m k".into(),
                coefficients: None,
                rhs: Rhs::Scalar(c(10) * hold * t as f64 * alpha * sigma2 * rho * rho * mf * kf),
            },
            Constraint {
                id: 11,
                kind: ConstraintKind::AvgNoise,
                name: "(1/T) sum_l ||sum_i A^(t-i) w||^2 <= C11 sigma^2 rho^2 d".into(),
                coefficients: None,
                rhs: Rhs::Scalar(c(11) * sigma2 * rho * rho * df),
            },
            Constraint {
                id: 12,
                kind: ConstraintKind::AvgNoise,
                name: "(1/T) sum ||v_i||^2 <= C12 tau^2 (m + log(2/delta) / T)".into(),
                coefficients: None,
                rhs: Rhs::Scalar(c(12) * tau2 * (mf + (2.0 / delta).ln() / tf)),
            },
            Constraint {
                id: 13,
                kind: ConstraintKind::AvgNoise,
                name: "(1/T) sum (1 - a_i) ||v_i||^2 <= C13 m k tau^2 eta^(1-2/k)".into(),
                coefficients: None,
                rhs: Rhs::Scalar(c(13) * mf * kf * tau2 * hold),
            },
            Constraint {
                id: 14,
                kind: ConstraintKind::PsdWindow,
                name: "b_l sum_j (1 - a_j) G_j <= b_l (eta O_t + C14 rho^2 ||B||^2 sqrt(t log(d/delta1)) I)".into(),
                coefficients: None,
                rhs: Rhs::PerWindow(
                    window_lens
                        .iter()
                        .map(|&len| SerMat(window_bound(t, len, eta, &gram_t, psd_extra)))
                        .collect(),
                ),
            },
        ]);
    }

    let spec = ProgramSpec {
        version,
        model: model.clone(),
        y: y.clone(),
        eta,
        delta,
        t,
        n_windows,
        k,
        rho,
        alpha,
        b_norm,
        constants,
        options,
        stage2,
        window_grams: grams.into_iter().map(SerMat).collect(),
        gram_t: SerMat(gram_t),
        constraints: cs,
    };
    debug_assert!(spec.constraints.iter().all(|c| match &c.rhs {
        Rhs::Zero => true,
        Rhs::Scalar(v) => v.is_finite(),
        Rhs::PerIndex(v) => v.iter().all(|x| x.is_finite()),
        Rhs::PerWindow(v) => v.iter().all(|m| m.0.iter().all(|x| x.is_finite())),
    }));
    Ok(spec)
}

/// A point to test against a program.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub x: Trajectory,
    pub w: Trajectory,
    pub v: Trajectory,
    pub a: Vec<f64>,
    pub b: Option<Vec<f64>>,
}

impl Candidate {
    /// Solver output completed as in the oracle construction: `w` from the
    /// dynamics, `v_i = y_i - B x_i` on kept steps and zero elsewhere.
    pub fn from_trajectory(spec: &ProgramSpec, x: Trajectory, a: Vec<f64>, b: Option<Vec<f64>>) -> Self {
        let model = &spec.model;
        let w = process_noise(model, &x);
        let mut v = Trajectory::zeros(model.obs_dim(), x.len());
        let prev = spec.version == 2 && spec.options.measurement_uses_previous_state;
        for i in 0..x.len() {
            if a[i] > 0.0 {
                let xi = if prev && i > 0 { x.step(i - 1) } else { x.step(i) };
                v.set(i, &(spec.y.step(i) - &model.b * xi));
            }
        }
        Self { x, w, v, a, b }
    }

    /// The true trajectory, noises and mask. Window indicators mark the
    /// windows where the true mask passes the subsampling constraint.
    pub fn ground_truth(spec: &ProgramSpec, episode: &EpisodeData) -> Self {
        let a: Vec<f64> = episode.a_star.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let b = (spec.version == 2).then(|| true_window_indicators(spec, &a));
        Self {
            x: episode.x_star.clone(),
            w: episode.w_star.clone(),
            v: episode.v_star.clone(),
            a,
            b,
        }
    }
}

/// `b_l = 1` exactly where window `l` passes the subsampling constraint.
pub fn true_window_indicators(spec: &ProgramSpec, a: &[f64]) -> Vec<f64> {
    (0..spec.n_windows)
        .map(|l| if spec.window_slack(l, a) >= -feas_tol(spec.gram_t.0.amax()) { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintStatus {
    pub id: u8,
    pub kind: ConstraintKind,
    /// Signed slack: negative means violated. For psd families this is the
    /// most negative eigenvalue of `rhs - lhs`.
    pub slack: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub statuses: Vec<ConstraintStatus>,
    pub feasible: bool,
}

impl FeasibilityReport {
    pub fn status(&self, id: u8) -> &ConstraintStatus {
        self.statuses.iter().find(|s| s.id == id).expect("id present")
    }

    pub fn violated(&self) -> Vec<u8> {
        self.statuses.iter().filter(|s| !s.satisfied).map(|s| s.id).collect()
    }
}

pub const FEAS_REL_TOL: f64 = 1e-7;

fn feas_tol(scale: f64) -> f64 {
    FEAS_REL_TOL * scale.abs().max(1.0)
}

/// `sum_{i=1}^{j} A^{j-i} w_{lt+i}` for each `j` in window `l`, via the
/// recursion `s_j = A s_{j-1} + w_{lt+j}`.
fn window_noise_sums(spec: &ProgramSpec, w: &Trajectory, l: usize) -> Vec<Vect> {
    let range = spec.window_range(l);
    let d = spec.model.state_dim();
    let mut s = Vect::zeros(d);
    let mut out = vec![s.clone()];
    for i in range.start + 1..range.end {
        s = &spec.model.a * s + w.step(i);
        out.push(s.clone());
    }
    // One more step to reach the next window start when it exists.
    if range.end < w.len() {
        s = &spec.model.a * s + w.step(range.end);
        out.push(s);
    }
    out
}

fn lhs_10(spec: &ProgramSpec, c: &Candidate) -> f64 {
    let mut total = 0.0;
    for l in 0..spec.n_windows {
        let sums = window_noise_sums(spec, &c.w, l);
        for (j, i) in spec.window_range(l).enumerate() {
            let wt = 1.0 - c.a[i];
            if wt != 0.0 {
                total += wt * (&spec.model.b * &sums[j]).norm_squared();
            }
        }
    }
    total / spec.horizon() as f64
}

fn lhs_11(spec: &ProgramSpec, c: &Candidate) -> f64 {
    let mut total = 0.0;
    for l in 0..spec.n_windows {
        let sums = window_noise_sums(spec, &c.w, l);
        total += sums.last().expect("nonempty").norm_squared();
    }
    total / spec.horizon() as f64
}

fn lhs_8_v2(spec: &ProgramSpec, c: &Candidate, b: &[f64]) -> f64 {
    (0..spec.horizon())
        .map(|i| (1.0 - b[spec.window_of(i)]) * (1.0 - c.a[i]))
        .sum::<f64>()
        / spec.horizon() as f64
}

/// Signed slack of every constraint family.
pub fn check_feasibility(c: &Candidate, spec: &ProgramSpec) -> Result<FeasibilityReport> {
    let t_len = spec.horizon();
    let model = &spec.model;
    if c.x.len() != t_len || c.a.len() != t_len || c.v.len() != t_len || c.w.len() != t_len {
        return Err(RlqeError::DimensionMismatch("candidate length differs from horizon".into()));
    }
    if spec.version == 2 && c.b.as_ref().is_none_or(|b| b.len() != spec.n_windows) {
        return Err(RlqeError::DimensionMismatch("second program needs one indicator per window".into()));
    }
    let prev = spec.version == 2 && spec.options.measurement_uses_previous_state;
    let mut statuses = Vec::new();
    let mut push = |id: u8, slack: f64, scale: f64| {
        let kind = spec.constraint(id).kind;
        statuses.push(ConstraintStatus {
            id,
            kind,
            slack,
            satisfied: slack >= -feas_tol(scale),
        });
    };

    let bool_res = c.a.iter().map(|v| (v * v - v).abs()).fold(0.0, f64::max);
    push(1, -bool_res, 1.0);
    let mut dyn_res: f64 = 0.0;
    for i in 1..t_len {
        let r = c.x.step(i) - &model.a * c.x.step(i - 1) - c.w.step(i);
        dyn_res = dyn_res.max(r.norm());
    }
    push(2, -dyn_res, c.x.as_matrix().amax());
    let mut meas_res: f64 = 0.0;
    for i in 0..t_len {
        let xi = if prev && i > 0 { c.x.step(i - 1) } else { c.x.step(i) };
        let r = (spec.y.step(i) - &model.b * xi - c.v.step(i)) * c.a[i];
        meas_res = meas_res.max(r.norm());
    }
    push(3, -meas_res, spec.y.as_matrix().amax());
    let card = spec.scalar_rhs(4);
    push(4, c.a.iter().sum::<f64>() - card, card);

    let x0 = c.x.step(0).norm_squared();
    let psd_slack = |b: Option<&[f64]>| {
        (0..spec.n_windows)
            .map(|l| {
                let s = spec.window_slack(l, &c.a);
                match b {
                    Some(b) => b[l] * s,
                    None => s,
                }
            })
            .fold(f64::INFINITY, f64::min)
    };
    if spec.version == 1 {
        let rhs5 = spec.scalar_rhs(5);
        let v_max = (0..t_len).map(|i| c.v.step(i).norm_squared()).fold(0.0, f64::max);
        push(5, rhs5 - v_max, rhs5);
        let rhs6 = spec.scalar_rhs(6);
        let w_max = (1..t_len).map(|i| c.w.step(i).norm_squared()).fold(0.0, f64::max);
        push(6, rhs6 - w_max, rhs6);
        push(7, psd_slack(None), spec.gram_t.0.amax());
        let rhs8 = spec.scalar_rhs(8);
        push(8, rhs8 - x0, rhs8);
    } else {
        let b = c.b.as_deref().expect("checked above");
        let rhs5 = spec.scalar_rhs(5);
        push(5, rhs5 - x0, rhs5);
        let b_bool = b.iter().map(|v| (v * v - v).abs()).fold(0.0, f64::max);
        push(6, -b_bool, 1.0);
        let rhs7 = spec.scalar_rhs(7);
        push(7, b.iter().sum::<f64>() - rhs7, rhs7);
        let rhs8 = spec.scalar_rhs(8);
        push(8, rhs8 - lhs_8_v2(spec, c, b), rhs8);
        let Rhs::PerIndex(band) = &spec.constraint(9).rhs else {
            unreachable!("band rhs is per index")
        };
        let x_prime = &spec.stage2.as_ref().expect("second program").x_prime;
        let band_slack = (0..t_len)
            .map(|i| band[i] - (c.x.step(i) - x_prime.step(i)).norm_squared())
            .fold(f64::INFINITY, f64::min);
        push(9, band_slack, band.iter().copied().fold(0.0, f64::max));
        let rhs10 = spec.scalar_rhs(10);
        push(10, rhs10 - lhs_10(spec, c), rhs10);
        let rhs11 = spec.scalar_rhs(11);
        push(11, rhs11 - lhs_11(spec, c), rhs11);
        let rhs12 = spec.scalar_rhs(12);
        let v_avg = (0..t_len).map(|i| c.v.step(i).norm_squared()).sum::<f64>() / t_len as f64;
        push(12, rhs12 - v_avg, rhs12);
        let rhs13 = spec.scalar_rhs(13);
        let v_bad = (0..t_len).map(|i| (1.0 - c.a[i]) * c.v.step(i).norm_squared()).sum::<f64>() / t_len as f64;
        push(13, rhs13 - v_bad, rhs13);
        push(14, psd_slack(Some(b)), spec.gram_t.0.amax());
    }
    let feasible = statuses.iter().all(|s| s.satisfied);
    Ok(FeasibilityReport { statuses, feasible })
}

/// Smallest value of each hidden constant for which the candidate passes
/// that family (holding everything else fixed). Families without a hidden
/// constant are omitted. Values may be negative when the family has room
/// to spare even with a zero constant.
pub fn required_constants(c: &Candidate, spec: &ProgramSpec) -> Vec<(u8, f64)> {
    let t_len = spec.horizon();
    let tf = t_len as f64;
    let model = &spec.model;
    let (d, m) = (model.state_dim() as f64, model.obs_dim() as f64);
    let log_inv_delta = (1.0 / spec.delta).ln();
    let rho2 = spec.rho * spec.rho;
    let mut out = Vec::new();

    let card_scale = (spec.eta * tf * log_inv_delta).sqrt();
    let card_gap = (1.0 - 1.01 * spec.eta) * tf - c.a.iter().sum::<f64>();
    out.push((4, if card_scale > 0.0 { card_gap / card_scale } else if card_gap <= 0.0 { 0.0 } else { f64::INFINITY }));

    let x0_req = (c.x.step(0).norm_squared() / model.r2 - d) / log_inv_delta;
    let t = spec.t as f64;
    if spec.version == 1 {
        let log_t = (tf / spec.delta).ln();
        let v_max = (0..t_len).map(|i| c.v.step(i).norm_squared()).fold(0.0, f64::max);
        out.push((5, v_max / (model.tau2 * (m + log_t))));
        let w_max = (1..t_len).map(|i| c.w.step(i).norm_squared()).fold(0.0, f64::max);
        out.push((6, w_max / (model.sigma2 * (d + log_t))));
        let unit = rho2 * spec.b_norm * spec.b_norm * (t * (d * tf / (t * spec.delta)).ln()).sqrt();
        let req = window_requirements(spec, &c.a, unit).into_iter().fold(f64::NEG_INFINITY, f64::max);
        out.push((7, req));
        out.push((8, x0_req));
    } else {
        out.push((5, x0_req));
        let s2 = spec.stage2.as_ref().expect("second program");
        let geo = rho2 * model.r2 * (d + log_inv_delta);
        let req9 = (0..t_len)
            .map(|i| {
                let l = (i / s2.band_window) as i32;
                ((c.x.step(i) - s2.x_prime.step(i)).norm_squared() - s2.eps_geo) / (geo / 2f64.powi(l))
            })
            .fold(f64::NEG_INFINITY, f64::max);
        out.push((9, req9));
        let hold = spec.eta.powf(1.0 - 2.0 / spec.k as f64);
        let kf = spec.k as f64;
        let scale10 = hold * t * spec.alpha * model.sigma2 * rho2 * m * kf;
        out.push((10, if scale10 > 0.0 { lhs_10(spec, c) / scale10 } else { 0.0 }));
        out.push((11, lhs_11(spec, c) / (model.sigma2 * rho2 * d)));
        let v_avg = (0..t_len).map(|i| c.v.step(i).norm_squared()).sum::<f64>() / tf;
        out.push((12, v_avg / (model.tau2 * (m + (2.0 / spec.delta).ln() / tf))));
        let scale13 = m * kf * model.tau2 * hold;
        let v_bad = (0..t_len).map(|i| (1.0 - c.a[i]) * c.v.step(i).norm_squared()).sum::<f64>() / tf;
        out.push((13, if scale13 > 0.0 { v_bad / scale13 } else { 0.0 }));
        out.push((14, required_c14(spec, &c.a)));
    }
    out
}

/// Per-window constant needed by the subsampling constraint:
/// `lambda_max(sum (1 - a) G - (L/t) eta O_t) / ((L/t) unit)`.
pub fn window_requirements(spec: &ProgramSpec, a: &[f64], unit: f64) -> Vec<f64> {
    (0..spec.n_windows)
        .map(|l| {
            let len = spec.window_range(l).len() as f64;
            let scale = len / spec.t as f64;
            let excess = spec.window_dropped_gram(l, a) - &spec.gram_t.0 * (spec.eta * scale);
            let top = if excess.nrows() == 1 { excess[(0, 0)] } else { max_eigenvalue(&excess) };
            top / (scale * unit)
        })
        .collect()
}

fn c14_unit(spec: &ProgramSpec) -> f64 {
    let d = spec.model.state_dim() as f64;
    let delta1 = spec.stage2.as_ref().expect("second program").delta1;
    spec.rho * spec.rho * spec.b_norm * spec.b_norm * (spec.t as f64 * (d / delta1).ln().max(0.0)).sqrt()
}

/// Smallest window constant for which the true mask can mark its failing
/// windows within the budgets of constraints 7 and 8.
pub fn required_c14(spec: &ProgramSpec, a: &[f64]) -> f64 {
    let unit = c14_unit(spec);
    let reqs = window_requirements(spec, a, unit);
    let s2 = spec.stage2.as_ref().expect("second program");
    let fail_budget = spec.n_windows as f64 * s2.delta1;
    let ab_budget = spec.eta * s2.delta1 * spec.horizon() as f64;
    let mut order: Vec<usize> = (0..reqs.len()).collect();
    order.sort_by(|&x, &y| reqs[y].total_cmp(&reqs[x]));
    // Try failing the k most demanding windows, k = 0, 1, ...
    let mut bad_steps = 0.0;
    for (k, &l) in order.iter().enumerate() {
        if k as f64 <= fail_budget + 1e-9 && bad_steps <= ab_budget + 1e-9 {
            return reqs[l];
        }
        bad_steps += spec.window_range(l).map(|i| 1.0 - a[i]).sum::<f64>();
    }
    f64::NEG_INFINITY
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::{apply_corruptions, simulate, AdversaryStrategy};
    use crate::obs::estimate_constants;
    use crate::testbeds;

    fn params(eta: f64, t: usize) -> ProgramParams {
        ProgramParams {
            eta,
            delta: 0.05,
            t,
            constants: ProgramConstants::default(),
            options: ProgramOptions::default(),
            k: None,
            stage2: None,
        }
    }

    fn scalar_spec(eta: f64, t_len: usize, t: usize) -> (ProgramSpec, EpisodeData) {
        let model = testbeds::scalar_random_walk(t_len);
        let ep = apply_corruptions(&simulate(&model, 1).unwrap(), eta, &AdversaryStrategy::Spike { scale: 20.0 }, 2).unwrap();
        let prof = estimate_constants(&model.a, &model.b, 1, 4 * t_len).unwrap();
        (build_program(1, &model, &ep.y, &prof, &params(eta, t)).unwrap(), ep)
    }

    #[test]
    fn families_are_complete() {
        let (spec, ep) = scalar_spec(0.1, 64, 16);
        let ids: Vec<u8> = spec.constraints.iter().map(|c| c.id).collect();
        assert_eq!(ids, (1..=8).collect::<Vec<_>>());
        let s2 = Stage2Inputs {
            delta1: 0.2,
            x_prime: ep.x_star.clone(),
            eps_geo: 10.0,
            band_window: 16,
        };
        let prof = estimate_constants(&spec.model.a, &spec.model.b, 1, 256).unwrap();
        let p2 = ProgramParams {
            stage2: Some(s2),
            ..params(0.1, 8)
        };
        let spec2 = build_program(2, &spec.model, &ep.y, &prof, &p2).unwrap();
        let ids: Vec<u8> = spec2.constraints.iter().map(|c| c.id).collect();
        assert_eq!(ids, (1..=14).collect::<Vec<_>>());
    }

    #[test]
    fn clean_cardinality_is_full_horizon() {
        let (spec, _) = scalar_spec(0.0, 40, 8);
        assert_eq!(spec.scalar_rhs(4), 40.0);
        assert_eq!(spec.drop_budget(), 0);
    }

    #[test]
    fn measurement_bound_plug_in() {
        // T = e * delta makes log(T/delta) = 1.
        let model = SystemModel::scalar(1.0, 1.0, 1.0, 0.7, 1.0, 3).unwrap();
        let y = Trajectory::zeros(1, 3);
        let prof = estimate_constants(&model.a, &model.b, 1, 12).unwrap();
        let p = ProgramParams {
            delta: 3.0 / std::f64::consts::E,
            ..params(0.1, 1)
        };
        // delta must be < 1 for the program; use the formula directly.
        assert!(build_program(1, &model, &y, &prof, &p).is_err());
        let spec = build_program(1, &model, &y, &prof, &params(0.1, 1)).unwrap();
        let expected = 4.0 * 0.7 * (1.0 + (3.0f64 / 0.05).ln());
        assert!((spec.scalar_rhs(5) - expected).abs() < 1e-12);
    }

    #[test]
    fn hoelder_bound_at_k_two() {
        let (spec, ep) = scalar_spec(0.1, 64, 16);
        let prof = estimate_constants(&spec.model.a, &spec.model.b, 1, 256).unwrap();
        let p2 = ProgramParams {
            k: Some(2),
            stage2: Some(Stage2Inputs {
                delta1: 0.2,
                x_prime: ep.x_star.clone(),
                eps_geo: 1.0,
                band_window: 16,
            }),
            ..params(0.1, 8)
        };
        let spec2 = build_program(2, &spec.model, &ep.y, &prof, &p2).unwrap();
        // C * m * k * tau^2 * eta^0 with C = 4, m = 1, k = 2, tau^2 = 1.
        assert!((spec2.scalar_rhs(13) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn all_corrupted_candidate_fails_cardinality() {
        let (spec, ep) = scalar_spec(0.1, 64, 16);
        let cand = Candidate::from_trajectory(&spec, ep.x_star.clone(), vec![0.0; 64], None);
        let rep = check_feasibility(&cand, &spec).unwrap();
        let rhs = spec.scalar_rhs(4);
        assert!((rep.status(4).slack + rhs).abs() < 1e-12);
        assert!(!rep.feasible);
    }

    #[test]
    fn ground_truth_passes_program_one() {
        let (spec, ep) = scalar_spec(0.1, 256, 32);
        let rep = check_feasibility(&Candidate::ground_truth(&spec, &ep), &spec).unwrap();
        assert!(rep.statuses.iter().filter(|s| s.id != 4).all(|s| s.satisfied), "{rep:?}");
    }

    #[test]
    fn rejects_bad_window() {
        let model = testbeds::coordinate_cycle(3, 30);
        let prof = estimate_constants(&model.a, &model.b, 3, 120).unwrap();
        let y = Trajectory::zeros(1, 30);
        assert!(build_program(1, &model, &y, &prof, &params(0.1, 4)).is_err());
        assert!(build_program(1, &model, &y, &prof, &params(0.1, 33)).is_err());
        assert!(build_program(1, &model, &y, &prof, &params(0.1, 6)).is_ok());
    }

    #[test]
    fn partial_window_rhs_is_scaled() {
        let (spec, _) = scalar_spec(0.1, 40, 16);
        let rhs = spec.window_rhs(7);
        assert_eq!(rhs.len(), 3);
        assert!((rhs[2].0[(0, 0)] / rhs[0].0[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spec_serializes() {
        let (spec, _) = scalar_spec(0.1, 32, 8);
        let s = serde_json::to_string(&spec).unwrap();
        let back: ProgramSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
    }
}
