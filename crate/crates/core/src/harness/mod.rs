//! Config-driven experiment runner. One row per (scenario, method, eta, T,
//! seed) trial, written as CSV plus a JSON summary of grouped means.

mod methods;

pub use methods::{
    online_config, oblivious_shrinkage, oblivious_threshold_baseline, run_method, shrinkage_factor, Method, MethodOutput,
    MethodSettings,
};

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlqeError};
use crate::kalman::{clean_nll, filter_predictions, opt_value, run_filter};
use crate::lds::{apply_corruptions, simulate, simulate_with, AdversarySpec, AdversaryStrategy, EpisodeData, InitialState, SystemModel};
use crate::linalg::{Mat, Trajectory};
use crate::robust::{Backend, RobustConfig};
use crate::testbeds;
use crate::wiener::stationary_covariance;

/// Built-in scenarios. Each fixes a system family and a default adversary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Random walk; corruptions pushed outward at `sqrt(T)` scale.
    ObliviousFails,
    /// Random walk; the adversary picks the corrupted steps in the tail.
    AdversarialLocations,
    /// Cyclic coordinate shift seen through one coordinate.
    CoordinateCycle,
    /// The 3-d system with a hard-to-observe direction.
    HardSubspace,
    /// `A(x, y) = (0, x)`, `B = I`: conflicting looks at the initial state.
    PriorScale,
    /// `A = 0`, `B = I_d` with Gaussian replacement corruptions.
    Dimension,
    /// `A = 0.5`, `B = 1`.
    StableScalar,
    /// Model taken entirely from `model.a` / `model.b`.
    Custom,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Self::ObliviousFails => "oblivious_fails",
            Self::AdversarialLocations => "adversarial_locations",
            Self::CoordinateCycle => "coordinate_cycle",
            Self::HardSubspace => "hard_subspace",
            Self::PriorScale => "prior_scale",
            Self::Dimension => "dimension",
            Self::StableScalar => "stable_scalar",
            Self::Custom => "custom",
        }
    }

    pub fn default_adversary(self, horizon: usize) -> AdversarySpec {
        match self {
            Self::ObliviousFails => AdversarySpec::RandomWalkAttack { scale: 1.0 },
            Self::AdversarialLocations => AdversarySpec::ParallelPathAttack { model_violating: true },
            Self::Dimension => AdversarySpec::GaussianReplacement { variance: 2.0 },
            _ => AdversarySpec::Spike {
                scale: (horizon as f64).sqrt(),
            },
        }
    }
}

/// Optional overrides of the scenario's system.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// State dimension for the dimension-parameterised scenarios.
    pub d: Option<usize>,
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub sigma: Option<f64>,
    pub tau: Option<f64>,
    pub r: Option<f64>,
}

/// Constant overrides; the `c1..c14` entries apply to both programs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantOverrides {
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
    pub c4: Option<f64>,
    pub c5: Option<f64>,
    pub c6: Option<f64>,
    pub c7: Option<f64>,
    pub c8: Option<f64>,
    pub c9: Option<f64>,
    pub c10: Option<f64>,
    pub c11: Option<f64>,
    pub c12: Option<f64>,
    pub c13: Option<f64>,
    pub c14: Option<f64>,
    pub c_win: Option<f64>,
    pub c_band: Option<f64>,
    pub c_r: Option<f64>,
    pub c_h: Option<f64>,
    pub c_tau: Option<f64>,
    pub c_delta: Option<f64>,
}

impl ConstantOverrides {
    fn program(&self) -> [Option<f64>; 14] {
        [
            self.c1, self.c2, self.c3, self.c4, self.c5, self.c6, self.c7, self.c8, self.c9, self.c10, self.c11, self.c12,
            self.c13, self.c14,
        ]
    }

    pub fn apply(&self, cfg: &mut RobustConfig) {
        for (k, v) in self.program().iter().enumerate() {
            if let Some(v) = v {
                cfg.program1.set(k as u8 + 1, *v);
                cfg.program2.set(k as u8 + 1, *v);
            }
        }
        if let Some(v) = self.c_win {
            cfg.c_win = v;
        }
        if let Some(v) = self.c_band {
            cfg.c_band = v;
        }
        if let Some(v) = self.c_delta {
            cfg.c_delta = v;
        }
    }
}

fn default_seeds() -> usize {
    10
}
fn default_master_seed() -> u64 {
    20_240_601
}
fn default_delta() -> f64 {
    0.05
}
fn default_threshold_scale() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub model: ModelParams,
    /// Replaces the scenario's default adversary.
    #[serde(default)]
    pub adversary: Option<AdversarySpec>,
    pub eta_grid: Vec<f64>,
    pub t_grid: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    pub methods: Vec<Method>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub backend: Option<Backend>,
    #[serde(default)]
    pub constants: ConstantOverrides,
    #[serde(default = "default_threshold_scale")]
    pub threshold_scale: f64,
    /// Where `rlqe run` writes when `--out` is absent.
    #[serde(default)]
    pub output: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(RlqeError::InvalidInput("seeds must be >= 1".into()));
        }
        if self.eta_grid.is_empty() || self.t_grid.is_empty() || self.methods.is_empty() {
            return Err(RlqeError::InvalidInput("eta_grid, t_grid and methods must be nonempty".into()));
        }
        if let Some(e) = self.eta_grid.iter().find(|e| !(0.0..0.5).contains(*e)) {
            return Err(RlqeError::BreakdownPoint(*e));
        }
        if self.t_grid.contains(&0) {
            return Err(RlqeError::InvalidInput("horizons must be positive".into()));
        }
        if self.scenario == Scenario::Custom && (self.model.a.is_none() || self.model.b.is_none()) {
            return Err(RlqeError::InvalidInput("custom scenario needs model.a and model.b".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// System for horizon `t` with the overrides applied.
    pub fn model(&self, t: usize) -> Result<SystemModel> {
        let p = &self.model;
        let d = p.d.unwrap_or(3);
        let base = match self.scenario {
            Scenario::ObliviousFails | Scenario::AdversarialLocations => testbeds::scalar_random_walk(t),
            Scenario::CoordinateCycle => testbeds::coordinate_cycle(d, t),
            Scenario::HardSubspace => testbeds::hard_subspace(t),
            Scenario::PriorScale => testbeds::shift_pair(t),
            Scenario::Dimension => testbeds::memoryless(p.d.unwrap_or(2), t),
            Scenario::StableScalar => testbeds::stable_scalar(t),
            Scenario::Custom => testbeds::scalar_random_walk(t),
        };
        let mat = |rows: &Vec<Vec<f64>>| crate::linalg::mat_serde::from_rows(rows).map_err(RlqeError::InvalidInput);
        let a: Mat = p.a.as_ref().map(mat).transpose()?.unwrap_or(base.a.clone());
        let b: Mat = p.b.as_ref().map(mat).transpose()?.unwrap_or(base.b.clone());
        let sq = |v: Option<f64>, dflt: f64| v.map(|s| s * s).unwrap_or(dflt);
        SystemModel::new(a, b, sq(p.sigma, base.sigma2), sq(p.tau, base.tau2), sq(p.r, base.r2), t)
    }

    pub fn adversary(&self, t: usize) -> AdversarySpec {
        self.adversary.clone().unwrap_or_else(|| self.scenario.default_adversary(t))
    }

    pub fn settings(&self, eta: f64) -> MethodSettings {
        let mut robust = RobustConfig::default();
        self.constants.apply(&mut robust);
        if let Some(b) = self.backend {
            robust.backend = b;
        }
        MethodSettings {
            eta,
            delta: self.delta,
            robust,
            threshold_scale: self.threshold_scale,
            c_r: self.constants.c_r.unwrap_or(2.0),
            c_h: self.constants.c_h.unwrap_or(2.0),
            c_tau: self.constants.c_tau.unwrap_or(1.0),
            corruption_variance: match self.adversary(0) {
                AdversarySpec::GaussianReplacement { variance } => Some(variance),
                _ => None,
            },
        }
    }
}

/// Seed of the `k`-th trial: the master seed advanced by the counter, so the
/// same episode is shared across methods and grid cells.
pub fn trial_seed(master: u64, k: usize) -> u64 {
    master.wrapping_add(k as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub method: String,
    pub eta: f64,
    #[serde(rename = "T")]
    pub t: usize,
    pub seed: u64,
    pub excess_risk: Option<f64>,
    pub nll: Option<f64>,
    pub opt: Option<f64>,
    /// `mean_i ||x_hat_{i+1|i} - x*_{i+1}||^2` for methods with predictions.
    pub mean_pred_err: Option<f64>,
    /// `mean_i ||x_hat_{i+1|i} - x_{i+1|i}||` against the filter fed clean data.
    pub pred_excess: Option<f64>,
    pub band_coverage: Option<f64>,
    pub flags: String,
    pub error: Option<String>,
    pub wall_time: f64,
}

struct Trial {
    eta: f64,
    t: usize,
    seed_idx: usize,
}

fn episode(cfg: &ExperimentConfig, eta: f64, t: usize, seed: u64) -> Result<EpisodeData> {
    let model = cfg.model(t)?;
    // Stationary start for the strictly stable scalar system.
    let clean = if cfg.scenario == Scenario::StableScalar {
        simulate_with(&model, seed, &InitialState::Gaussian(stationary_covariance(&model)?))?
    } else {
        simulate(&model, seed)?
    };
    apply_corruptions(&clean, eta, &AdversaryStrategy::from(&cfg.adversary(t)), seed)
}

fn score(method: Method, ep: &EpisodeData, out: &MethodOutput, row: &mut ResultRow) -> Result<()> {
    if let Some(x) = &out.x_hat {
        let nll = clean_nll(x, ep)?;
        let opt = opt_value(ep)?;
        row.nll = Some(nll);
        row.opt = Some(opt);
        row.excess_risk = Some(nll - opt);
    }
    if let Some(p) = &out.predictions {
        let t_len = ep.horizon();
        if t_len >= 2 {
            let n = (t_len - 1) as f64;
            let err: f64 = (0..t_len - 1).map(|i| (p.step(i) - ep.x_star.step(i + 1)).norm_squared()).sum();
            row.mean_pred_err = Some(err / n);
            if method.is_online() {
                let oracle = filter_predictions(&ep.model, &run_filter(&ep.model, &ep.y_star, None)?);
                let gap: f64 = (0..t_len - 1).map(|i| (p.step(i) - oracle.step(i)).norm()).sum();
                row.pred_excess = Some(gap / n);
            }
        }
    }
    if let Some(b) = &out.band {
        row.band_coverage = Some(b.coverage(&ep.x_star, out.band_from.min(ep.horizon())));
    }
    row.flags = out.flags.join("; ");
    Ok(())
}

fn run_trial(cfg: &ExperimentConfig, trial: &Trial) -> Vec<ResultRow> {
    let seed = trial_seed(cfg.master_seed, trial.seed_idx);
    let blank = |method: Method| ResultRow {
        scenario: cfg.scenario.name().into(),
        method: method.name().into(),
        eta: trial.eta,
        t: trial.t,
        seed,
        excess_risk: None,
        nll: None,
        opt: None,
        mean_pred_err: None,
        pred_excess: None,
        band_coverage: None,
        flags: String::new(),
        error: None,
        wall_time: 0.0,
    };
    let ep = match episode(cfg, trial.eta, trial.t, seed) {
        Ok(ep) => ep,
        Err(e) => {
            return cfg
                .methods
                .iter()
                .map(|&m| ResultRow {
                    error: Some(format!("episode: {e}")),
                    ..blank(m)
                })
                .collect()
        }
    };
    let settings = cfg.settings(trial.eta);
    cfg.methods
        .iter()
        .map(|&m| {
            let mut row = blank(m);
            let start = Instant::now();
            let res = run_method(m, &ep, &settings).and_then(|out| score(m, &ep, &out, &mut row));
            if let Err(e) = res {
                row.error = Some(e.to_string());
            }
            row.wall_time = start.elapsed().as_secs_f64();
            row
        })
        .collect()
}

/// Runs every trial on `workers` threads. Row order is
/// (method, eta, T, seed) regardless of the worker count.
pub fn run(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let trials: Vec<Trial> = cfg
        .eta_grid
        .iter()
        .flat_map(|&eta| {
            cfg.t_grid
                .iter()
                .flat_map(move |&t| (0..cfg.seeds).map(move |seed_idx| Trial { eta, t, seed_idx }))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| RlqeError::InvalidInput(format!("thread pool: {e}")))?;
    let per_trial: Vec<Vec<ResultRow>> = pool.install(|| trials.par_iter().map(|t| run_trial(cfg, t)).collect());
    let mut rows: Vec<ResultRow> = per_trial.into_iter().flatten().collect();
    let order = |r: &ResultRow| cfg.methods.iter().position(|m| m.name() == r.method).unwrap_or(usize::MAX);
    // Stable sort keeps the (eta, T, seed) order within each method.
    rows.sort_by_key(order);
    Ok(rows)
}

pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self {
            n,
            mean,
            stderr: (var / n as f64).sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub scenario: String,
    pub method: String,
    pub eta: f64,
    #[serde(rename = "T")]
    pub t: usize,
    pub trials: usize,
    pub errors: usize,
    pub excess_risk: Option<Stat>,
    pub mean_pred_err: Option<Stat>,
    pub pred_excess: Option<Stat>,
    pub band_coverage: Option<Stat>,
}

/// Means and standard errors per (scenario, method, eta, T), in row order.
pub fn summarize(rows: &[ResultRow]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<usize, Vec<&ResultRow>> = BTreeMap::new();
    let mut keys: Vec<(String, String, u64, usize)> = Vec::new();
    for r in rows {
        let key = (r.scenario.clone(), r.method.clone(), r.eta.to_bits(), r.t);
        let idx = keys.iter().position(|k| *k == key).unwrap_or_else(|| {
            keys.push(key);
            keys.len() - 1
        });
        groups.entry(idx).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(idx, rs)| {
            let col = |f: fn(&ResultRow) -> Option<f64>| Stat::of(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let (scenario, method, eta, t) = keys[idx].clone();
            GroupSummary {
                scenario,
                method,
                eta: f64::from_bits(eta),
                t,
                trials: rs.len(),
                errors: rs.iter().filter(|r| r.error.is_some()).count(),
                excess_risk: col(|r| r.excess_risk),
                mean_pred_err: col(|r| r.mean_pred_err),
                pred_excess: col(|r| r.pred_excess),
                band_coverage: col(|r| r.band_coverage),
            }
        })
        .collect()
}

/// Writes `results.csv` and `summary.json` under `dir`.
pub fn write_outputs(rows: &[ResultRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(rows, &dir.join("results.csv"))?;
    let summary = serde_json::to_string_pretty(&summarize(rows))?;
    std::fs::write(dir.join("summary.json"), summary + "\n")?;
    Ok(())
}

/// Rows with the timing column blanked, for reproducibility checks.
pub fn without_timing(rows: &[ResultRow]) -> Vec<ResultRow> {
    rows.iter().map(|r| ResultRow { wall_time: 0.0, ..r.clone() }).collect()
}

/// The trajectory a method returned, for the `score` subcommand.
pub fn score_trajectory(x_hat: &Trajectory, ep: &EpisodeData) -> Result<(f64, f64)> {
    Ok((clean_nll(x_hat, ep)?, opt_value(ep)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "scenario": "oblivious_fails",
                "eta_grid": [0.0, 0.1],
                "t_grid": [64],
                "seeds": 3,
                "methods": ["oracle_smoother", "naive_kalman", "sos_kalman", "oblivious_threshold"]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn worker_count_does_not_change_rows() {
        let cfg = small();
        let a = without_timing(&run(&cfg, 1).unwrap());
        let b = without_timing(&run(&cfg, 3).unwrap());
        assert_eq!(a.len(), 24);
        assert_eq!(a, b);
    }

    #[test]
    fn offline_excess_is_nonnegative() {
        for r in run(&small(), 2).unwrap() {
            assert!(r.error.is_none(), "{r:?}");
            assert!(r.excess_risk.unwrap() >= -1e-8, "{r:?}");
        }
    }

    #[test]
    fn clean_rows_match_oracle() {
        let rows = run(&small(), 1).unwrap();
        for r in rows.iter().filter(|r| r.eta == 0.0 && r.method == "sos_kalman") {
            assert!(r.excess_risk.unwrap() <= 1e-6, "{r:?}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = run(&small(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&rows, dir.path()).unwrap();
        assert_eq!(read_csv(&dir.path().join("results.csv")).unwrap(), rows);
        let s: Vec<GroupSummary> = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|g| g.trials == 3));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small();
        cfg.seeds = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.eta_grid = vec![0.6];
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"scenario": "custom", "eta_grid": [0.1], "t_grid": [8], "methods": ["naive_kalman"]}"#).is_err());
    }

    #[test]
    fn overrides_reach_both_programs() {
        let mut cfg = RobustConfig::default();
        ConstantOverrides {
            c7: Some(9.0),
            c_band: Some(2.0),
            ..Default::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.program1.c7, 9.0);
        assert_eq!(cfg.program2.c7, 9.0);
        assert_eq!(cfg.c_band, 2.0);
    }
}
