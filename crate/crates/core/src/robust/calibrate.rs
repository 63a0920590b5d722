//! Data-driven widening of the program constants.
//!
//! For each calibration seed the ground truth and the oracle-smoother
//! candidate are scored family by family: the smallest constant under which
//! that family holds. A constant is raised to 1.05 times the requested
//! quantile of those requirements whenever that exceeds its current value.

use serde::{Deserialize, Serialize};

use super::band::confidence_band;
use super::config::{ProgramConstants, RobustConfig};
use super::pipeline::{delta1_schedule, solve};
use super::program::{build_program, required_constants, Candidate, ProgramParams, ProgramSpec, Stage2Inputs};
use crate::error::Result;
use crate::kalman::smoother;
use crate::lds::{apply_corruptions, simulate, AdversaryStrategy, EpisodeData, SystemModel};
use crate::obs::{estimate_constants, window_size, ObservabilityProfile, WindowStage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub eta: f64,
    pub delta: f64,
    pub seeds: Vec<u64>,
    /// Quantile of the per-seed requirements; defaults to `1 - delta / 4`.
    pub quantile: Option<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRequirement {
    pub program: u8,
    pub id: u8,
    pub per_seed: Vec<f64>,
    pub chosen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub program1: ProgramConstants,
    pub program2: ProgramConstants,
    pub families: Vec<FamilyRequirement>,
}

/// Programs built for one episode exactly as the pipeline builds them.
pub struct EpisodePrograms {
    pub profile: ObservabilityProfile,
    pub spec1: ProgramSpec,
    pub spec2: ProgramSpec,
}

/// Builds both programs for an episode. The second uses the first-stage
/// solution (under `cfg`) as its reference trajectory.
pub fn episode_programs(ep: &EpisodeData, eta: f64, delta: f64, cfg: &RobustConfig) -> Result<EpisodePrograms> {
    let model = &ep.model;
    let t_len = ep.horizon();
    let d = model.state_dim();
    let profile = estimate_constants(&model.a, &model.b, cfg.s_max.unwrap_or(d), 4 * t_len)?;
    let t_pre = window_size(&profile, d, t_len, delta, WindowStage::LogT, cfg.c_win)?;
    let base = ProgramParams {
        eta,
        delta,
        t: t_pre,
        constants: cfg.program1,
        options: cfg.options,
        k: None,
        stage2: None,
    };
    let spec1 = build_program(1, model, &ep.y, &profile, &base)?;
    let stage1 = solve(&spec1, cfg)?;
    let band = confidence_band(&stage1.x_hat, &profile, model, delta, t_pre, cfg.c_band);
    let (delta1, t) = delta1_schedule(&profile, d, t_len, eta, delta, cfg.c_delta, cfg.c_win);
    let t = (t as usize).min(t_len - t_len % profile.s);
    let p2 = ProgramParams {
        t,
        constants: cfg.program2,
        stage2: Some(Stage2Inputs {
            delta1,
            x_prime: stage1.x_hat,
            eps_geo: band.eps_geo,
            band_window: t_pre,
        }),
        ..base
    };
    let spec2 = build_program(2, model, &ep.y, &profile, &p2)?;
    Ok(EpisodePrograms { profile, spec1, spec2 })
}

/// Ground truth and the oracle-smoother candidate for a program.
pub fn reference_candidates(spec: &ProgramSpec, ep: &EpisodeData) -> Result<[Candidate; 2]> {
    let truth = Candidate::ground_truth(spec, ep);
    let oracle = smoother(&ep.model, &ep.y, &ep.a_star)?;
    let a = truth.a.clone();
    let b = truth.b.clone();
    Ok([truth, Candidate::from_trajectory(spec, oracle.x_hat, a, b)])
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NEG_INFINITY;
    }
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[k]
}

pub fn calibrate_constants(
    model: &SystemModel,
    adversary: &AdversaryStrategy,
    settings: &CalibrationSettings,
    cfg: &RobustConfig,
) -> Result<CalibrationReport> {
    let q = settings.quantile.unwrap_or(1.0 - settings.delta / 4.0);
    let mut reqs: std::collections::BTreeMap<(u8, u8), Vec<f64>> = Default::default();
    for &seed in &settings.seeds {
        let clean = simulate(model, seed)?;
        let ep = apply_corruptions(&clean, settings.eta, adversary, seed)?;
        let progs = episode_programs(&ep, settings.eta, settings.delta, cfg)?;
        for (version, spec) in [(1u8, &progs.spec1), (2u8, &progs.spec2)] {
            let mut worst: std::collections::BTreeMap<u8, f64> = Default::default();
            for cand in reference_candidates(spec, &ep)? {
                for (id, c) in required_constants(&cand, spec) {
                    let e = worst.entry(id).or_insert(f64::NEG_INFINITY);
                    *e = e.max(c);
                }
            }
            for (id, c) in worst {
                reqs.entry((version, id)).or_default().push(c);
            }
        }
    }
    let mut report = CalibrationReport {
        program1: cfg.program1,
        program2: cfg.program2,
        families: Vec::new(),
    };
    for ((version, id), per_seed) in reqs {
        let target = quantile(&per_seed, q) * settings.margin;
        let consts = if version == 1 { &mut report.program1 } else { &mut report.program2 };
        let chosen = consts.get(id).max(target);
        consts.set(id, chosen);
        report.families.push(FamilyRequirement {
            program: version,
            id,
            per_seed,
            chosen,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robust::check_feasibility;
    use crate::testbeds;

    #[test]
    fn quantile_picks_order_statistic() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
    }

    #[test]
    fn calibrated_constants_admit_calibration_truth() {
        let model = testbeds::scalar_random_walk(256);
        let settings = CalibrationSettings {
            eta: 0.1,
            delta: 0.05,
            seeds: (0..8).collect(),
            quantile: Some(1.0),
            margin: 1.05,
        };
        let adv = AdversaryStrategy::Spike { scale: 16.0 };
        let report = calibrate_constants(&model, &adv, &settings, &RobustConfig::default()).unwrap();
        let cfg = RobustConfig {
            program1: report.program1,
            program2: report.program2,
            ..RobustConfig::default()
        };
        for &seed in &settings.seeds {
            let ep = apply_corruptions(&simulate(&model, seed).unwrap(), 0.1, &adv, seed).unwrap();
            let progs = episode_programs(&ep, 0.1, 0.05, &cfg).unwrap();
            for spec in [&progs.spec1, &progs.spec2] {
                for cand in reference_candidates(spec, &ep).unwrap() {
                    let rep = check_feasibility(&cand, spec).unwrap();
                    assert!(rep.feasible, "seed {seed} v{}: {:?}", spec.version, rep.violated());
                }
            }
        }
    }
}
