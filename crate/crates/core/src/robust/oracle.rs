//! Exhaustive mask enumeration for tiny horizons.

use serde::{Deserialize, Serialize};

use super::config::Backend;
use super::program::ProgramSpec;
use super::{core_admissible, minimal_indicators, package, solve_weighted, SmootherSolution};
use crate::error::{Result, RlqeError};
use crate::kalman::smoother;
use crate::lds::SystemModel;
use crate::linalg::Trajectory;

pub const BRUTE_FORCE_MAX_HORIZON: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub mask: Vec<bool>,
    pub x_hat: Trajectory,
    pub objective: f64,
    pub masks_enumerated: usize,
}

fn check_size(t_len: usize) -> Result<()> {
    if t_len > BRUTE_FORCE_MAX_HORIZON {
        return Err(RlqeError::TooLarge(format!(
            "brute force enumerates 2^T masks; T = {t_len} exceeds {BRUTE_FORCE_MAX_HORIZON}"
        )));
    }
    Ok(())
}

fn mask_of(bits: u32, t_len: usize) -> Vec<bool> {
    (0..t_len).map(|i| bits >> i & 1 == 1).collect()
}

/// Global minimizer of the masked objective over all masks keeping at least
/// `(1 - 1.01 eta) T` steps. No window constraints.
pub fn brute_force_oracle(model: &SystemModel, y: &Trajectory, eta: f64) -> Result<OracleSolution> {
    let t_len = y.len();
    check_size(t_len)?;
    if !(0.0..0.5).contains(&eta) {
        return Err(RlqeError::BreakdownPoint(eta));
    }
    let need = ((1.0 - 1.01 * eta) * t_len as f64 - 1e-9).ceil().max(0.0) as u32;
    let mut best: Option<OracleSolution> = None;
    let mut count = 0;
    for bits in 0u32..(1 << t_len) {
        if bits.count_ones() < need {
            continue;
        }
        count += 1;
        let mask = mask_of(bits, t_len);
        let out = smoother(model, y, &mask)?;
        if best.as_ref().is_none_or(|b| out.objective < b.objective) {
            best = Some(OracleSolution {
                mask,
                x_hat: out.x_hat,
                objective: out.objective,
                masks_enumerated: 0,
            });
        }
    }
    let mut best = best.expect("the full mask always qualifies");
    best.masks_enumerated = count;
    Ok(best)
}

/// Global minimizer of a program over its combinatorial part: cardinality,
/// window subsampling and (second program) the window-failure budgets with
/// the cheapest indicator choice. Per-step quadratic bounds, the band and
/// the averaged noise bounds are certified on the result, not enforced.
pub fn brute_force_program(spec: &ProgramSpec) -> Result<SmootherSolution> {
    let t_len = spec.horizon();
    check_size(t_len)?;
    let mut best: Option<(f64, Trajectory, Vec<f64>, Option<Vec<f64>>)> = None;
    let mut count = 0;
    for bits in 0u32..(1 << t_len) {
        let a: Vec<f64> = mask_of(bits, t_len).iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let b = if spec.version == 2 {
            match minimal_indicators(spec, &a) {
                Some(b) => Some(b),
                None => continue,
            }
        } else if core_admissible(spec, &a, None) {
            None
        } else {
            continue;
        };
        count += 1;
        let out = solve_weighted(spec, &a, None)?;
        let obj = spec.objective(&out.x_hat, &a);
        if best.as_ref().is_none_or(|bst| obj < bst.0) {
            best = Some((obj, out.x_hat, a, b));
        }
    }
    let (_, x, a, b) = best.ok_or_else(|| RlqeError::InvalidInput("no mask satisfies the program".into()))?;
    let mut sol = package(spec, x, a, b, Backend::BruteForce)?;
    sol.rounds = count;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::simulate;
    use crate::testbeds;

    #[test]
    fn clean_is_single_mask() {
        let model = testbeds::scalar_random_walk(6);
        let ep = simulate(&model, 1).unwrap();
        let sol = brute_force_oracle(&model, &ep.y, 0.0).unwrap();
        assert_eq!(sol.masks_enumerated, 1);
        let reference = smoother(&model, &ep.y, &ep.a_star).unwrap();
        assert!((sol.objective - reference.objective).abs() < 1e-12);
    }

    #[test]
    fn binomial_count() {
        let model = testbeds::scalar_random_walk(3);
        let ep = simulate(&model, 1).unwrap();
        assert_eq!(brute_force_oracle(&model, &ep.y, 0.4).unwrap().masks_enumerated, 4);
    }

    #[test]
    fn rejects_long_horizons() {
        let model = testbeds::scalar_random_walk(15);
        let ep = simulate(&model, 1).unwrap();
        assert!(matches!(brute_force_oracle(&model, &ep.y, 0.1), Err(RlqeError::TooLarge(_))));
    }
}
