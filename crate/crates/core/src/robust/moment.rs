//! Degree-2 moment relaxation of a program.
//!
//! The lifted vector is `z = [1, x_i, a_i, u_i = a_i x_i, b_l]`; products
//! with the indicators are linearized through the consistency constraints
//! below, so every binary feasible point gives a rank-one moment matrix with
//! the same objective.

use serde::{Deserialize, Serialize};

use super::config::{Backend, MomentConfig};
use super::program::{ProgramSpec, Rhs};
use super::sdp::{solve_sdp, Entry, SdpProblem, SdpSettings};
use super::{core_admissible, minimal_indicators, package, solve_weighted, SmootherSolution};
use crate::error::{Result, RlqeError};
use crate::linalg::{Mat, Trajectory, Vect};

/// First moments of the relaxed solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedMoments {
    pub x: Trajectory,
    pub a: Vec<f64>,
    pub b: Option<Vec<f64>>,
    pub gap: f64,
    pub iterations: usize,
}

struct Index {
    t_len: usize,
    d: usize,
}

impl Index {
    const ONE: usize = 0;
    fn x(&self, i: usize, p: usize) -> usize {
        1 + i * self.d + p
    }
    fn a(&self, i: usize) -> usize {
        1 + self.t_len * self.d + i
    }
    fn u(&self, i: usize, p: usize) -> usize {
        1 + self.t_len * (self.d + 1) + i * self.d + p
    }
    fn b(&self, l: usize) -> usize {
        1 + self.t_len * (2 * self.d + 1) + l
    }
}

/// `coef * Y[k, l]` on the moment block.
fn y(k: usize, l: usize, coef: f64) -> Entry {
    Entry::new(0, k, l, coef)
}

/// `x_i^T M x_j` in moments, for `i != j` or symmetric `M`.
fn x_form(ix: &Index, i: usize, j: usize, m: &Mat, scale: f64, out: &mut Vec<Entry>) {
    for p in 0..ix.d {
        for q in 0..ix.d {
            let c = m[(p, q)] * scale;
            if c != 0.0 {
                out.push(y(ix.x(i, p), ix.x(j, q), c));
            }
        }
    }
}

/// Adds `sum(entries) <= rhs` with a scalar slack block.
fn upper_bound(p: &mut SdpProblem, mut entries: Vec<Entry>, rhs: f64) {
    let s = p.add_block(1);
    entries.push(Entry::new(s, 0, 0, 1.0));
    p.constrain(entries, rhs);
}

/// `sum(entries) + S_pq = rhs_pq` for a fresh `d x d` slack block `S`,
/// where `entries(p, q)` gives the moment terms of entry `(p, q)`.
fn matrix_slack(p: &mut SdpProblem, d: usize, mut entries: impl FnMut(usize, usize) -> (Vec<Entry>, f64)) {
    let s = p.add_block(d);
    for col in 0..d {
        for row in 0..=col {
            let (mut e, rhs) = entries(row, col);
            e.push(Entry::new(s, row, col, 1.0));
            p.constrain(e, rhs);
        }
    }
}

fn build(spec: &ProgramSpec, cfg: &MomentConfig) -> Result<(SdpProblem, Index)> {
    let model = &spec.model;
    let t_len = spec.horizon();
    let d = model.state_dim();
    let ix = Index { t_len, d };
    let nb = if spec.version == 2 { spec.n_windows } else { 0 };
    let side = 1 + t_len * (2 * d + 1) + nb;
    if side > cfg.max_side {
        return Err(RlqeError::TooLarge(format!("moment matrix side {side} exceeds {}", cfg.max_side)));
    }
    let mut p = SdpProblem::default();
    p.add_block(side);

    // Objective, scaled by T.
    let btb = model.b.transpose() * &model.b / model.tau2;
    let ata = model.a.transpose() * &model.a / model.sigma2;
    let eye = Mat::identity(d, d);
    let mut obj = Vec::new();
    for i in 0..t_len {
        let yi = spec.y.step(i);
        let lin: Vect = model.b.transpose() * &yi / model.tau2;
        for pp in 0..d {
            for qq in 0..d {
                if btb[(pp, qq)] != 0.0 {
                    obj.push(y(ix.u(i, pp), ix.u(i, qq), btb[(pp, qq)]));
                }
            }
            obj.push(y(Index::ONE, ix.u(i, pp), -2.0 * lin[pp]));
        }
        obj.push(y(Index::ONE, ix.a(i), yi.norm_squared() / model.tau2));
        if i >= 1 {
            x_form(&ix, i, i, &eye, 1.0 / model.sigma2, &mut obj);
            x_form(&ix, i - 1, i - 1, &ata, 1.0, &mut obj);
            x_form(&ix, i, i - 1, &model.a, -2.0 / model.sigma2, &mut obj);
        }
    }
    if !(spec.version == 2 && !spec.options.include_prior_term) {
        x_form(&ix, 0, 0, &eye, 1.0 / model.r2, &mut obj);
    }
    p.objective = obj;

    p.constrain(vec![y(Index::ONE, Index::ONE, 1.0)], 1.0);
    for i in 0..t_len {
        p.constrain(vec![y(ix.a(i), ix.a(i), 1.0), y(Index::ONE, ix.a(i), -1.0)], 0.0);
        for pp in 0..d {
            p.constrain(vec![y(Index::ONE, ix.u(i, pp), 1.0), y(ix.a(i), ix.x(i, pp), -1.0)], 0.0);
            p.constrain(vec![y(ix.a(i), ix.u(i, pp), 1.0), y(Index::ONE, ix.u(i, pp), -1.0)], 0.0);
            for qq in 0..d {
                p.constrain(vec![y(ix.u(i, pp), ix.x(i, qq), 1.0), y(ix.u(i, pp), ix.u(i, qq), -1.0)], 0.0);
            }
        }
    }
    // Cardinality as sum a - s = rhs.
    let card: Vec<Entry> = (0..t_len).map(|i| y(Index::ONE, ix.a(i), -1.0)).collect();
    upper_bound(&mut p, card, -spec.scalar_rhs(4));

    let grams: Vec<&Mat> = spec.window_grams.iter().map(|g| &g.0).collect();
    let rhs_w = spec.window_rhs(spec.psd_id()).to_vec();
    for l in 0..spec.n_windows {
        let range = spec.window_range(l);
        let rhs_l = &rhs_w[l].0;
        if spec.version == 1 {
            // rhs - sum (1 - a_j) G_j = S.
            matrix_slack(&mut p, d, |r, c| {
                let mut e = Vec::new();
                let mut total = rhs_l[(r, c)];
                for (j, i) in range.clone().enumerate() {
                    total -= grams[j][(r, c)];
                    e.push(y(Index::ONE, ix.a(i), -grams[j][(r, c)]));
                }
                (e, total)
            });
        } else {
            // b (rhs - sum G_j) + sum Y[b, a_j] G_j = S.
            let bl = ix.b(l);
            matrix_slack(&mut p, d, |r, c| {
                let mut e = Vec::new();
                let mut coef_b = rhs_l[(r, c)];
                for (j, i) in range.clone().enumerate() {
                    coef_b -= grams[j][(r, c)];
                    e.push(y(bl, ix.a(i), -grams[j][(r, c)]));
                }
                e.push(y(Index::ONE, bl, -coef_b));
                (e, 0.0)
            });
        }
    }
    if spec.version == 2 {
        for l in 0..spec.n_windows {
            p.constrain(vec![y(ix.b(l), ix.b(l), 1.0), y(Index::ONE, ix.b(l), -1.0)], 0.0);
        }
        let sum_b: Vec<Entry> = (0..spec.n_windows).map(|l| y(Index::ONE, ix.b(l), -1.0)).collect();
        upper_bound(&mut p, sum_b, -spec.scalar_rhs(7));
        // sum_i (1 - b - a + ab) <= eta delta1 T.
        let mut e = Vec::new();
        for i in 0..t_len {
            let bl = ix.b(spec.window_of(i));
            e.push(y(Index::ONE, bl, -1.0));
            e.push(y(Index::ONE, ix.a(i), -1.0));
            e.push(y(bl, ix.a(i), 1.0));
        }
        upper_bound(&mut p, e, spec.scalar_rhs(8) * t_len as f64 - t_len as f64);
    }
    if cfg.quadratic_bounds {
        let x0_id = if spec.version == 1 { 8 } else { 5 };
        let mut e = Vec::new();
        x_form(&ix, 0, 0, &eye, 1.0, &mut e);
        upper_bound(&mut p, e, spec.scalar_rhs(x0_id));
        if spec.version == 1 {
            let rhs6 = spec.scalar_rhs(6);
            for i in 1..t_len {
                let mut e = Vec::new();
                x_form(&ix, i, i, &eye, 1.0, &mut e);
                x_form(&ix, i - 1, i - 1, &(model.a.transpose() * &model.a), 1.0, &mut e);
                x_form(&ix, i, i - 1, &model.a, -2.0, &mut e);
                upper_bound(&mut p, e, rhs6);
            }
        } else if let (Some(s2), Rhs::PerIndex(band)) = (&spec.stage2, &spec.constraint(9).rhs) {
            for i in 0..t_len {
                let c = s2.x_prime.step(i);
                let mut e = Vec::new();
                x_form(&ix, i, i, &eye, 1.0, &mut e);
                for pp in 0..d {
                    e.push(y(Index::ONE, ix.x(i, pp), -2.0 * c[pp]));
                }
                upper_bound(&mut p, e, band[i] - c.norm_squared());
            }
        }
    }
    Ok((p, ix))
}

/// Rounds relaxed indicators: keep where `a >= 1/2`, then re-admit the
/// largest dropped values until the combinatorial constraints hold.
fn round_indicators(spec: &ProgramSpec, a_rel: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = a_rel.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    let mut dropped: Vec<usize> = (0..a.len()).filter(|&i| a[i] == 0.0).collect();
    dropped.sort_by(|&i, &j| a_rel[j].total_cmp(&a_rel[i]).then(i.cmp(&j)));
    let admissible = |a: &[f64]| {
        if spec.version == 2 {
            minimal_indicators(spec, a).is_some()
        } else {
            core_admissible(spec, a, None)
        }
    };
    for i in dropped {
        if admissible(&a) {
            break;
        }
        a[i] = 1.0;
    }
    a
}

pub fn solve_moment_relaxation(spec: &ProgramSpec, cfg: &MomentConfig) -> Result<SmootherSolution> {
    let (problem, ix) = build(spec, cfg)?;
    let settings = SdpSettings {
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        ..SdpSettings::default()
    };
    let res = solve_sdp(&problem, &settings)?;
    let ymat = &res.blocks[0];
    let t_len = spec.horizon();
    let d = spec.model.state_dim();
    let mut x_rel = Trajectory::zeros(d, t_len);
    for i in 0..t_len {
        let v = Vect::from_iterator(d, (0..d).map(|p| ymat[(0, ix.x(i, p))]));
        x_rel.set(i, &v);
    }
    let a_rel: Vec<f64> = (0..t_len).map(|i| ymat[(0, ix.a(i))].clamp(0.0, 1.0)).collect();
    let b_rel = (spec.version == 2).then(|| (0..spec.n_windows).map(|l| ymat[(0, ix.b(l))].clamp(0.0, 1.0)).collect::<Vec<_>>());

    let a = round_indicators(spec, &a_rel);
    let b = if spec.version == 2 { minimal_indicators(spec, &a) } else { None };
    let out = solve_weighted(spec, &a, None)?;
    let mut sol = package(spec, out.x_hat, a, b, Backend::Moment)?;
    sol.lower_bound = Some(res.dual_objective / t_len as f64);
    sol.rounds = res.iterations;
    sol.converged = res.converged;
    if !res.converged {
        sol.flags.push(format!("relaxation gap {:.3e} after {} iterations", res.gap, res.iterations));
    }
    sol.relaxed = Some(RelaxedMoments {
        x: x_rel,
        a: a_rel,
        b: b_rel,
        gap: res.gap,
        iterations: res.iterations,
    });
    Ok(sol)
}
