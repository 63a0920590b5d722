//! Tunable constants and solver settings for the robust smoothers.

use serde::{Deserialize, Serialize};

/// Leading constants for the `O(.)` right-hand sides of one program,
/// indexed by constraint number. Entries for constraints without a hidden
/// constant are carried but unused.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProgramConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Multiplies the Bernstein slack `sqrt(eta T log(1/delta))` of the
    /// cardinality constraint.
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
    pub c8: f64,
    pub c9: f64,
    pub c10: f64,
    pub c11: f64,
    pub c12: f64,
    pub c13: f64,
    pub c14: f64,
}

impl Default for ProgramConstants {
    fn default() -> Self {
        Self {
            c1: 4.0,
            c2: 4.0,
            c3: 4.0,
            c4: 1.0,
            c5: 4.0,
            c6: 4.0,
            c7: 4.0,
            c8: 4.0,
            c9: 4.0,
            c10: 4.0,
            c11: 4.0,
            c12: 4.0,
            c13: 4.0,
            c14: 4.0,
        }
    }
}

impl ProgramConstants {
    pub fn get(&self, id: u8) -> f64 {
        match id {
            1 => self.c1,
            2 => self.c2,
            3 => self.c3,
            4 => self.c4,
            5 => self.c5,
            6 => self.c6,
            7 => self.c7,
            8 => self.c8,
            9 => self.c9,
            10 => self.c10,
            11 => self.c11,
            12 => self.c12,
            13 => self.c13,
            14 => self.c14,
            _ => panic!("no constraint {id}"),
        }
    }

    pub fn set(&mut self, id: u8, v: f64) {
        let slot = match id {
            1 => &mut self.c1,
            2 => &mut self.c2,
            3 => &mut self.c3,
            4 => &mut self.c4,
            5 => &mut self.c5,
            6 => &mut self.c6,
            7 => &mut self.c7,
            8 => &mut self.c8,
            9 => &mut self.c9,
            10 => &mut self.c10,
            11 => &mut self.c11,
            12 => &mut self.c12,
            13 => &mut self.c13,
            14 => &mut self.c14,
            _ => panic!("no constraint {id}"),
        };
        *slot = v;
    }
}

/// Deviation toggles for places where the two programs disagree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProgramOptions {
    /// Second program's measurement constraint against `x_{i-1}` as printed,
    /// instead of `x_i`.
    pub measurement_uses_previous_state: bool,
    /// Keep `||x_0||^2 / R^2` in the second program's objective.
    pub include_prior_term: bool,
}

impl Default for ProgramOptions {
    fn default() -> Self {
        Self {
            measurement_uses_previous_state: false,
            include_prior_term: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Alternating,
    Moment,
    BruteForce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlternatingConfig {
    pub max_rounds: usize,
    pub tol: f64,
    /// Pairwise swap search runs when `T` is at most this.
    pub swap_search_max_horizon: usize,
    pub anchor_initial: f64,
    pub anchor_growth: f64,
}

impl Default for AlternatingConfig {
    fn default() -> Self {
        Self {
            max_rounds: 200,
            tol: 1e-8,
            swap_search_max_horizon: 64,
            anchor_initial: 1.0,
            anchor_growth: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MomentConfig {
    /// Largest moment matrix side accepted.
    pub max_side: usize,
    pub max_iters: usize,
    /// Target relative primal/dual residual and gap.
    pub tol: f64,
    /// Also impose the per-step noise and initial-state bounds in the
    /// relaxation (off: they are only certified afterwards).
    pub quadratic_bounds: bool,
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self {
            max_side: 2000,
            max_iters: 200_000,
            tol: 1e-7,
            quadratic_bounds: false,
        }
    }
}

/// Everything the robust pipeline needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustConfig {
    pub program1: ProgramConstants,
    pub program2: ProgramConstants,
    pub options: ProgramOptions,
    pub c_win: f64,
    pub c_band: f64,
    pub c_delta: f64,
    pub backend: Backend,
    pub alternating: AlternatingConfig,
    pub moment: MomentConfig,
    /// Largest `s` tried when estimating observability constants.
    pub s_max: Option<usize>,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            program1: ProgramConstants::default(),
            program2: ProgramConstants::default(),
            options: ProgramOptions::default(),
            c_win: 4.0,
            c_band: 4.0,
            c_delta: 1.0,
            backend: Backend::Alternating,
            alternating: AlternatingConfig::default(),
            moment: MomentConfig::default(),
            s_max: None,
        }
    }
}
