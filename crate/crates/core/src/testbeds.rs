//! Reference systems used by the examples, tests and harness scenarios.

use crate::lds::SystemModel;
use crate::linalg::Mat;

/// `A = B = 1`, unit noise: a noisily observed Gaussian random walk.
pub fn scalar_random_walk(horizon: usize) -> SystemModel {
    SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 1.0, horizon).expect("valid")
}

/// `A = 0.5`, `B = 1`, unit noise: strictly stable scalar system.
pub fn stable_scalar(horizon: usize) -> SystemModel {
    SystemModel::scalar(0.5, 1.0, 1.0, 1.0, 1.0, horizon).expect("valid")
}

/// Cyclic shift of `d` coordinates observed through the first one.
pub fn coordinate_cycle(d: usize, horizon: usize) -> SystemModel {
    let mut a = Mat::zeros(d, d);
    for i in 0..d {
        a[(i, (i + d - 1) % d)] = 1.0;
    }
    let mut b = Mat::zeros(1, d);
    b[(0, 0)] = 1.0;
    SystemModel::new(a, b, 1.0, 1.0, 1.0, horizon).expect("valid")
}

/// Swap of the first two coordinates feeding a decaying third one,
/// observed through coordinates 1 and 3. The third axis is only visible
/// through the first few observations after any time point.
pub fn hard_subspace(horizon: usize) -> SystemModel {
    let a = Mat::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.5]);
    let b = Mat::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    SystemModel::new(a, b, 1.0, 1.0, 1.0, horizon).expect("valid")
}

/// `A(x, y) = (0, x)`, `B = I`: two conflicting looks at the first
/// coordinate of the initial state and none afterwards.
pub fn shift_pair(horizon: usize) -> SystemModel {
    let a = Mat::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
    SystemModel::new(a, Mat::identity(2, 2), 1.0, 1.0, 1.0, horizon).expect("valid")
}

/// `A = 0`, `B = I_d`, unit noise: independent draws each step.
pub fn memoryless(d: usize, horizon: usize) -> SystemModel {
    SystemModel::new(Mat::zeros(d, d), Mat::identity(d, d), 1.0, 1.0, 1.0, horizon).expect("valid")
}

/// Every built-in example system at a common horizon.
pub fn builtin_suite(horizon: usize) -> Vec<(&'static str, SystemModel)> {
    vec![
        ("scalar_random_walk", scalar_random_walk(horizon)),
        ("stable_scalar", stable_scalar(horizon)),
        ("coordinate_cycle_3", coordinate_cycle(3, horizon)),
        ("hard_subspace", hard_subspace(horizon)),
        ("shift_pair", shift_pair(horizon)),
        ("memoryless_4", memoryless(4, horizon)),
    ]
}
