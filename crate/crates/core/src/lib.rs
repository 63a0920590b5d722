//! Corruption-robust state estimation for linear dynamical systems.
//!
//! Observations of a linear-Gaussian system are handed to an adversary at
//! random time steps. The crate provides oracle baselines (Kalman filter and
//! smoother), robust offline smoothers built from explicit constraint
//! programs, a truncated Wiener filter for strictly stable systems, a
//! two-stage online predictor and an experiment harness.
//!
//! ```
//! use rlqe::lds::{simulate, apply_corruptions, AdversaryStrategy, SystemModel};
//! use rlqe::kalman::{clean_nll, smoother};
//!
//! let model = SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 1.0, 64).unwrap();
//! let clean = simulate(&model, 7).unwrap();
//! let ep = apply_corruptions(&clean, 0.1, &AdversaryStrategy::Spike { scale: 30.0 }, 7).unwrap();
//! let oracle = smoother(&model, &ep.y, &ep.a_star).unwrap();
//! assert!((clean_nll(&oracle.x_hat, &ep).unwrap() - oracle.objective).abs() < 1e-9);
//! ```

pub mod error;
pub mod harness;
pub mod io;
pub mod kalman;
pub mod lds;
pub mod linalg;
pub mod obs;
pub mod online;
pub mod robust;
pub mod testbeds;
pub mod wiener;

pub use error::{Result, RlqeError};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/observability.md")]
    mod observability {}
    #[doc = include_str!("../../../book/src/robust.md")]
    mod robust {}
    #[doc = include_str!("../../../book/src/online.md")]
    mod online {}
    #[doc = include_str!("../../../book/src/wiener.md")]
    mod wiener {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
