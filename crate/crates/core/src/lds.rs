//! System model, trajectory simulation and the random-location corruption
//! model with its adversaries.

use std::fmt;
use std::sync::Arc;

use nalgebra::Cholesky;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlqeError};
use crate::linalg::{is_finite, mat_serde, Mat, Trajectory, Vect};

/// Independent randomness sources derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Noise = 0,
    Mask = 1,
    Adversary = 2,
    Initial = 3,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, std: f64) -> Vect {
    Vect::from_fn(dim, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Time-invariant linear dynamical system with isotropic Gaussian noise:
/// `x_i = A x_{i-1} + w_i`, `y_i = B x_i + v_i`, `x_0 ~ N(0, R^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    #[serde(with = "mat_serde")]
    pub a: Mat,
    #[serde(with = "mat_serde")]
    pub b: Mat,
    pub sigma2: f64,
    pub tau2: f64,
    pub r2: f64,
    pub horizon: usize,
}

impl SystemModel {
    pub fn new(a: Mat, b: Mat, sigma2: f64, tau2: f64, r2: f64, horizon: usize) -> Result<Self> {
        let m = Self {
            a,
            b,
            sigma2,
            tau2,
            r2,
            horizon,
        };
        m.validate()?;
        Ok(m)
    }

    /// Scalar system with `A = a`, `B = b`.
    pub fn scalar(a: f64, b: f64, sigma2: f64, tau2: f64, r2: f64, horizon: usize) -> Result<Self> {
        Self::new(
            Mat::from_element(1, 1, a),
            Mat::from_element(1, 1, b),
            sigma2,
            tau2,
            r2,
            horizon,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.a.nrows();
        if d == 0 || self.a.ncols() != d {
            return Err(RlqeError::InvalidInput("A must be square with d >= 1".into()));
        }
        if self.b.nrows() == 0 || self.b.ncols() != d {
            return Err(RlqeError::InvalidInput("B must be m x d with m >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(RlqeError::InvalidInput("horizon T must be >= 1".into()));
        }
        if !is_finite(&self.a) || !is_finite(&self.b) {
            return Err(RlqeError::InvalidInput("non-finite matrix entry".into()));
        }
        for (name, v) in [("sigma2", self.sigma2), ("tau2", self.tau2), ("R2", self.r2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(RlqeError::InvalidInput(format!("{name} must be finite and positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }

    /// Same dynamics with all noise scales multiplied by `c` (variances by `c^2`).
    pub fn rescaled_noise(&self, c: f64) -> Self {
        Self {
            sigma2: self.sigma2 * c * c,
            tau2: self.tau2 * c * c,
            r2: self.r2 * c * c,
            ..self.clone()
        }
    }
}

/// Distribution of the initial state.
#[derive(Debug, Clone)]
pub enum InitialState {
    /// `N(0, R^2 I)`.
    Prior,
    /// `N(0, Sigma)`, e.g. the stationary covariance of a stable system.
    Gaussian(Mat),
}

/// One simulated run: ground truth, clean observations, the corruption mask
/// and what the learner actually receives.
///
/// `w_star` is indexed by time like `x_star`; column 0 is unused and held
/// at zero since `x_0` is drawn from the prior rather than by a step.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeData {
    pub model: SystemModel,
    pub seed: u64,
    pub x_star: Trajectory,
    pub y_star: Trajectory,
    pub w_star: Trajectory,
    pub v_star: Trajectory,
    pub a_star: Vec<bool>,
    pub y: Trajectory,
}

impl EpisodeData {
    pub fn horizon(&self) -> usize {
        self.x_star.len()
    }

    pub fn corrupted_indices(&self) -> Vec<usize> {
        (0..self.a_star.len()).filter(|&i| !self.a_star[i]).collect()
    }

    pub fn corruption_fraction(&self) -> f64 {
        let n = self.a_star.len().max(1);
        self.a_star.iter().filter(|a| !**a).count() as f64 / n as f64
    }

    pub fn is_clean(&self) -> bool {
        self.a_star.iter().all(|a| *a)
    }
}

pub fn simulate(model: &SystemModel, seed: u64) -> Result<EpisodeData> {
    simulate_with(model, seed, &InitialState::Prior)
}

pub fn simulate_with(model: &SystemModel, seed: u64, initial: &InitialState) -> Result<EpisodeData> {
    model.validate()?;
    let d = model.state_dim();
    let m = model.obs_dim();
    let t_len = model.horizon;
    let sigma = model.sigma2.sqrt();
    let tau = model.tau2.sqrt();

    let mut init_rng = rng_for(seed, Stream::Initial);
    let x0 = match initial {
        InitialState::Prior => gaussian_vec(&mut init_rng, d, model.r2.sqrt()),
        InitialState::Gaussian(cov) => {
            if cov.nrows() != d || cov.ncols() != d {
                return Err(RlqeError::DimensionMismatch("initial covariance must be d x d".into()));
            }
            let chol = Cholesky::new(cov.clone() + Mat::identity(d, d) * 1e-15)
                .ok_or_else(|| RlqeError::InvalidInput("initial covariance not positive definite".into()))?;
            chol.l() * gaussian_vec(&mut init_rng, d, 1.0)
        }
    };

    let mut rng = rng_for(seed, Stream::Noise);
    let mut x_star = Trajectory::zeros(d, t_len);
    let mut w_star = Trajectory::zeros(d, t_len);
    let mut v_star = Trajectory::zeros(m, t_len);
    let mut y_star = Trajectory::zeros(m, t_len);
    let mut x = x0;
    for i in 0..t_len {
        if i > 0 {
            let w = gaussian_vec(&mut rng, d, sigma);
            x = &model.a * &x + &w;
            w_star.set(i, &w);
        }
        let v = gaussian_vec(&mut rng, m, tau);
        let y = &model.b * &x + &v;
        x_star.set(i, &x);
        v_star.set(i, &v);
        y_star.set(i, &y);
    }
    Ok(EpisodeData {
        model: model.clone(),
        seed,
        x_star,
        y: y_star.clone(),
        y_star,
        w_star,
        v_star,
        a_star: vec![true; t_len],
    })
}

/// `A^t x0 + sum_{j=1}^t A^{t-j} w_j`, where `w` is time-indexed (column
/// `j` holds `w_j`; column 0 is ignored).
pub fn unroll_state(model: &SystemModel, x0: &Vect, w: &Trajectory, t: usize) -> Result<Vect> {
    let d = model.state_dim();
    if x0.len() != d || w.dim() != d {
        return Err(RlqeError::DimensionMismatch("state and noise must have dimension d".into()));
    }
    if t >= w.len().max(1) && t > 0 {
        return Err(RlqeError::DimensionMismatch(format!(
            "need w_1..w_{t} but only {} steps supplied",
            w.len().saturating_sub(1)
        )));
    }
    // Horner form: ((A x0 + w_1) A + w_2) ...
    let mut x = x0.clone();
    for j in 1..=t {
        x = &model.a * &x + w.step(j);
    }
    Ok(x)
}

/// Callback contract for custom adversaries. The adversary sees the whole
/// episode and returns one replacement observation per corrupted index, in
/// the order given. Nothing else can be modified.
pub trait Adversary: Send + Sync {
    fn corrupt(&self, episode: &EpisodeData, corrupted: &[usize], rng: &mut dyn RngCore) -> Vec<Vect>;
}

/// Built-in corruption strategies.
#[derive(Clone, Default)]
pub enum AdversaryStrategy {
    /// Corrupted steps keep their clean value (mask still records them).
    #[default]
    None,
    /// Adds a random-direction vector of norm `scale`.
    Spike { scale: f64 },
    /// Pushes each coordinate away from the origin by `scale * sqrt(T)`,
    /// the attack on a random walk that defeats norm thresholding.
    RandomWalkAttack { scale: f64 },
    /// Replaces late observations with ones generated by an independent
    /// trajectory that branches off the true one at `T - 2 eta T`.
    /// With `model_violating` the adversary also picks which tail steps are
    /// corrupted, which breaks the random-location model.
    ParallelPathAttack { model_violating: bool },
    /// `B x_i + tau * scale * t_df` per coordinate: heavy-tailed noise
    /// replacing the Gaussian observation noise.
    HeavyTail { df: f64, scale: f64 },
    /// Fresh `N(0, variance I)` draws independent of the trajectory.
    GaussianReplacement { variance: f64 },
    Custom(Arc<dyn Adversary>),
}

impl fmt::Debug for AdversaryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "None"),
            Self::Spike { scale } => write!(f, "Spike {{ scale: {scale} }}"),
            Self::RandomWalkAttack { scale } => write!(f, "RandomWalkAttack {{ scale: {scale} }}"),
            Self::ParallelPathAttack { model_violating } => {
                write!(f, "ParallelPathAttack {{ model_violating: {model_violating} }}")
            }
            Self::HeavyTail { df, scale } => write!(f, "HeavyTail {{ df: {df}, scale: {scale} }}"),
            Self::GaussianReplacement { variance } => write!(f, "GaussianReplacement {{ variance: {variance} }}"),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Serializable description of a built-in strategy (configs, CLI).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversarySpec {
    None,
    Spike { scale: f64 },
    RandomWalkAttack { scale: f64 },
    ParallelPathAttack {
        #[serde(default)]
        model_violating: bool,
    },
    HeavyTail { df: f64, scale: f64 },
    GaussianReplacement { variance: f64 },
}

impl From<&AdversarySpec> for AdversaryStrategy {
    fn from(s: &AdversarySpec) -> Self {
        match *s {
            AdversarySpec::None => Self::None,
            AdversarySpec::Spike { scale } => Self::Spike { scale },
            AdversarySpec::RandomWalkAttack { scale } => Self::RandomWalkAttack { scale },
            AdversarySpec::ParallelPathAttack { model_violating } => Self::ParallelPathAttack { model_violating },
            AdversarySpec::HeavyTail { df, scale } => Self::HeavyTail { df, scale },
            AdversarySpec::GaussianReplacement { variance } => Self::GaussianReplacement { variance },
        }
    }
}

fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Flips an independent `Ber(eta)` corruption coin per step and lets the
/// adversary rewrite the delivered observation at corrupted steps only.
pub fn apply_corruptions(
    episode: &EpisodeData,
    eta: f64,
    adversary: &AdversaryStrategy,
    seed: u64,
) -> Result<EpisodeData> {
    if !(0.0..0.5).contains(&eta) {
        if eta >= 0.5 {
            return Err(RlqeError::BreakdownPoint(eta));
        }
        return Err(RlqeError::InvalidInput(format!("eta must be in [0, 0.5), got {eta}")));
    }
    if !episode.is_clean() {
        return Err(RlqeError::InvalidInput("episode is already corrupted".into()));
    }
    let t_len = episode.horizon();
    let mut out = episode.clone();

    let mut mask_rng = rng_for(seed, Stream::Mask);
    let coin = Bernoulli::new(eta).map_err(|e| RlqeError::InvalidInput(e.to_string()))?;
    let mut a_star: Vec<bool> = (0..t_len).map(|_| !coin.sample(&mut mask_rng)).collect();

    let mut adv_rng = rng_for(seed, Stream::Adversary);
    if let AdversaryStrategy::ParallelPathAttack { model_violating: true } = adversary {
        // Adversary-chosen locations: eta*T steps from the last 2*eta*T.
        let tail = ((2.0 * eta * t_len as f64).ceil() as usize).min(t_len);
        let start = t_len - tail;
        let count = ((eta * t_len as f64).round() as usize).min(tail);
        a_star = vec![true; t_len];
        let chosen = rand::seq::index::sample(&mut adv_rng, tail, count);
        for k in chosen.iter() {
            a_star[start + k] = false;
        }
    }
    out.a_star = a_star;
    let corrupted = out.corrupted_indices();
    if corrupted.is_empty() {
        return Ok(out);
    }
    let replacements = corruption_values(&out, adversary, &corrupted, eta, &mut adv_rng)?;
    for (&i, v) in corrupted.iter().zip(replacements) {
        if v.len() != out.model.obs_dim() {
            return Err(RlqeError::DimensionMismatch("adversary returned wrong observation dimension".into()));
        }
        out.y.set(i, &v);
    }
    Ok(out)
}

fn corruption_values(
    ep: &EpisodeData,
    adversary: &AdversaryStrategy,
    corrupted: &[usize],
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vect>> {
    let model = &ep.model;
    let m = model.obs_dim();
    let t_len = ep.horizon();
    let vals = match adversary {
        AdversaryStrategy::None => corrupted.iter().map(|&i| ep.y_star.step(i)).collect(),
        AdversaryStrategy::Spike { scale } => corrupted
            .iter()
            .map(|&i| {
                let mut dir = gaussian_vec(rng, m, 1.0);
                let n = dir.norm();
                if n > 0.0 {
                    dir /= n;
                }
                ep.y_star.step(i) + dir * *scale
            })
            .collect(),
        AdversaryStrategy::RandomWalkAttack { scale } => {
            let shift = scale * (t_len as f64).sqrt();
            corrupted
                .iter()
                .map(|&i| ep.y_star.step(i).map(|v| v + sign(v) * shift))
                .collect()
        }
        AdversaryStrategy::ParallelPathAttack { .. } => {
            let tail = ((2.0 * eta * t_len as f64).ceil() as usize).min(t_len);
            let branch = t_len - tail;
            let d = model.state_dim();
            let sigma = model.sigma2.sqrt();
            let tau = model.tau2.sqrt();
            // Fake trajectory shares the true state up to the branch point.
            let mut fake = Trajectory::zeros(d, t_len);
            let mut x = ep.x_star.step(branch.min(t_len - 1));
            for i in 0..t_len {
                if i <= branch {
                    fake.set(i, &ep.x_star.step(i));
                } else {
                    x = &model.a * &x + gaussian_vec(rng, d, sigma);
                    fake.set(i, &x);
                }
            }
            corrupted
                .iter()
                .map(|&i| {
                    if i > branch {
                        &model.b * fake.step(i) + gaussian_vec(rng, m, tau)
                    } else {
                        ep.y_star.step(i)
                    }
                })
                .collect()
        }
        AdversaryStrategy::HeavyTail { df, scale } => {
            let dist = StudentT::new(*df).map_err(|e| RlqeError::InvalidInput(e.to_string()))?;
            let tau = model.tau2.sqrt();
            corrupted
                .iter()
                .map(|&i| {
                    let noise = Vect::from_fn(m, |_, _| dist.sample(rng));
                    &model.b * ep.x_star.step(i) + noise * (tau * scale)
                })
                .collect()
        }
        AdversaryStrategy::GaussianReplacement { variance } => {
            corrupted.iter().map(|_| gaussian_vec(rng, m, variance.sqrt())).collect()
        }
        AdversaryStrategy::Custom(adv) => {
            let vals = adv.corrupt(ep, corrupted, rng);
            if vals.len() != corrupted.len() {
                return Err(RlqeError::InvalidInput(
                    "custom adversary must return one value per corrupted index".into(),
                ));
            }
            vals
        }
    };
    Ok(vals)
}
