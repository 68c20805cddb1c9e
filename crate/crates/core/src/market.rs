//! Controlled market dynamics: one risky asset with Gaussian log-returns and a
//! risk-free account, the mean-variance objective pair, and the augmented
//! transition that couples wealth with the running parameter estimate.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{mle_update, EstimatorState, UncertaintySet};

/// Market and preference parameters shared by every solver mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    /// Per-period risk-free rate.
    pub rate: f64,
    /// Number of trading periods.
    pub horizon: usize,
    pub initial_wealth: f64,
    /// Risk-aversion weight on the terminal variance.
    pub gamma: f64,
    /// Admissible risky-asset fractions, strictly increasing in `[0, 1]`.
    pub actions: Vec<f64>,
}

impl MarketConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("market.horizon", "must be at least 1"));
        }
        if !(self.initial_wealth > 0.0) || !self.initial_wealth.is_finite() {
            return Err(Error::config("market.initial_wealth", "must be positive"));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("market.gamma", "must be non-negative"));
        }
        if !(self.rate > -1.0) || !self.rate.is_finite() {
            return Err(Error::config("market.rate", "must exceed -1"));
        }
        validate_actions(&self.actions)
    }

    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec { gamma: self.gamma }
    }

    /// Index of the admissible action nearest to `value`; ties go to the smaller action.
    pub fn snap_action(&self, value: f64) -> usize {
        snap_to_grid(&self.actions, value)
    }
}

pub(crate) fn validate_actions(actions: &[f64]) -> Result<()> {
    if actions.is_empty() {
        return Err(Error::config("market.actions", "action list is empty"));
    }
    if actions.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::config("market.actions", "every action must lie in [0, 1]"));
    }
    if actions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("market.actions", "actions must be strictly increasing"));
    }
    Ok(())
}

/// `count` equally spaced fractions covering `[0, 1]`.
pub fn uniform_actions(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

pub(crate) fn snap_to_grid(grid: &[f64], value: f64) -> usize {
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for (i, &a) in grid.iter().enumerate() {
        let gap = (a - value).abs();
        if gap < best_gap {
            best = i;
            best_gap = gap;
        }
    }
    best
}

/// A model-parameter hypothesis for the log-return law `N(mu, sigma2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaPoint {
    pub mu: f64,
    pub sigma2: f64,
}

impl ThetaPoint {
    pub fn new(mu: f64, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !mu.is_finite() || !sigma2.is_finite() {
            return Err(Error::Domain(format!("invalid theta ({mu}, {sigma2})")));
        }
        Ok(Self { mu, sigma2 })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Log-return obtained from a standard normal draw.
    #[inline]
    pub fn log_return(&self, eps: f64) -> f64 {
        self.mu + self.sigma() * eps
    }
}

/// Mean-variance objective pair `F(w) = w - gamma w^2`, `G(m) = gamma m^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub gamma: f64,
}

impl ObjectiveSpec {
    #[inline]
    pub fn terminal(&self, w: f64) -> f64 {
        w - self.gamma * w * w
    }

    #[inline]
    pub fn mean_map(&self, m: f64) -> f64 {
        self.gamma * m * m
    }
}

/// Wealth after one period when a fraction `a` sits in the risky asset and
/// the log-return is `z`.
pub fn wealth_step(w: f64, a: f64, z: f64, r: f64) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::Domain(format!("wealth must be positive, got {w}")));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Domain(format!("action must lie in [0, 1], got {a}")));
    }
    Ok(wealth_step_unchecked(w, a, z, r))
}

#[inline]
pub(crate) fn wealth_step_unchecked(w: f64, a: f64, z: f64, r: f64) -> f64 {
    w * (1.0 + r + a * (z.exp() - 1.0 - r))
}

/// Draws `count` log-returns `mu + sqrt(sigma2) * eps` from the supplied generator.
pub fn sample_log_returns<R: Rng + ?Sized>(theta: ThetaPoint, count: usize, rng: &mut R) -> Vec<f64> {
    let sigma = theta.sigma();
    (0..count)
        .map(|_| {
            let eps: f64 = rng.sample(StandardNormal);
            theta.mu + sigma * eps
        })
        .collect()
}

/// Standard normal draws, the raw material for common random numbers.
pub fn standard_normals<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| rng.sample(StandardNormal)).collect()
}

/// Solver state `y = (w, c)`: wealth plus the running projected estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub wealth: f64,
    pub estimate: EstimatorState,
}

impl AugmentedState {
    pub fn new(wealth: f64, estimate: EstimatorState) -> Self {
        Self { wealth, estimate }
    }

    /// Regression features: `(w, mu_hat)` when the variance is known, `(w, mu_hat, sigma2_hat)` otherwise.
    pub fn features(&self, set: &UncertaintySet) -> Features {
        let mut out = Features::default();
        self.write_features(set, &mut out);
        out
    }

    #[inline]
    pub(crate) fn write_features(&self, set: &UncertaintySet, out: &mut Features) {
        out.len = set.state_dim();
        out.values[0] = self.wealth;
        out.values[1] = self.estimate.c_mu;
        out.values[2] = self.estimate.c_sigma2;
    }
}

/// Fixed-capacity feature vector (at most three coordinates).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Features {
    values: [f64; 3],
    len: usize,
}

impl Features {
    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.len]
    }
}

/// The augmented map: wealth update paired with the learning recursion.
/// The estimate component never depends on `a` or `w`.
pub fn augmented_step(
    t: usize,
    y: &AugmentedState,
    a: f64,
    z: f64,
    r: f64,
    set: &UncertaintySet,
) -> Result<AugmentedState> {
    if y.estimate.t != t {
        return Err(Error::Domain(format!(
            "state carries {} observations but the step is at t={t}",
            y.estimate.t
        )));
    }
    let wealth = wealth_step(y.wealth, a, z, r)?;
    Ok(AugmentedState {
        wealth,
        estimate: mle_update(&y.estimate, z, set),
    })
}
