//! Regression Monte Carlo backward induction for the robust mean-variance
//! Bellman system.
//!
//! At each step and mesh point the solver estimates, with one shared block of
//! standard normal draws, the three conditional expectations of the next
//! value surrogate, the next mean surrogate and its square, minimizes the
//! adjusted objective over a grid of the confidence region and maximizes over
//! the action list. The tabled results are then regressed with GP surrogates
//! that feed the previous step.

mod exact;
mod mesh;

pub use exact::solve_exact;
pub use mesh::{generate_mesh, Mesh};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    adaptive_region, enumerate_region, full_region, mle_update, ConfidenceRegion, EstimatorState, UncertaintySet,
};
use crate::gp::{self, FitOptions, SurrogateModel};
use crate::market::{standard_normals, AugmentedState, MarketConfig, ThetaPoint};

/// Serialization format version of [`SolvedPolicy`].
pub const POLICY_FORMAT_VERSION: u32 = 1;

/// Which adversary the solver faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Parameter chosen from the data-driven confidence region.
    AdaptiveRobust,
    /// Parameter chosen from the whole uncertainty set at every step.
    StrongRobust,
    /// Finite-support instance solved by exact tree summation.
    Exact,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::AdaptiveRobust => "adaptive-robust",
            Mode::StrongRobust => "strong-robust",
            Mode::Exact => "exact",
        }
    }
}

/// Everything the Monte Carlo solver needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub market: MarketConfig,
    pub set: UncertaintySet,
    /// Estimate carried by the initial state `y0`.
    pub initial: EstimatorState,
    /// Confidence level parameter of the adaptive regions.
    pub alpha: f64,
    /// Grid points per region axis.
    pub resolution: usize,
    /// Mesh paths `N`.
    pub mesh_paths: usize,
    /// One-step Monte Carlo samples `M`.
    pub mc_samples: usize,
    pub mesh_seed: u64,
    pub mc_seed: u64,
    pub mode: Mode,
    pub fit: FitOptions,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.set.validate()?;
        if self.initial.t != 0 {
            return Err(Error::config("initial", "the initial estimate must carry t = 0"));
        }
        if !self.set.contains(&self.initial.theta()) {
            return Err(Error::config(
                "initial",
                "initial estimate lies outside the uncertainty set",
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", "must lie in (0, 1]"));
        }
        if self.resolution < 2 {
            return Err(Error::config("resolution", "need at least 2 grid points per axis"));
        }
        if self.mesh_paths < 2 {
            return Err(Error::config("mesh_paths", "need at least 2 mesh paths"));
        }
        if self.mc_samples < 1 {
            return Err(Error::config("mc_samples", "need at least one sample"));
        }
        if self.mode == Mode::Exact {
            return Err(Error::config(
                "mode",
                "exact mode runs on a discrete instance, not the Monte Carlo solver",
            ));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> AugmentedState {
        AugmentedState::new(self.market.initial_wealth, self.initial)
    }

    /// The adversary's region at `(t, c)` under the configured mode.
    pub fn region(&self, t: usize, c: &EstimatorState) -> Result<ConfidenceRegion> {
        match self.mode {
            Mode::StrongRobust => Ok(full_region(&self.set)),
            _ => adaptive_region(t, c, self.alpha, &self.set),
        }
    }

    /// Region grid at `(t, c)`.
    pub fn theta_grid(&self, t: usize, c: &EstimatorState) -> Result<Vec<ThetaPoint>> {
        enumerate_region(&self.region(t, c)?, self.resolution)
    }
}

/// The same configuration with the adversary always choosing from the whole set.
pub fn strong_robust_mode(config: &SolverConfig) -> SolverConfig {
    SolverConfig {
        mode: Mode::StrongRobust,
        ..config.clone()
    }
}

/// Monte Carlo (or exact) conditional expectations for one `(t, y, a, theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepEstimates {
    /// Estimate of `E[V_{t+1}(Y')]`.
    pub qv: f64,
    /// Estimate of `E[g_{t+1}(Y')]`.
    pub qg: f64,
    /// Estimate of `E[g_{t+1}(Y')^2]`.
    pub qg2: f64,
    pub samples: usize,
}

/// `qV - gamma (qG2 - qG^2)`.
#[inline]
pub fn objective(est: &StepEstimates, gamma: f64) -> f64 {
    est.qv - gamma * (est.qg2 - est.qg * est.qg)
}

/// Value and mean maps of the next step.
#[derive(Debug, Clone, Copy)]
pub enum Continuation<'a> {
    /// `V_T(y) = g_T(y) = w`.
    Terminal,
    Surrogates {
        value: &'a SurrogateModel,
        mean: &'a SurrogateModel,
    },
}

/// The solved max-min decision at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Tabled `V_t(y)`.
    pub value: f64,
    /// Tabled `g_t(y)`: the mean estimate at the winning pair.
    pub mean: f64,
    /// Index into the action list.
    pub action: usize,
    /// Worst-case parameter for the chosen action.
    pub theta: ThetaPoint,
}

/// Outer max over actions of the inner min over parameters. The inner min
/// keeps the first minimizer in enumeration order, the outer max keeps the
/// smallest maximizing action. Returns `(action, theta index, value, estimates)`.
pub(crate) fn select_max_min(
    actions: usize,
    thetas: usize,
    gamma: f64,
    mut est: impl FnMut(usize, usize) -> StepEstimates,
) -> (usize, usize, f64, StepEstimates) {
    assert!(actions > 0 && thetas > 0, "empty action list or parameter grid");
    let mut best: Option<(usize, usize, f64, StepEstimates)> = None;
    for a in 0..actions {
        let mut inner: Option<(usize, f64, StepEstimates)> = None;
        for k in 0..thetas {
            let e = est(a, k);
            let v = objective(&e, gamma);
            if inner.as_ref().is_none_or(|(_, iv, _)| v < *iv) {
                inner = Some((k, v, e));
            }
        }
        let (k, v, e) = inner.expect("non-empty grid");
        if best.as_ref().is_none_or(|(_, _, bv, _)| v > *bv) {
            best = Some((a, k, v, e));
        }
    }
    best.expect("non-empty action list")
}

/// Next-step samples for a fixed `(y, theta)`, reusable across actions.
struct OneStep<'a> {
    next: Continuation<'a>,
    wealth: f64,
    rate: f64,
    samples: usize,
    /// `e^z - 1 - r` per draw.
    excess: Vec<f64>,
    /// Non-wealth kernel distances per draw, `samples x n` for each surrogate.
    tails_v: Vec<f64>,
    tails_g: Vec<f64>,
    n_v: usize,
    n_g: usize,
    scratch: Vec<f64>,
}

impl<'a> OneStep<'a> {
    fn new(next: Continuation<'a>, rate: f64) -> Self {
        Self {
            next,
            wealth: 0.0,
            rate,
            samples: 0,
            excess: Vec::new(),
            tails_v: Vec::new(),
            tails_g: Vec::new(),
            n_v: 0,
            n_g: 0,
            scratch: Vec::new(),
        }
    }

    fn load(&mut self, y: &AugmentedState, theta: ThetaPoint, set: &UncertaintySet, draws: &[f64]) {
        let sigma = theta.sigma();
        self.wealth = y.wealth;
        self.samples = draws.len();
        self.excess.clear();
        self.excess
            .extend(draws.iter().map(|e| (theta.mu + sigma * e).exp() - 1.0 - self.rate));
        if let Continuation::Surrogates { value, mean } = self.next {
            self.tails_v.clear();
            self.tails_g.clear();
            for e in draws {
                let z = theta.mu + sigma * e;
                let c = mle_update(&y.estimate, z, set);
                let x = [0.0, c.c_mu, c.c_sigma2];
                let x = &x[..value.dim()];
                value.tail_distances(x, &mut self.scratch);
                self.n_v = self.scratch.len();
                self.tails_v.extend_from_slice(&self.scratch);
                mean.tail_distances(x, &mut self.scratch);
                self.n_g = self.scratch.len();
                self.tails_g.extend_from_slice(&self.scratch);
            }
        }
    }

    fn estimates(&self, a: f64) -> StepEstimates {
        let base = 1.0 + self.rate;
        let mut mv = 0.0;
        let mut mg = 0.0;
        let mut m2 = 0.0;
        for (i, ex) in self.excess.iter().enumerate() {
            let w = self.wealth * (base + a * ex);
            let (v, g) = match self.next {
                Continuation::Terminal => (w, w),
                Continuation::Surrogates { value, mean } => (
                    value.predict_split(w, &self.tails_v[i * self.n_v..(i + 1) * self.n_v]),
                    mean.predict_split(w, &self.tails_g[i * self.n_g..(i + 1) * self.n_g]),
                ),
            };
            let k = (i + 1) as f64;
            mv += (v - mv) / k;
            let d = g - mg;
            mg += d / k;
            m2 += d * (g - mg);
        }
        let var = if self.samples > 0 {
            m2 / self.samples as f64
        } else {
            0.0
        };
        StepEstimates {
            qv: mv,
            qg: mg,
            qg2: mg * mg + var,
            samples: self.samples,
        }
    }
}

/// One-step estimates at `(t, y, a, theta)` with the given standard normal draws.
/// The second moment is stored as `qG^2 + (sample variance)`, so
/// `qG2 - qG^2 >= 0` holds in floating point.
#[allow(clippy::too_many_arguments)]
pub fn one_step_estimates(
    t: usize,
    y: &AugmentedState,
    a: f64,
    theta: ThetaPoint,
    next: Continuation<'_>,
    set: &UncertaintySet,
    rate: f64,
    draws: &[f64],
) -> StepEstimates {
    debug_assert_eq!(y.estimate.t, t);
    let mut step = OneStep::new(next, rate);
    step.load(y, theta, set, draws);
    step.estimates(a)
}

/// Minimum of the objective over the region grid for a fixed action.
#[allow(clippy::too_many_arguments)]
pub fn inner_min(
    t: usize,
    y: &AugmentedState,
    a: f64,
    region: &ConfidenceRegion,
    resolution: usize,
    next: Continuation<'_>,
    set: &UncertaintySet,
    market: &MarketConfig,
    draws: &[f64],
) -> Result<(ThetaPoint, f64)> {
    let grid = enumerate_region(region, resolution)?;
    let mut step = OneStep::new(next, market.rate);
    let mut best: Option<(ThetaPoint, f64)> = None;
    debug_assert_eq!(y.estimate.t, t);
    for theta in grid {
        step.load(y, theta, set, draws);
        let v = objective(&step.estimates(a), market.gamma);
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((theta, v));
        }
    }
    best.ok_or(Error::Empty("region grid"))
}

/// Max-min decision at a single state over the given grid.
pub fn solve_point(
    t: usize,
    y: &AugmentedState,
    grid: &[ThetaPoint],
    next: Continuation<'_>,
    config: &SolverConfig,
    draws: &[f64],
) -> Decision {
    debug_assert_eq!(y.estimate.t, t);
    let actions = &config.market.actions;
    let mut step = OneStep::new(next, config.market.rate);
    let mut table = vec![None; grid.len() * actions.len()];
    for (k, theta) in grid.iter().enumerate() {
        step.load(y, *theta, &config.set, draws);
        for (a, &frac) in actions.iter().enumerate() {
            table[k * actions.len() + a] = Some(step.estimates(frac));
        }
    }
    let (a, k, value, est) = select_max_min(actions.len(), grid.len(), config.market.gamma, |a, k| {
        table[k * actions.len() + a].expect("filled")
    });
    Decision {
        value,
        mean: est.qg,
        action: a,
        theta: grid[k],
    }
}

/// Standard normal block of mesh point `index` at step `t`.
pub fn point_draws(seed: u64, t: usize, index: usize, samples: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((t as u64) << 32) | index as u64);
    standard_normals(samples, &mut rng)
}

/// Bellman step over all points of one time slice, in parallel.
pub fn bellman_step(
    t: usize,
    points: &[AugmentedState],
    config: &SolverConfig,
    next: Continuation<'_>,
) -> Result<Vec<Decision>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let grid = config.theta_grid(t, &y.estimate)?;
            let draws = point_draws(config.mc_seed, t, i, config.mc_samples);
            Ok(solve_point(t, y, &grid, next, config, &draws))
        })
        .collect()
}

/// GP surrogates fitted on one time slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSurrogates {
    pub value: SurrogateModel,
    pub mean: SurrogateModel,
    /// Regression of the action values; predictions are snapped back to the list.
    pub action: SurrogateModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStep {
    pub t: usize,
    pub points: Vec<AugmentedState>,
    pub decisions: Vec<Decision>,
    /// Absent at `t = 0`, whose only state is `y0`.
    pub surrogates: Option<StepSurrogates>,
}

/// Output of [`solve_backward`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolvedPolicy {
    pub version: u32,
    pub mode: Mode,
    pub config: SolverConfig,
    pub mesh_seed: u64,
    /// Decision at `y0`.
    pub root: Decision,
    pub steps: Vec<PolicyStep>,
}

impl SolvedPolicy {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Action index used at `(t, y)`: the root decision at `t = 0`, otherwise
    /// the action surrogate snapped to the nearest admissible action.
    pub fn action_index(&self, t: usize, y: &AugmentedState) -> usize {
        if t == 0 {
            return self.root.action;
        }
        let s = self.steps[t].surrogates.as_ref().expect("surrogates exist for t >= 1");
        let raw = s.action.predict(y.features(&self.config.set).as_slice());
        self.config.market.snap_action(raw)
    }

    /// Value surrogate at `(t, y)`; `V_T = w`.
    pub fn value_at(&self, t: usize, y: &AugmentedState) -> f64 {
        if t >= self.horizon() {
            return y.wealth;
        }
        if t == 0 {
            return self.root.value;
        }
        let s = self.steps[t].surrogates.as_ref().expect("surrogates exist for t >= 1");
        s.value.predict(y.features(&self.config.set).as_slice())
    }
}

fn fit_slice(
    t: usize,
    points: &[AugmentedState],
    decisions: &[Decision],
    config: &SolverConfig,
) -> Result<StepSurrogates> {
    let inputs: Vec<Vec<f64>> = points
        .iter()
        .map(|y| y.features(&config.set).as_slice().to_vec())
        .collect();
    let values: Vec<f64> = decisions.iter().map(|d| d.value).collect();
    let means: Vec<f64> = decisions.iter().map(|d| d.mean).collect();
    let actions: Vec<f64> = decisions.iter().map(|d| config.market.actions[d.action]).collect();
    Ok(StepSurrogates {
        value: gp::fit(&inputs, &values, &config.fit).map_err(|e| e.at_step(t, "value surrogate"))?,
        mean: gp::fit(&inputs, &means, &config.fit).map_err(|e| e.at_step(t, "mean surrogate"))?,
        action: gp::fit(&inputs, &actions, &config.fit).map_err(|e| e.at_step(t, "action surrogate"))?,
    })
}

/// Backward recursion from `t = T-1` to `0` over the mesh.
pub fn solve_backward(mesh: &Mesh, config: &SolverConfig) -> Result<SolvedPolicy> {
    config.validate()?;
    let horizon = config.market.horizon;
    if mesh.points.len() != horizon {
        return Err(Error::Incompatible(format!(
            "mesh covers {} steps but the horizon is {horizon}",
            mesh.points.len()
        )));
    }
    let y0 = config.initial_state();
    let mut steps: Vec<PolicyStep> = Vec::with_capacity(horizon);
    let mut root = None;
    for t in (0..horizon).rev() {
        let next = match steps.last().and_then(|s| s.surrogates.as_ref()) {
            Some(s) => Continuation::Surrogates {
                value: &s.value,
                mean: &s.mean,
            },
            None => Continuation::Terminal,
        };
        let points = if t == 0 { vec![y0] } else { mesh.points[t].clone() };
        let decisions = bellman_step(t, &points, config, next)?;
        let surrogates = if t == 0 {
            root = Some(decisions[0]);
            None
        } else {
            Some(fit_slice(t, &points, &decisions, config)?)
        };
        steps.push(PolicyStep {
            t,
            points,
            decisions,
            surrogates,
        });
    }
    steps.reverse();
    Ok(SolvedPolicy {
        version: POLICY_FORMAT_VERSION,
        mode: config.mode,
        config: config.clone(),
        mesh_seed: mesh.seed,
        root: root.expect("horizon >= 1"),
        steps,
    })
}
