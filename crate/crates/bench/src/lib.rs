//! Fixtures shared by the benchmarks.

use robustmv::bellman::{Mode, SolverConfig};
use robustmv::market::{uniform_actions, AugmentedState, MarketConfig};
use robustmv::{FitOptions, UncertaintySet};

/// Case II desk configuration (two-dimensional estimate, 7 x 7 region grid).
pub fn case2_config(horizon: usize) -> SolverConfig {
    let set = UncertaintySet::mean_variance(0.000192, 0.0096, 0.0069f64.powi(2), 0.1109f64.powi(2)).expect("valid set");
    SolverConfig {
        market: MarketConfig {
            rate: 0.0003846,
            horizon,
            initial_wealth: 100.0,
            gamma: 0.2,
            actions: uniform_actions(11),
        },
        initial: set
            .initial_estimate(0.002308, Some(0.0347f64.powi(2)))
            .expect("inside the set"),
        set,
        alpha: 0.1,
        resolution: 7,
        mesh_paths: 100,
        mc_samples: 50,
        mesh_seed: 1,
        mc_seed: 2,
        mode: Mode::AdaptiveRobust,
        fit: FitOptions::default(),
    }
}

/// Feature vectors of a mesh slice.
pub fn features(points: &[AugmentedState], config: &SolverConfig) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|y| y.features(&config.set).as_slice().to_vec())
        .collect()
}

/// A smooth value-like target over `(w, c_mu, c_sigma2)`.
pub fn smooth_target(x: &[f64]) -> f64 {
    x[0] * (1.0 + 5.0 * x[1]) - 0.2 * x[0] * x.get(2).copied().unwrap_or(0.0)
}
