use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SolverConfig;
use crate::error::{Error, Result};
use crate::estimation::mle_update;
use crate::market::{wealth_step_unchecked, AugmentedState, ThetaPoint};

/// Random (non-gridded) states of `Y = (W, C)` for every `t < T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub seed: u64,
    pub paths: usize,
    /// `points[t][i]` is path `i` at time `t`.
    pub points: Vec<Vec<AugmentedState>>,
}

/// Simulates `paths` trajectories from `y0`. Each path draws its own
/// parameter uniformly from the uncertainty set and picks a uniformly random
/// action at every step.
pub fn generate_mesh(config: &SolverConfig, paths: usize, seed: u64) -> Result<Mesh> {
    config.validate()?;
    if paths < 2 {
        return Err(Error::config("mesh_paths", "need at least 2 mesh paths"));
    }
    let horizon = config.market.horizon;
    let (mu_lo, mu_hi) = config.set.mu_bounds();
    let (s_lo, s_hi) = config.set.sigma2_bounds();
    let actions = &config.market.actions;
    let y0 = config.initial_state();

    let trajectories: Vec<Vec<AugmentedState>> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let theta = ThetaPoint {
                mu: rng.random_range(mu_lo..=mu_hi),
                sigma2: rng.random_range(s_lo..=s_hi),
            };
            let sigma = theta.sigma();
            let mut y = y0;
            let mut path = Vec::with_capacity(horizon);
            path.push(y);
            for _ in 1..horizon {
                let a = actions[rng.random_range(0..actions.len())];
                let eps: f64 = rng.sample(StandardNormal);
                let z = theta.mu + sigma * eps;
                y = AugmentedState {
                    wealth: wealth_step_unchecked(y.wealth, a, z, config.market.rate),
                    estimate: mle_update(&y.estimate, z, &config.set),
                };
                path.push(y);
            }
            path
        })
        .collect();

    let points = (0..horizon)
        .map(|t| trajectories.iter().map(|p| p[t]).collect())
        .collect();
    Ok(Mesh { seed, paths, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::Mode;
    use crate::estimation::UncertaintySet;
    use crate::gp::FitOptions;
    use crate::market::{uniform_actions, MarketConfig};

    fn config(actions: Vec<f64>) -> SolverConfig {
        let set = UncertaintySet::mean_variance(0.000192, 0.0096, 0.0069_f64.powi(2), 0.1109_f64.powi(2)).unwrap();
        SolverConfig {
            market: MarketConfig {
                rate: 0.0003846,
                horizon: 8,
                initial_wealth: 100.0,
                gamma: 0.2,
                actions,
            },
            set,
            initial: set.initial_estimate(0.002308, Some(0.0347 * 0.0347)).unwrap(),
            alpha: 0.1,
            resolution: 7,
            mesh_paths: 30,
            mc_samples: 10,
            mesh_seed: 3,
            mc_seed: 4,
            mode: Mode::AdaptiveRobust,
            fit: FitOptions::default(),
        }
    }

    #[test]
    fn shares_initial_state_and_respects_invariants() {
        let cfg = config(uniform_actions(11));
        let mesh = generate_mesh(&cfg, 30, 3).unwrap();
        assert_eq!(mesh.points.len(), 8);
        assert!(mesh.points[0].iter().all(|y| *y == cfg.initial_state()));
        for (t, slice) in mesh.points.iter().enumerate() {
            assert_eq!(slice.len(), 30);
            for y in slice {
                assert!(y.wealth > 0.0);
                assert!(cfg.set.contains(&y.estimate.theta()));
                assert_eq!(y.estimate.t, t);
            }
        }
    }

    #[test]
    fn riskless_mesh_compounds() {
        let cfg = config(vec![0.0]);
        let mesh = generate_mesh(&cfg, 5, 1).unwrap();
        for (t, slice) in mesh.points.iter().enumerate() {
            let mut expect = 100.0;
            for _ in 0..t {
                expect *= 1.0 + 0.0003846;
            }
            assert!(slice.iter().all(|y| y.wealth == expect));
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let cfg = config(uniform_actions(3));
        assert_eq!(generate_mesh(&cfg, 10, 9).unwrap(), generate_mesh(&cfg, 10, 9).unwrap());
        assert_ne!(
            generate_mesh(&cfg, 10, 9).unwrap(),
            generate_mesh(&cfg, 10, 10).unwrap()
        );
        assert!(generate_mesh(&cfg, 1, 9).is_err());
    }
}
