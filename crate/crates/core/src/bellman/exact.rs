use super::{select_max_min, StepEstimates};
use crate::error::Result;
use crate::market::wealth_step_unchecked;
use crate::oracle::{Branch, DiscreteInstance, ExactTables, NodeKey, NodeRecord};

struct Level {
    keys: Vec<NodeKey>,
    wealth: Vec<f64>,
    /// `(action, theta, outcome, probability)` in child order, shared by every node of the level.
    branches: Vec<(usize, usize, usize, f64)>,
    /// Start of each `(action, region position)` block inside `branches`.
    blocks: Vec<(usize, usize)>,
}

/// Bellman recursion with surrogates replaced by exact tabulation and Monte
/// Carlo replaced by exact sums over the supports. Shares the max-min
/// selection and objective with the Monte Carlo solver.
pub fn solve_exact(instance: &DiscreteInstance) -> Result<ExactTables> {
    instance.validate()?;
    let horizon = instance.horizon();
    let mut levels: Vec<Level> = Vec::with_capacity(horizon + 1);
    let mut keys = vec![Vec::new()];
    let mut wealth = vec![instance.initial_wealth];
    for t in 0..=horizon {
        let mut branches = Vec::new();
        let mut blocks = Vec::new();
        if t < horizon {
            for ai in 0..instance.actions.len() {
                for &j in &instance.regions[t] {
                    let start = branches.len();
                    for (k, &(_, p)) in instance.noise[j].iter().enumerate() {
                        branches.push((ai, j, k, p));
                    }
                    blocks.push((start, branches.len()));
                }
            }
        }
        let level = Level {
            keys,
            wealth,
            branches,
            blocks,
        };
        let mut next_keys = Vec::new();
        let mut next_wealth = Vec::new();
        if t < horizon {
            for (key, &w) in level.keys.iter().zip(&level.wealth) {
                for &(ai, j, k, _) in &level.branches {
                    let mut child = key.clone();
                    child.push(Branch {
                        action: ai,
                        theta: j,
                        outcome: k,
                    });
                    next_keys.push(child);
                    let z = instance.noise[j][k].0;
                    next_wealth.push(wealth_step_unchecked(w, instance.actions[ai], z, instance.rate));
                }
            }
        }
        levels.push(level);
        keys = next_keys;
        wealth = next_wealth;
    }

    let mut tables = ExactTables::default();
    let mut values = levels[horizon].wealth.clone();
    let mut means = values.clone();
    for t in (0..horizon).rev() {
        let level = &levels[t];
        let width = level.branches.len();
        let regions = &instance.regions[t];
        let mut v_here = Vec::with_capacity(level.keys.len());
        let mut g_here = Vec::with_capacity(level.keys.len());
        for (i, key) in level.keys.iter().enumerate() {
            let child_v = &values[i * width..(i + 1) * width];
            let child_g = &means[i * width..(i + 1) * width];
            let (ai, pos, value, est) =
                select_max_min(instance.actions.len(), regions.len(), instance.gamma, |a, pos| {
                    let (lo, hi) = level.blocks[a * regions.len() + pos];
                    let (mut qv, mut qg, mut qg2) = (0.0, 0.0, 0.0);
                    for c in lo..hi {
                        let p = level.branches[c].3;
                        qv += p * child_v[c];
                        qg += p * child_g[c];
                        qg2 += p * child_g[c] * child_g[c];
                    }
                    StepEstimates {
                        qv,
                        qg,
                        qg2,
                        samples: hi - lo,
                    }
                });
            tables.nodes.insert(
                key.clone(),
                NodeRecord {
                    t,
                    wealth: level.wealth[i],
                    value,
                    mean: est.qg,
                    action: ai,
                    theta: regions[pos],
                },
            );
            v_here.push(value);
            g_here.push(est.qg);
        }
        values = v_here;
        means = g_here;
    }
    Ok(tables)
}
