//! Exact sub-game perfect solutions of small finite-support instances.
//!
//! The noise takes finitely many values per parameter, so every conditional
//! expectation is a finite sum and the reachable tree can be enumerated.
//! Nodes are keyed by their generating path rather than by floating-point
//! state, so two different histories never merge.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{validate_actions, wealth_step_unchecked, ObjectiveSpec, ThetaPoint};

/// Longest horizon accepted by the exact solvers.
pub const MAX_EXACT_HORIZON: usize = 4;
/// Largest number of decision nodes accepted by the exact solvers.
pub const MAX_EXACT_NODES: usize = 2_000_000;

/// A finite instance: per-parameter noise supports and a time-indexed region map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    pub rate: f64,
    pub gamma: f64,
    pub initial_wealth: f64,
    pub actions: Vec<f64>,
    pub thetas: Vec<ThetaPoint>,
    /// `noise[j]` lists the `(z, probability)` support of the log-return under `thetas[j]`.
    pub noise: Vec<Vec<(f64, f64)>>,
    /// `regions[t]` holds the indices of `thetas` the adversary may pick at step `t`.
    pub regions: Vec<Vec<usize>>,
}

impl DiscreteInstance {
    /// Equal-weight two-point noise `{mu - sigma, mu + sigma}` for every parameter,
    /// matching its first two moments.
    pub fn two_point(
        rate: f64,
        gamma: f64,
        initial_wealth: f64,
        actions: Vec<f64>,
        thetas: Vec<ThetaPoint>,
        regions: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let noise = thetas
            .iter()
            .map(|th| vec![(th.mu - th.sigma(), 0.5), (th.mu + th.sigma(), 0.5)])
            .collect();
        let inst = Self {
            rate,
            gamma,
            initial_wealth,
            actions,
            thetas,
            noise,
            regions,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn horizon(&self) -> usize {
        self.regions.len()
    }

    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec { gamma: self.gamma }
    }

    /// Children per node at step `t`.
    pub fn branching(&self, t: usize) -> usize {
        self.actions.len() * self.regions[t].iter().map(|&j| self.noise[j].len()).sum::<usize>()
    }

    /// Decision nodes in the reachable tree, saturating on overflow.
    pub fn node_count(&self) -> usize {
        let mut level = 1usize;
        let mut total = 0usize;
        for t in 0..self.horizon() {
            total = total.saturating_add(level);
            level = level.saturating_mul(self.branching(t));
        }
        total
    }

    pub fn validate(&self) -> Result<()> {
        let horizon = self.horizon();
        if horizon == 0 || horizon > MAX_EXACT_HORIZON {
            return Err(Error::SizeGuard(format!(
                "horizon {horizon} outside 1..={MAX_EXACT_HORIZON}"
            )));
        }
        validate_actions(&self.actions)?;
        if !(self.initial_wealth > 0.0) || !(self.gamma >= 0.0) || !(self.rate > -1.0) {
            return Err(Error::config("discrete", "need w0 > 0, gamma >= 0 and r > -1"));
        }
        if self.noise.len() != self.thetas.len() {
            return Err(Error::config("discrete.noise", "one support per parameter point"));
        }
        for (j, support) in self.noise.iter().enumerate() {
            let total: f64 = support.iter().map(|(_, p)| p).sum();
            if support.is_empty()
                || support.iter().any(|(z, p)| !(*p > 0.0) || !z.is_finite())
                || (total - 1.0).abs() > 1e-12
            {
                return Err(Error::config(
                    "discrete.noise",
                    format!("support {j} needs positive probabilities summing to 1"),
                ));
            }
        }
        for (t, region) in self.regions.iter().enumerate() {
            if region.is_empty() || region.iter().any(|&j| j >= self.thetas.len()) {
                return Err(Error::config(
                    "discrete.regions",
                    format!("region at t={t} must be a non-empty subset of the parameter grid"),
                ));
            }
        }
        let nodes = self.node_count();
        if nodes > MAX_EXACT_NODES {
            return Err(Error::SizeGuard(format!(
                "{nodes} decision nodes exceed {MAX_EXACT_NODES}"
            )));
        }
        Ok(())
    }
}

/// A random two-point instance for verification campaigns: two or three
/// actions from `{0, 0.5, 1}`, a three-point parameter grid and a random
/// non-empty region per step.
pub fn random_instance(seed: u64, horizon: usize, gamma: f64) -> Result<DiscreteInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actions = vec![0.0, 0.5, 1.0];
    actions.truncate(rng.random_range(2..=3));
    let thetas = (0..3)
        .map(|_| {
            let mu: f64 = rng.random_range(-0.05..0.1);
            let sigma: f64 = rng.random_range(0.02..0.3);
            ThetaPoint::new(mu, sigma * sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    let regions = (0..horizon)
        .map(|_| {
            let mut r: Vec<usize> = (0..3).filter(|_| rng.random_bool(0.6)).collect();
            if r.is_empty() {
                r.push(rng.random_range(0..3));
            }
            r
        })
        .collect();
    DiscreteInstance::two_point(rng.random_range(0.0..0.01), gamma, 100.0, actions, thetas, regions)
}

/// One edge of the tree: action index, parameter index (into `thetas`) and outcome index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Branch {
    pub action: usize,
    pub theta: usize,
    pub outcome: usize,
}

pub type NodeKey = Vec<Branch>;

/// Tabled quantities at one decision node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub t: usize,
    pub wealth: f64,
    pub value: f64,
    pub mean: f64,
    pub action: usize,
    /// Index into `thetas` of the worst-case parameter.
    pub theta: usize,
}

/// Tables over every reachable decision node.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExactTables {
    pub nodes: BTreeMap<NodeKey, NodeRecord>,
}

impl ExactTables {
    pub fn root(&self) -> &NodeRecord {
        &self.nodes[&Vec::new()]
    }

    pub fn get(&self, key: &[Branch]) -> Option<&NodeRecord> {
        self.nodes.get(key)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copy with the action at `key` replaced.
    pub fn with_action(&self, key: &[Branch], action: usize) -> ExactTables {
        let mut out = self.clone();
        if let Some(r) = out.nodes.get_mut(key) {
            r.action = action;
        }
        out
    }

    /// Largest absolute differences `(value, mean)` between two table sets,
    /// and whether the keys, actions and parameters coincide.
    pub fn compare(&self, other: &ExactTables) -> TableDiff {
        let mut diff = TableDiff {
            same_nodes: self.nodes.len() == other.nodes.len(),
            same_decisions: true,
            max_value_gap: 0.0,
            max_mean_gap: 0.0,
        };
        for (key, a) in &self.nodes {
            match other.nodes.get(key) {
                Some(b) => {
                    diff.max_value_gap = diff.max_value_gap.max((a.value - b.value).abs());
                    diff.max_mean_gap = diff.max_mean_gap.max((a.mean - b.mean).abs());
                    diff.same_decisions &= a.action == b.action && a.theta == b.theta;
                }
                None => diff.same_nodes = false,
            }
        }
        diff
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableDiff {
    pub same_nodes: bool,
    pub same_decisions: bool,
    pub max_value_gap: f64,
    pub max_mean_gap: f64,
}

/// Exact backward induction over the reachable tree.
pub fn oracle_solve(instance: &DiscreteInstance) -> Result<ExactTables> {
    instance.validate()?;
    let mut tables = ExactTables::default();
    let mut key = Vec::new();
    solve_node(instance, 0, instance.initial_wealth, &mut key, &mut tables);
    Ok(tables)
}

fn solve_node(inst: &DiscreteInstance, t: usize, w: f64, key: &mut NodeKey, tables: &mut ExactTables) -> (f64, f64) {
    if t == inst.horizon() {
        return (w, w);
    }
    let gamma = inst.gamma;
    let mut best: Option<(f64, f64, usize, usize)> = None;
    for (ai, &a) in inst.actions.iter().enumerate() {
        let mut worst: Option<(f64, f64, usize)> = None;
        for &j in &inst.regions[t] {
            let (mut qv, mut qg, mut qg2) = (0.0, 0.0, 0.0);
            for (k, &(z, p)) in inst.noise[j].iter().enumerate() {
                key.push(Branch {
                    action: ai,
                    theta: j,
                    outcome: k,
                });
                let (v, g) = solve_node(inst, t + 1, wealth_step_unchecked(w, a, z, inst.rate), key, tables);
                key.pop();
                qv += p * v;
                qg += p * g;
                qg2 += p * g * g;
            }
            let obj = qv - gamma * (qg2 - qg * qg);
            if worst.is_none_or(|(o, _, _)| obj < o) {
                worst = Some((obj, qg, j));
            }
        }
        let (obj, qg, j) = worst.expect("regions are non-empty");
        if best.is_none_or(|(o, _, _, _)| obj > o) {
            best = Some((obj, qg, ai, j));
        }
    }
    let (value, mean, action, theta) = best.expect("actions are non-empty");
    tables.nodes.insert(
        key.clone(),
        NodeRecord {
            t,
            wealth: w,
            value,
            mean,
            action,
            theta,
        },
    );
    (value, mean)
}

/// Outcome of [`verify_subgame_property`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgameReport {
    /// Largest `|max_a min_theta J_t(a; tabled) - J_t(tabled)|` over all nodes.
    pub max_violation: f64,
    pub worst_node: Option<NodeKey>,
    /// Largest `|V_t - J_t(tabled)|`, the gap between tabled values and the criterion.
    pub max_value_gap: f64,
    pub violations: BTreeMap<NodeKey, f64>,
}

impl SubgameReport {
    pub fn violation_at(&self, key: &[Branch]) -> Option<f64> {
        self.violations.get(key).copied()
    }
}

/// Recomputes the time-inconsistent criterion `J_t = E[F(X_T)] + G(E[X_T])`
/// by forward tree summation under the tabled strategies and checks the
/// one-step max-min fixed point at every node.
pub fn verify_subgame_property(instance: &DiscreteInstance, tables: &ExactTables) -> Result<SubgameReport> {
    instance.validate()?;
    let obj = instance.objective();
    // (E[F(X_T)], E[X_T]) from each node under the tabled strategies
    let mut moments: BTreeMap<NodeKey, (f64, f64)> = BTreeMap::new();
    let mut key = Vec::new();
    follow(instance, tables, 0, instance.initial_wealth, &mut key, &mut moments)?;

    let mut report = SubgameReport {
        max_violation: 0.0,
        worst_node: None,
        max_value_gap: 0.0,
        violations: BTreeMap::new(),
    };
    for (key, rec) in &tables.nodes {
        let criterion = |ai: usize, j: usize| -> f64 {
            let a = instance.actions[ai];
            let (mut ef, mut ex) = (0.0, 0.0);
            for (k, &(z, p)) in instance.noise[j].iter().enumerate() {
                let (f, m) = if rec.t + 1 == instance.horizon() {
                    let w = wealth_step_unchecked(rec.wealth, a, z, instance.rate);
                    (obj.terminal(w), w)
                } else {
                    let mut child = key.clone();
                    child.push(Branch {
                        action: ai,
                        theta: j,
                        outcome: k,
                    });
                    moments[&child]
                };
                ef += p * f;
                ex += p * m;
            }
            ef + obj.mean_map(ex)
        };
        let max_min = (0..instance.actions.len())
            .map(|ai| {
                instance.regions[rec.t]
                    .iter()
                    .map(|&j| criterion(ai, j))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let tabled = criterion(rec.action, rec.theta);
        let violation = (max_min - tabled).abs();
        report.max_value_gap = report.max_value_gap.max((rec.value - tabled).abs());
        if violation > report.max_violation || report.worst_node.is_none() {
            report.max_violation = report.max_violation.max(violation);
            report.worst_node = Some(key.clone());
        }
        report.violations.insert(key.clone(), violation);
    }
    Ok(report)
}

fn follow(
    inst: &DiscreteInstance,
    tables: &ExactTables,
    t: usize,
    w: f64,
    key: &mut NodeKey,
    out: &mut BTreeMap<NodeKey, (f64, f64)>,
) -> Result<(f64, f64)> {
    let obj = inst.objective();
    if t == inst.horizon() {
        return Ok((obj.terminal(w), w));
    }
    let rec = tables
        .nodes
        .get(key.as_slice())
        .ok_or_else(|| Error::Incompatible(format!("no table entry for node {key:?}")))?;
    if rec.action >= inst.actions.len() || !inst.regions[t].contains(&rec.theta) {
        return Err(Error::Incompatible(format!("table entry at {key:?} is not admissible")));
    }
    // every child is visited so that each node's moments exist, but only the
    // tabled branch contributes to this node
    let (mut ef, mut ex) = (0.0, 0.0);
    for (ai, &a) in inst.actions.iter().enumerate() {
        for &j in &inst.regions[t] {
            for (k, &(z, p)) in inst.noise[j].iter().enumerate() {
                key.push(Branch {
                    action: ai,
                    theta: j,
                    outcome: k,
                });
                let (f, m) = follow(inst, tables, t + 1, wealth_step_unchecked(w, a, z, inst.rate), key, out)?;
                key.pop();
                if ai == rec.action && j == rec.theta {
                    ef += p * f;
                    ex += p * m;
                }
            }
        }
    }
    out.insert(key.clone(), (ef, ex));
    Ok((ef, ex))
}
