//! The subcommands as library functions; `main` only parses flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use robustmv::bellman::{generate_mesh, solve_backward, solve_exact, Mode, SolvedPolicy, POLICY_FORMAT_VERSION};
use robustmv::evaluation::{compare_runs, evaluate_policy, Comparison, EvalResult};
use robustmv::oracle::{oracle_solve, random_instance, verify_subgame_property, DiscreteInstance, NodeKey};

use crate::artifacts::{self, CompareFile, Manifest, ManifestEntry, PolicyFile, TablesFile};
use crate::{CliError, RunConfig};

/// Randomized instances in an `oracle-check` campaign.
pub const CAMPAIGN_INSTANCES: usize = 20;
/// Absolute tolerance of the oracle comparisons.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

type Files = Vec<(String, String)>;

fn record(dir: &Path, command: &str, config: &RunConfig, started: Instant, files: &Files) -> Result<(), CliError> {
    let entry = ManifestEntry {
        config_hash: config.hash(),
        seeds: config.seeds,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        policy_format_version: POLICY_FORMAT_VERSION,
        threads: rayon::current_num_threads(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        files: files.iter().cloned().collect::<BTreeMap<_, _>>(),
    };
    Manifest::record(dir, command, entry)
}

/// Mesh generation and backward recursion for the configured mode.
pub fn solve_policy(config: &RunConfig) -> Result<SolvedPolicy, CliError> {
    let solver = config.solver_config()?;
    let mesh = generate_mesh(&solver, solver.mesh_paths, solver.mesh_seed)?;
    Ok(solve_backward(&mesh, &solver)?)
}

/// Exact-mode tables from the oracle, cross-checked against the solver's
/// level-by-level recursion.
pub fn solve_tables(config: &RunConfig) -> Result<TablesFile, CliError> {
    let instance = config.discrete_instance()?;
    let tables = oracle_solve(&instance)?;
    let diff = solve_exact(&instance)?.compare(&tables);
    if !diff.same_nodes || !diff.same_decisions || diff.max_value_gap.max(diff.max_mean_gap) > ORACLE_TOLERANCE {
        return Err(robustmv::Error::Incompatible(format!("exact solver and oracle disagree: {diff:?}")).into());
    }
    let report = verify_subgame_property(&instance, &tables)?;
    Ok(TablesFile::new(config.hash(), config.seeds, &tables, &report))
}

/// `solve`: writes `policy.json` (or `tables.json` in exact mode) and the manifest.
pub fn run_solve(config: &RunConfig) -> Result<Files, CliError> {
    let started = Instant::now();
    let dir = &config.output.dir;
    let files = if config.mode == Mode::Exact {
        let tables = solve_tables(config)?;
        vec![(
            "tables.json".into(),
            artifacts::write_json(&dir.join("tables.json"), &tables)?,
        )]
    } else {
        let policy = solve_policy(config)?;
        let file = PolicyFile::new(config.hash(), config.seeds, policy);
        vec![(
            "policy.json".into(),
            artifacts::write_json(&dir.join("policy.json"), &file)?,
        )]
    };
    record(dir, "solve", config, started, &files)?;
    Ok(files)
}

/// The policy must have been solved for the same market, uncertainty set and initial estimate.
pub fn check_compatible(config: &RunConfig, policy: &SolvedPolicy) -> Result<(), CliError> {
    let expected = config.with_mode(policy.mode).solver_config()?;
    let got = &policy.config;
    let mismatch = if got.market != expected.market {
        Some("market")
    } else if got.set != expected.set {
        Some("uncertainty set")
    } else if got.initial != expected.initial {
        Some("initial estimate")
    } else {
        None
    };
    match mismatch {
        Some(what) => {
            Err(robustmv::Error::Incompatible(format!("the policy was solved for a different {what}")).into())
        }
        None => Ok(()),
    }
}

/// Out-of-sample evaluation of a solved policy under the configured true parameter.
pub fn evaluate(config: &RunConfig, policy: &SolvedPolicy) -> Result<EvalResult, CliError> {
    check_compatible(config, policy)?;
    let mut result = evaluate_policy(
        policy,
        config.theta_star()?,
        config.eval.paths,
        config.seeds.eval,
        config.eval.trace_paths,
    )?;
    result.meta.labels = config.labels();
    Ok(result)
}

/// `evaluate`: writes `eval.json`, `wealths.csv` and `traces.csv`.
pub fn run_evaluate(config: &RunConfig, policy_path: &Path) -> Result<EvalResult, CliError> {
    let started = Instant::now();
    let file = PolicyFile::read(policy_path)?;
    let result = evaluate(config, &file.policy)?;
    let dir = &config.output.dir;
    let files = artifacts::write_evaluation(dir, &config.hash(), &file.config_hash, &config.seeds, &result)?;
    record(dir, "evaluate", config, started, &files)?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub adaptive: EvalResult,
    pub strong: EvalResult,
    pub comparison: Comparison,
    pub files: Files,
}

/// Solves and evaluates one mode, writing its files under `dir/<mode>/`.
fn solve_and_evaluate(config: &RunConfig, mode: Mode, files: &mut Files) -> Result<EvalResult, CliError> {
    let root = &config.output.dir;
    let sub = root.join(mode.label());
    let cfg = config.with_mode(mode);
    let hash = config.hash();
    let policy = solve_policy(&cfg)?;
    let result = evaluate(&cfg, &policy)?;
    let policy_path = sub.join("policy.json");
    let written = artifacts::write_json(&policy_path, &PolicyFile::new(hash.clone(), config.seeds, policy))?;
    files.push((artifacts::relative_name(root, &policy_path), written));
    for (name, sha) in artifacts::write_evaluation(&sub, &hash, &hash, &config.seeds, &result)? {
        files.push((format!("{}/{name}", mode.label()), sha));
    }
    Ok(result)
}

/// AR and SR on the same configuration, both evaluated on the same out-of-sample paths.
pub fn compare(config: &RunConfig) -> Result<CompareOutcome, CliError> {
    if config.mode == Mode::Exact {
        return Err(CliError::Config(
            "compare runs the Monte Carlo solver; mode = \"exact\" has no comparison".into(),
        ));
    }
    let mut files = Vec::new();
    let adaptive = solve_and_evaluate(config, Mode::AdaptiveRobust, &mut files)?;
    let strong = solve_and_evaluate(config, Mode::StrongRobust, &mut files)?;
    let comparison = compare_runs(&adaptive, &strong)?;
    Ok(CompareOutcome {
        adaptive,
        strong,
        comparison,
        files,
    })
}

/// `compare`: per-mode subdirectories plus `compare.json`.
pub fn run_compare(config: &RunConfig) -> Result<CompareOutcome, CliError> {
    let started = Instant::now();
    let mut outcome = compare(config)?;
    let dir = &config.output.dir;
    let file = CompareFile {
        config_hash: config.hash(),
        seeds: config.seeds,
        adaptive: outcome.adaptive.meta.clone(),
        strong: outcome.strong.meta.clone(),
        comparison: outcome.comparison.clone(),
    };
    outcome.files.push((
        "compare.json".into(),
        artifacts::write_json(&dir.join("compare.json"), &file)?,
    ));
    record(dir, "compare", config, started, &outcome.files)?;
    Ok(outcome)
}

/// Text table with the columns of [`Comparison`].
pub fn format_comparison(c: &Comparison) -> String {
    let mut out = format!("{:<8}{:>18}{:>18}{:>14}\n", "", c.label_a, c.label_b, "diff");
    for r in &c.rows {
        out.push_str(&format!("{:<8}{:>18.4}{:>18.4}{:>14.4}\n", r.stat, r.a, r.b, r.diff));
    }
    if let Some(ratio) = c.variance_ratio {
        out.push_str(&format!("variance ratio {ratio:.4}\n"));
    }
    out
}

/// Result of checking one finite instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    /// Seed used to draw the instance (absent for a configured instance).
    pub seed: Option<u64>,
    pub horizon: usize,
    pub gamma: f64,
    pub nodes: usize,
    pub same_nodes: bool,
    pub same_decisions: bool,
    pub max_value_gap: f64,
    pub max_mean_gap: f64,
    pub max_violation: f64,
    pub perturbed_node: Option<NodeKey>,
    /// Violation at `perturbed_node` after changing its action.
    pub perturbation_violation: Option<f64>,
}

impl InstanceCheck {
    pub fn passed(&self) -> bool {
        self.same_nodes
            && self.same_decisions
            && self.max_value_gap <= ORACLE_TOLERANCE
            && self.max_mean_gap <= ORACLE_TOLERANCE
            && self.max_violation <= ORACLE_TOLERANCE
            && self.perturbation_violation.is_none_or(|v| v > 0.0)
    }
}

/// Solver against oracle, the fixed-point check, and one action perturbation at a node drawn with `seed`.
pub fn check_instance(instance: &DiscreteInstance, seed: u64) -> Result<InstanceCheck, CliError> {
    let oracle = oracle_solve(instance)?;
    let solver = solve_exact(instance)?;
    let diff = solver.compare(&oracle);
    let report = verify_subgame_property(instance, &solver)?;
    let (mut perturbed_node, mut perturbation_violation) = (None, None);
    if instance.actions.len() > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<&NodeKey> = oracle.nodes.keys().collect();
        let key = keys[rng.random_range(0..keys.len())].clone();
        let rec = oracle.nodes[&key];
        let shift = rng.random_range(1..instance.actions.len());
        let bad = oracle.with_action(&key, (rec.action + shift) % instance.actions.len());
        let bad_report = verify_subgame_property(instance, &bad)?;
        perturbation_violation = bad_report.violation_at(&key);
        perturbed_node = Some(key);
    }
    Ok(InstanceCheck {
        seed: None,
        horizon: instance.horizon(),
        gamma: instance.gamma,
        nodes: oracle.len(),
        same_nodes: diff.same_nodes,
        same_decisions: diff.same_decisions,
        max_value_gap: diff.max_value_gap,
        max_mean_gap: diff.max_mean_gap,
        max_violation: report.max_violation,
        perturbed_node,
        perturbation_violation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckFile {
    pub config_hash: String,
    pub seeds: crate::config::Seeds,
    pub passed: bool,
    pub instances: Vec<InstanceCheck>,
}

/// Randomized campaign: horizons cycle through 1, 2, 3 and risk aversions through 0, 0.2, 0.9.
pub fn oracle_campaign(root_seed: u64, count: usize) -> Result<Vec<InstanceCheck>, CliError> {
    (0..count)
        .map(|i| {
            let seed = root_seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let horizon = 1 + i % 3;
            let gamma = [0.0, 0.2, 0.9][(i / 3) % 3];
            let instance = random_instance(seed, horizon, gamma)?;
            let mut check = check_instance(&instance, seed ^ 0x5eed)?;
            check.seed = Some(seed);
            Ok(check)
        })
        .collect()
}

/// `oracle-check`: the configured `[discrete]` instance if present, otherwise the campaign.
pub fn run_oracle_check(config: &RunConfig) -> Result<OracleCheckFile, CliError> {
    let started = Instant::now();
    let instances = match &config.discrete {
        Some(_) => vec![check_instance(&config.discrete_instance()?, config.seeds.oracle)?],
        None => oracle_campaign(config.seeds.oracle, CAMPAIGN_INSTANCES)?,
    };
    let file = OracleCheckFile {
        config_hash: config.hash(),
        seeds: config.seeds,
        passed: instances.iter().all(InstanceCheck::passed),
        instances,
    };
    let dir = &config.output.dir;
    let files = vec![(
        "oracle_check.json".into(),
        artifacts::write_json(&dir.join("oracle_check.json"), &file)?,
    )];
    record(dir, "oracle-check", config, started, &files)?;
    Ok(file)
}
