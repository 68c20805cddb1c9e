//! Out-of-sample forward simulation of a solved policy under the true
//! parameter, and the summary statistics of the terminal wealth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::{Mode, SolvedPolicy, POLICY_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::estimation::{mle_update, UncertaintySet};
use crate::market::{standard_normals, wealth_step_unchecked, AugmentedState, ThetaPoint};

/// Quantile level reported in [`Summary::q90`].
pub const QUANTILE_LEVEL: f64 = 0.9;

/// Anything that picks a risky fraction at `(t, y)`.
pub trait DecisionRule: Sync {
    fn action(&self, t: usize, y: &AugmentedState) -> f64;
}

impl DecisionRule for SolvedPolicy {
    fn action(&self, t: usize, y: &AugmentedState) -> f64 {
        self.config.market.actions[self.action_index(t, y)]
    }
}

/// Always invests the same fraction.
#[derive(Debug, Clone, Copy)]
pub struct ConstantAction(pub f64);

impl DecisionRule for ConstantAction {
    fn action(&self, _t: usize, _y: &AugmentedState) -> f64 {
        self.0
    }
}

/// Terminal-wealth statistics with the mean-variance score `V = mean - gamma var`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population (`1/K`) variance.
    pub variance: f64,
    /// Nearest-rank 90% quantile.
    pub q90: f64,
    pub max: f64,
    pub min: f64,
    pub value: f64,
}

/// Summary of a wealth list; the nearest-rank quantile is the
/// `ceil(0.9 K)`-th smallest value. Mean and `1/K` variance are accumulated
/// with Welford's update, which keeps constant lists exact.
pub fn summarize(wealths: &[f64], gamma: f64) -> Result<Summary> {
    if wealths.is_empty() {
        return Err(Error::Empty("wealth list"));
    }
    let k = wealths.len() as f64;
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, w) in wealths.iter().enumerate() {
        let d = w - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (w - mean);
    }
    let variance = m2 / k;
    let mut sorted = wealths.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((QUANTILE_LEVEL * k).ceil() as usize).clamp(1, sorted.len());
    Ok(Summary {
        mean,
        variance,
        q90: sorted[rank - 1],
        max: sorted[sorted.len() - 1],
        min: sorted[0],
        value: mean - gamma * variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub mode: Mode,
    pub gamma: f64,
    pub theta_star: ThetaPoint,
    pub paths: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Free-form labels such as the case and the initial-guess name.
    #[serde(default)]
    pub labels: Vec<(String, String)>,
}

/// One simulated step kept for plotting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub path: usize,
    pub t: usize,
    pub wealth: f64,
    pub c_mu: f64,
    pub c_sigma2: f64,
    pub action: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub meta: EvalMeta,
    pub summary: Summary,
    pub wealths: Vec<f64>,
    #[serde(default)]
    pub traces: Vec<TraceRow>,
}

impl EvalResult {
    /// Recomputes `V` from the stored wealth list.
    pub fn recomputed_value(&self) -> Result<f64> {
        Ok(summarize(&self.wealths, self.meta.gamma)?.value)
    }
}

/// `paths x horizon` log-returns drawn under `theta`; path `i` uses its own stream.
pub fn draw_log_returns(theta: ThetaPoint, paths: usize, horizon: usize, seed: u64) -> Vec<Vec<f64>> {
    let sigma = theta.sigma();
    (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            standard_normals(horizon, &mut rng)
                .into_iter()
                .map(|e| theta.mu + sigma * e)
                .collect()
        })
        .collect()
}

/// Runs `rule` along each row of `log_returns` from `y0`. Returns terminal
/// wealths and traces of the first `trace_paths` rows.
pub fn simulate<D: DecisionRule + ?Sized>(
    rule: &D,
    y0: AugmentedState,
    rate: f64,
    set: &UncertaintySet,
    log_returns: &[Vec<f64>],
    trace_paths: usize,
) -> (Vec<f64>, Vec<TraceRow>) {
    let runs: Vec<(f64, Vec<TraceRow>)> = log_returns
        .par_iter()
        .enumerate()
        .map(|(i, zs)| {
            let mut y = y0;
            let mut trace = Vec::new();
            for (t, &z) in zs.iter().enumerate() {
                let a = rule.action(t, &y);
                if i < trace_paths {
                    trace.push(TraceRow {
                        path: i,
                        t,
                        wealth: y.wealth,
                        c_mu: y.estimate.c_mu,
                        c_sigma2: y.estimate.c_sigma2,
                        action: a,
                    });
                }
                y = AugmentedState {
                    wealth: wealth_step_unchecked(y.wealth, a, z, rate),
                    estimate: mle_update(&y.estimate, z, set),
                };
            }
            (y.wealth, trace)
        })
        .collect();
    let mut wealths = Vec::with_capacity(runs.len());
    let mut traces = Vec::new();
    for (w, tr) in runs {
        wealths.push(w);
        traces.extend(tr);
    }
    (wealths, traces)
}

fn check_policy(policy: &SolvedPolicy) -> Result<()> {
    if policy.version != POLICY_FORMAT_VERSION {
        return Err(Error::Incompatible(format!("policy format version {}", policy.version)));
    }
    let horizon = policy.config.market.horizon;
    if policy.steps.len() != horizon {
        return Err(Error::Incompatible(format!(
            "policy has {} steps but its configuration says {horizon}",
            policy.steps.len()
        )));
    }
    let dim = policy.config.set.state_dim();
    for step in &policy.steps[1..] {
        match &step.surrogates {
            Some(s) if s.action.dim() == dim => {}
            _ => {
                return Err(Error::Incompatible(format!(
                    "step {} lacks an action surrogate over {dim} features",
                    step.t
                )))
            }
        }
    }
    if policy.root.action >= policy.config.market.actions.len() {
        return Err(Error::Incompatible("root action outside the action list".into()));
    }
    Ok(())
}

/// Forward simulation of `policy` on `paths` out-of-sample paths drawn under
/// `theta_star`, keeping traces of the first `trace_paths` paths.
pub fn evaluate_policy(
    policy: &SolvedPolicy,
    theta_star: ThetaPoint,
    paths: usize,
    seed: u64,
    trace_paths: usize,
) -> Result<EvalResult> {
    check_policy(policy)?;
    if paths == 0 {
        return Err(Error::config("eval.paths", "need at least one path"));
    }
    let cfg = &policy.config;
    let shocks = draw_log_returns(theta_star, paths, cfg.market.horizon, seed);
    let (wealths, traces) = simulate(
        policy,
        cfg.initial_state(),
        cfg.market.rate,
        &cfg.set,
        &shocks,
        trace_paths,
    );
    let summary = summarize(&wealths, cfg.market.gamma)?;
    Ok(EvalResult {
        meta: EvalMeta {
            mode: policy.mode,
            gamma: cfg.market.gamma,
            theta_star,
            paths,
            horizon: cfg.market.horizon,
            seed,
            labels: Vec::new(),
        },
        summary,
        wealths,
        traces,
    })
}

/// [`evaluate_policy`] without traces.
pub fn forward_evaluate(policy: &SolvedPolicy, theta_star: ThetaPoint, paths: usize, seed: u64) -> Result<EvalResult> {
    evaluate_policy(policy, theta_star, paths, seed, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub stat: String,
    pub a: f64,
    pub b: f64,
    /// `a - b`.
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label_a: String,
    pub label_b: String,
    /// `mean`, `var`, `q0.90`, `max`, `min`, `V`, in that order.
    pub rows: Vec<ComparisonRow>,
    /// `var(a) / var(b)`, absent when `var(b) = 0`.
    pub variance_ratio: Option<f64>,
    /// Label of the column with the higher `V`, or `None` on a tie.
    pub higher_value: Option<String>,
}

impl Comparison {
    pub fn row(&self, stat: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.stat == stat)
    }
}

/// Side-by-side table of two summaries.
pub fn compare_summaries(label_a: &str, a: &Summary, label_b: &str, b: &Summary) -> Comparison {
    let rows = [
        ("mean", a.mean, b.mean),
        ("var", a.variance, b.variance),
        ("q0.90", a.q90, b.q90),
        ("max", a.max, b.max),
        ("min", a.min, b.min),
        ("V", a.value, b.value),
    ]
    .into_iter()
    .map(|(stat, x, y)| ComparisonRow {
        stat: stat.to_string(),
        a: x,
        b: y,
        diff: x - y,
    })
    .collect();
    let higher_value = if a.value > b.value {
        Some(label_a.to_string())
    } else if b.value > a.value {
        Some(label_b.to_string())
    } else {
        None
    };
    Comparison {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        rows,
        variance_ratio: (b.variance > 0.0).then(|| a.variance / b.variance),
        higher_value,
    }
}

/// Compares two evaluations run on the same experiment.
pub fn compare_runs(a: &EvalResult, b: &EvalResult) -> Result<Comparison> {
    let (ma, mb) = (&a.meta, &b.meta);
    if ma.gamma != mb.gamma || ma.theta_star != mb.theta_star || ma.paths != mb.paths || ma.horizon != mb.horizon {
        return Err(Error::Incompatible(
            "evaluations differ in gamma, true parameter, path count or horizon".into(),
        ));
    }
    let shared = |m: &EvalMeta, k: &str| m.labels.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    for key in ["case", "guess"] {
        if shared(ma, key) != shared(mb, key) {
            return Err(Error::Incompatible(format!("evaluations differ in `{key}`")));
        }
    }
    let mut label_a = ma.mode.label().to_string();
    let mut label_b = mb.mode.label().to_string();
    if label_a == label_b {
        label_a.push_str(" (a)");
        label_b.push_str(" (b)");
    }
    Ok(compare_summaries(&label_a, &a.summary, &label_b, &b.summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_arithmetic() {
        let s = summarize(&[1.0, 2.0, 3.0], 0.0).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.variance - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((s.min, s.max), (1.0, 3.0));
    }

    #[test]
    fn nearest_rank_quantile() {
        let w: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(summarize(&w, 0.2).unwrap().q90, 90.0);
        assert_eq!(summarize(&[5.0], 0.2).unwrap().q90, 5.0);
    }

    #[test]
    fn constant_and_empty_lists() {
        let s = summarize(&[102.0196; 7], 0.9).unwrap();
        assert_eq!(s.variance, 0.0);
        assert_eq!((s.min, s.q90, s.max), (102.0196, 102.0196, 102.0196));
        assert_eq!(s.value, s.mean);
        assert!(summarize(&[], 0.2).is_err());
    }

    #[test]
    fn riskless_rule_compounds() {
        let set = UncertaintySet::mean_only(0.000192, 0.0096, 0.0166 * 0.0166).unwrap();
        let y0 = AugmentedState::new(100.0, set.initial_estimate(0.002308, None).unwrap());
        let theta = ThetaPoint::new(0.00192, 0.0166 * 0.0166).unwrap();
        let shocks = draw_log_returns(theta, 50, 52, 4);
        let (w, _) = simulate(&ConstantAction(0.0), y0, 0.0003846, &set, &shocks, 0);
        let s = summarize(&w, 0.2).unwrap();
        let exact = 100.0 * 1.0003846_f64.powi(52);
        assert!((s.mean - exact).abs() < 1e-9);
        assert!(s.variance < 1e-9);
        assert!((s.value - exact).abs() < 1e-9);
        assert!((exact - 102.0196).abs() < 1e-4);
    }

    #[test]
    fn traces_cover_requested_paths() {
        let set = UncertaintySet::mean_only(0.000192, 0.0096, 0.0166 * 0.0166).unwrap();
        let y0 = AugmentedState::new(100.0, set.initial_estimate(0.002, None).unwrap());
        let theta = ThetaPoint::new(0.00192, 0.0166 * 0.0166).unwrap();
        let shocks = draw_log_returns(theta, 6, 4, 1);
        let (_, tr) = simulate(&ConstantAction(0.5), y0, 0.0003846, &set, &shocks, 2);
        assert_eq!(tr.len(), 8);
        assert!(tr.iter().all(|r| r.path < 2 && r.action == 0.5));
    }

    #[test]
    fn published_table_comparisons() {
        let mk = |variance: f64, value: f64| Summary {
            mean: 100.0,
            variance,
            q90: 100.0,
            max: 100.0,
            min: 100.0,
            value,
        };
        let c = compare_summaries("AR", &mk(2.653, 101.840), "SR", &mk(34.654, 96.201));
        assert!((c.variance_ratio.unwrap() - 0.0766).abs() < 5e-5);
        assert_eq!(c.higher_value.as_deref(), Some("AR"));
        let c = compare_summaries("AR", &mk(1.0, 99.382), "SR", &mk(1.0, 76.142));
        assert!((c.row("V").unwrap().diff - 23.240).abs() < 1e-9);
        let stats: Vec<&str> = c.rows.iter().map(|r| r.stat.as_str()).collect();
        assert_eq!(stats, ["mean", "var", "q0.90", "max", "min", "V"]);
    }

    #[test]
    fn self_comparison_is_zero() {
        let s = summarize(&[1.0, 4.0, 2.5], 0.2).unwrap();
        let c = compare_summaries("a", &s, "b", &s);
        assert!(c.rows.iter().all(|r| r.diff == 0.0));
        assert_eq!(c.higher_value, None);
    }

    proptest! {
        #[test]
        fn summary_invariants(ws in proptest::collection::vec(50.0f64..150.0, 1..60), gamma in 0.0f64..1.0) {
            let s = summarize(&ws, gamma).unwrap();
            prop_assert!(s.variance >= 0.0);
            prop_assert!(s.min <= s.q90 && s.q90 <= s.max);
            prop_assert_eq!(s.value, s.mean - gamma * s.variance);
        }

        #[test]
        fn summary_is_permutation_invariant(ws in proptest::collection::vec(50.0f64..150.0, 1..40), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut shuffled = ws.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = summarize(&ws, 0.2).unwrap();
            let b = summarize(&shuffled, 0.2).unwrap();
            prop_assert_eq!((a.q90, a.max, a.min), (b.q90, b.max, b.min));
            prop_assert!((a.mean - b.mean).abs() <= 1e-12 * a.mean.abs());
            prop_assert!((a.variance - b.variance).abs() <= 1e-9 * a.mean * a.mean);
        }
    }
}
