//! Acceptance suite: one PASS/FAIL line per criterion and a non-zero exit
//! status if any fails. Numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 1 2 8`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use robustmv::bellman::{generate_mesh, one_step_estimates, solve_exact, Continuation};
use robustmv::estimation::{case1_half_width, chi2_2_upper_quantile, mle_update, region_case1};
use robustmv::evaluation::{draw_log_returns, simulate, summarize, ConstantAction};
use robustmv::gp::{fit, FitOptions, KernelParams, SurrogateModel};
use robustmv::market::{wealth_step, AugmentedState};
use robustmv::oracle::{oracle_solve, random_instance, verify_subgame_property, DiscreteInstance};
use robustmv::{ThetaPoint, UncertaintySet};
use robustmv_cli::{run, RunConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn config(overrides: &[String]) -> RunConfig {
    RunConfig::load(None, overrides).expect("valid acceptance configuration")
}

fn sets(pairs: &[(&str, String)]) -> Vec<String> {
    pairs.iter().map(|(k, v)| format!("{k}={v}")).collect()
}

// ---------------------------------------------------------------- 1 and 2

fn campaign() -> Vec<(u64, DiscreteInstance)> {
    (0..20u64)
        .map(|i| {
            let horizon = 1 + (i % 3) as usize;
            let gamma = [0.0, 0.2, 0.9][(i / 3 % 3) as usize];
            let seed = 7_000 + i;
            (seed, random_instance(seed, horizon, gamma).expect("instance"))
        })
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let (mut gap, mut violation, mut mismatched) = (0.0f64, 0.0f64, 0);
    let instances = campaign();
    for (_, inst) in &instances {
        assert!(inst.actions.len() <= 3 && inst.thetas.len() <= 3);
        assert!(inst.regions.iter().all(|r| r.len() <= 3));
        assert!(inst.noise.iter().all(|n| n.len() == 2));
        let oracle = oracle_solve(inst).unwrap();
        let solver = solve_exact(inst).unwrap();
        let diff = solver.compare(&oracle);
        if !diff.same_nodes || !diff.same_decisions {
            mismatched += 1;
        }
        gap = gap.max(diff.max_value_gap).max(diff.max_mean_gap);
        violation = violation.max(verify_subgame_property(inst, &solver).unwrap().max_violation);
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        mismatched == 0 && gap <= 1e-10 && violation <= 1e-10 && secs < 10.0,
        format!(
            "{} instances, decision mismatches {mismatched}, max V/g gap {gap:.2e}, max violation {violation:.2e}, {secs:.2}s",
            instances.len()
        ),
    )
}

fn perturbation_witness() -> Outcome {
    let mut smallest = f64::INFINITY;
    let mut detected = 0;
    let instances = campaign();
    for (seed, inst) in &instances {
        let tables = oracle_solve(inst).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let keys: Vec<_> = tables.nodes.keys().cloned().collect();
        let key = &keys[rng.random_range(0..keys.len())];
        let current = tables.get(key).unwrap().action;
        let other = (current + rng.random_range(1..inst.actions.len())) % inst.actions.len();
        let report = verify_subgame_property(inst, &tables.with_action(key, other)).unwrap();
        let v = report.violation_at(key).unwrap_or(0.0);
        smallest = smallest.min(v);
        if v > 0.0 {
            detected += 1;
        }
    }
    outcome(
        detected == instances.len(),
        format!(
            "{detected}/{} perturbed nodes violate, smallest violation {smallest:.3e}",
            instances.len()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn terminal_identities() -> Outcome {
    let riskless = 100.0 * 1.0003846f64.powi(52);
    let mut notes = Vec::new();
    let mut pass = true;

    // a = 0 through the full pipeline: one admissible action
    let cfg = config(&sets(&[
        ("market.actions", "1".into()),
        ("solver.mesh_paths", "20".into()),
        ("solver.mc_samples", "5".into()),
    ]));
    let policy = run::solve_policy(&cfg).unwrap();
    let result = run::evaluate(&cfg, &policy).unwrap();
    let worst = result.wealths.iter().map(|w| (w - riskless).abs()).fold(0.0, f64::max);
    pass &= worst <= 1e-9 && result.summary.variance.abs() <= 1e-9;
    notes.push(format!(
        "policy a=0: max |W_T - {riskless:.4}| {worst:.1e}, var {:.1e}",
        result.summary.variance
    ));

    let solver = cfg.solver_config().unwrap();
    let shocks = draw_log_returns(cfg.theta_star().unwrap(), 500, 52, 17);
    let (wealths, _) = simulate(
        &ConstantAction(0.0),
        solver.initial_state(),
        solver.market.rate,
        &solver.set,
        &shocks,
        0,
    );
    let s = summarize(&wealths, 0.2).unwrap();
    pass &= (s.mean - riskless).abs() <= 1e-9 && s.variance <= 1e-9;
    notes.push(format!(
        "constant rule: mean gap {:.1e}, var {:.1e}",
        (s.mean - riskless).abs(),
        s.variance
    ));

    // V_T(y) = w and g_T(y) = w
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let horizon = policy.horizon();
    let mut exact = true;
    let mut moment_gap = 0.0f64;
    for _ in 0..200 {
        let w = rng.random_range(50.0..150.0);
        let est = solver
            .set
            .initial_estimate(rng.random_range(0.000192..0.0096), None)
            .unwrap();
        let y = AugmentedState::new(w, est.at_time(horizon));
        exact &= policy.value_at(horizon, &y) == w;

        let y = AugmentedState::new(w, est.at_time(horizon - 1));
        let theta = ThetaPoint::new(rng.random_range(0.000192..0.0096), 0.0166f64.powi(2)).unwrap();
        let draws: Vec<f64> = (0..50).map(|_| rng.random_range(-2.5..2.5)).collect();
        let a = rng.random_range(0.0..1.0);
        let e = one_step_estimates(
            horizon - 1,
            &y,
            a,
            theta,
            Continuation::Terminal,
            &solver.set,
            solver.market.rate,
            &draws,
        );
        exact &= e.qv == e.qg;
        let next: Vec<f64> = draws
            .iter()
            .map(|d| wealth_step(w, a, theta.log_return(*d), solver.market.rate).unwrap())
            .collect();
        let mean = next.iter().sum::<f64>() / next.len() as f64;
        let second = next.iter().map(|x| x * x).sum::<f64>() / next.len() as f64;
        moment_gap = moment_gap
            .max((e.qg - mean).abs() / mean)
            .max((e.qg2 - second).abs() / second);
    }
    pass &= exact && moment_gap <= 1e-12;
    notes.push(format!(
        "V_T = g_T = w exact: {exact}, terminal moment gap {moment_gap:.1e}"
    ));
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------- 4

fn estimation() -> Outcome {
    let wide2 = UncertaintySet::mean_variance(-10.0, 10.0, 1e-20, 100.0).unwrap();
    let wide1 = UncertaintySet::mean_only(-10.0, 10.0, 0.0166f64.powi(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let law = Normal::new(0.00192, 0.0416).unwrap();
    let mut gap = 0.0f64;
    for _ in 0..100 {
        let steps = rng.random_range(1..=104);
        let z: Vec<f64> = (0..steps).map(|_| law.sample(&mut rng)).collect();
        let mut c1 = wide1.initial_estimate(0.002, None).unwrap();
        let mut c2 = wide2.initial_estimate(0.002, Some(0.0347f64.powi(2))).unwrap();
        for &zi in &z {
            c1 = mle_update(&c1, zi, &wide1);
            c2 = mle_update(&c2, zi, &wide2);
        }
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        gap = gap
            .max((c1.c_mu - mean).abs())
            .max((c2.c_mu - mean).abs())
            .max((c2.c_sigma2 - var).abs());
    }

    // Phi^{-1}(0.95) to 17 digits
    let independent = 0.0166 / 52f64.sqrt() * 1.6448536269514722;
    let hw = case1_half_width(52, 0.0166, 0.1).unwrap();
    let set = UncertaintySet::mean_only(0.000192, 0.0096, 0.0166f64.powi(2)).unwrap();
    let c = set.initial_estimate(0.005, None).unwrap().at_time(52);
    let (lo, hi, _, _) = region_case1(52, &c, 0.0166, 0.1, &set).unwrap().bounds();
    let width_gap = ((hi - lo) - 2.0 * hw).abs();
    let kappa = chi2_2_upper_quantile(0.1).unwrap();

    let pass = gap <= 1e-12
        && (hw - independent).abs() <= 1e-15
        && (hw - 0.003787).abs() <= 1e-6
        && width_gap <= 1e-15
        && (kappa - 4.605170).abs() <= 5e-7
        && kappa == -2.0 * 0.1f64.ln();
    outcome(
        pass,
        format!("batch gap {gap:.1e} over 100 paths; half-width {hw:.6} (oracle {independent:.6}); kappa {kappa:.6}"),
    )
}

// ---------------------------------------------------------------- 5

fn matern(x: &[f64], y: &[f64], p: &KernelParams) -> f64 {
    let d = x
        .iter()
        .zip(y)
        .zip(&p.length_scales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum::<f64>()
        .sqrt();
    let s = 5f64.sqrt() * d;
    p.signal_variance * (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Dense reference predictor over the raw training inputs, solving the
/// system by Cholesky (`lu = false`) or by LU.
fn dense_predictor<'a>(model: &'a SurrogateModel, raw: &[Vec<f64>], lu: bool) -> impl Fn(&[f64]) -> f64 + 'a {
    let (shift, scale) = model.standardization();
    let (shift, scale) = (shift.to_vec(), scale.to_vec());
    let std = move |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&shift)
            .zip(&scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let p = model.params().clone();
    let n = raw.len();
    let train: Vec<Vec<f64>> = raw.iter().map(|x| std(x)).collect();
    let mut k = DMatrix::from_fn(n, n, |i, j| matern(&train[i], &train[j], &p));
    for i in 0..n {
        k[(i, i)] += p.nugget * p.nugget;
    }
    let offset = model.offset();
    let y = DVector::from_iterator(n, model.targets().iter().map(|t| t - offset));
    let alpha = if lu {
        k.lu().solve(&y).expect("non-singular")
    } else {
        k.cholesky().expect("positive definite").solve(&y)
    };
    move |x: &[f64]| {
        let z = std(x);
        offset
            + train
                .iter()
                .zip(alpha.iter())
                .map(|(t, a)| a * matern(&z, t, &p))
                .sum::<f64>()
    }
}

type TestFn = fn(&[f64]) -> f64;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn value_like(v: &[f64]) -> f64 {
    v[0] * (1.0 + 30.0 * v[1]) + (v[0] / 6.0).sin() - 3.0 * v.get(2).copied().unwrap_or(0.0) * v[0]
}

fn ripple(v: &[f64]) -> f64 {
    v[0] * (1.0 + 30.0 * v[1])
        + 2.0 * (v[0] / 2.0).sin() * (700.0 * v[1]).cos()
        + (40.0 * v.get(2).copied().unwrap_or(0.0)).cos()
}

fn gp_fidelity() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let functions: [(&str, TestFn); 2] = [("value-like", value_like), ("ripple", ripple)];
    for case in ["I", "II"] {
        let cfg = config(&sets(&[("case", case.into())]));
        let solver = cfg.solver_config().unwrap();
        let mesh = generate_mesh(&solver, 200, 5).unwrap();
        let x: Vec<Vec<f64>> = mesh.points[26]
            .iter()
            .map(|y| y.features(&solver.set).as_slice().to_vec())
            .collect();
        let dim = x[0].len();
        let lo: Vec<f64> = (0..dim)
            .map(|j| x.iter().map(|v| v[j]).fold(f64::INFINITY, f64::min))
            .collect();
        let hi: Vec<f64> = (0..dim)
            .map(|j| x.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for (name, f) in functions {
            let y: Vec<f64> = x.iter().map(|v| f(v)).collect();
            let model = fit(&x, &y, &FitOptions::default()).unwrap();
            let train_gap = x
                .iter()
                .zip(&y)
                .map(|(v, t)| (model.predict(v) - t).abs() / t.abs())
                .fold(0.0, f64::max);
            let chol = dense_predictor(&model, &x, false);
            let lu = dense_predictor(&model, &x, true);
            let mut rng = ChaCha8Rng::seed_from_u64(55);
            let (mut gap, mut floor) = (0.0f64, 0.0f64);
            for _ in 0..1000 {
                let q: Vec<f64> = (0..dim).map(|j| rng.random_range(lo[j]..=hi[j])).collect();
                let reference = chol(&q);
                gap = gap.max((model.predict(&q) - reference).abs() / reference.abs());
                floor = floor.max((lu(&q) - reference).abs() / reference.abs());
            }
            pass &= train_gap <= 1e-3 && gap <= 1e-10 && model.params().nugget == 1e-5;
            notes.push(format!(
                "case {case} {name}: train {train_gap:.1e}, dense {gap:.1e} (Cholesky vs LU {floor:.1e})"
            ));
        }
    }
    outcome(
        pass,
        format!("200 points, 1000 queries, relative gaps; {}", notes.join("; ")),
    )
}

// ---------------------------------------------------------------- 6 and 7

struct SeedRun {
    seed: u64,
    ar: robustmv::Summary,
    sr: robustmv::Summary,
    secs: f64,
}

fn desk(case: &str, guess: &str, root: &Path) -> Vec<SeedRun> {
    (1..=5u64)
        .map(|seed| {
            let cfg = config(&sets(&[
                ("case", case.into()),
                ("guess", guess.into()),
                ("market.gamma", "0.2".into()),
                ("market.horizon", "26".into()),
                ("solver.mesh_paths", "100".into()),
                ("solver.mc_samples", "50".into()),
                ("eval.paths", "1000".into()),
                ("eval.trace_paths", "0".into()),
                ("seeds.mesh", seed.to_string()),
                ("seeds.mc", (100 + seed).to_string()),
                ("seeds.eval", (200 + seed).to_string()),
                ("output.dir", format!("{:?}", root.join(format!("{case}-{seed}")).to_string_lossy())),
            ]));
            let started = Instant::now();
            let out = run::run_compare(&cfg).unwrap();
            let run = SeedRun {
                seed,
                ar: out.adaptive.summary,
                sr: out.strong.summary,
                secs: started.elapsed().as_secs_f64(),
            };
            println!(
                "    case {case} seed {seed}: AR mean {:.3} var {:.3} V {:.3} | SR mean {:.3} var {:.3} V {:.3} | {:.0}s",
                run.ar.mean, run.ar.variance, run.ar.value, run.sr.mean, run.sr.variance, run.sr.value, run.secs
            );
            run
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn case2_variance_reduction() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let runs = desk("II", "optimistic", dir.path());
    let ar = median(runs.iter().map(|r| r.ar.variance).collect());
    let sr = median(runs.iter().map(|r| r.sr.variance).collect());
    let wins = runs.iter().filter(|r| r.ar.value > r.sr.value).count();
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    outcome(
        ar <= 0.7 * sr && wins >= 4,
        format!(
            "median var AR {ar:.3} vs SR {sr:.3} (ratio {:.3}, need <= 0.7); AR V higher in {wins}/5 seeds (need >= 4); slowest seed {slowest:.0}s",
            ar / sr
        ),
    )
}

fn case1_parity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let runs = desk("I", "pessimistic", dir.path());
    let in_band = |m: f64| (101.0..=104.0).contains(&m);
    let bad: Vec<u64> = runs
        .iter()
        .filter(|r| !(in_band(r.ar.mean) && in_band(r.sr.mean) && (r.ar.value - r.sr.value).abs() <= 1.0))
        .map(|r| r.seed)
        .collect();
    let widest = runs.iter().map(|r| (r.ar.value - r.sr.value).abs()).fold(0.0, f64::max);
    outcome(
        bad.is_empty(),
        format!("means in [101, 104] and |V_AR - V_SR| <= 1 on {}/5 seeds (largest |dV| {widest:.3}); failing seeds {bad:?}", 5 - bad.len()),
    )
}

// ---------------------------------------------------------------- 8

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = sets(&[
        ("case", "II".into()),
        ("market.horizon", "6".into()),
        ("solver.mesh_paths", "40".into()),
        ("solver.mc_samples", "20".into()),
        ("eval.paths", "300".into()),
    ]);
    let runs = [("first", 4), ("second", 4), ("single", 1)];
    let mut hashes = Vec::new();
    for (name, threads) in runs {
        let mut o = base.clone();
        o.push(format!("output.dir={:?}", dir.path().join(name).to_string_lossy()));
        let cfg = config(&o);
        hashes.push(cfg.hash());
        in_pool(threads, || {
            run::run_solve(&cfg).unwrap();
            run::run_evaluate(&cfg, &cfg.output.dir.join("policy.json")).unwrap();
            run::run_compare(&cfg.with_mode(robustmv::bellman::Mode::AdaptiveRobust)).unwrap();
        });
    }
    let files = [
        "policy.json",
        "eval.json",
        "wealths.csv",
        "traces.csv",
        "compare.json",
        "adaptive-robust/policy.json",
        "strong-robust/policy.json",
        "strong-robust/wealths.csv",
    ];
    let mut differing = Vec::new();
    for file in files {
        let reference = std::fs::read(dir.path().join("first").join(file)).unwrap();
        for (name, _) in &runs[1..] {
            if std::fs::read(dir.path().join(name).join(file)).unwrap() != reference {
                differing.push(format!("{name}/{file}"));
            }
        }
    }
    let same_hash = hashes.windows(2).all(|w| w[0] == w[1]);
    outcome(
        differing.is_empty() && same_hash,
        format!(
            "{} artifacts compared across 2 runs x 4 threads and 1 thread; differing {differing:?}",
            files.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "oracle equivalence", oracle_equivalence),
        (2, "perturbation witness", perturbation_witness),
        (3, "terminal and degenerate identities", terminal_identities),
        (4, "estimation correctness", estimation),
        (5, "GP surrogate fidelity", gp_fidelity),
        (6, "case II desk variance reduction", case2_variance_reduction),
        (7, "case I desk parity", case1_parity),
        (8, "determinism", determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {n}: {} {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
