use std::path::Path;
use std::process::{Command, Output};

use robustmv_cli::artifacts::{read_wealths, PolicyFile};

const SMALL: &[&str] = &[
    "--set",
    "market.horizon=3",
    "--set",
    "solver.mesh_paths=12",
    "--set",
    "solver.mc_samples=6",
    "--set",
    "eval.paths=64",
];

fn robustmv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robustmv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn small(dir: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend_from_slice(SMALL);
    robustmv(dir, &all)
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn print_config_shows_defaults_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let out = robustmv(dir.path(), &["print-config", "--case", "II"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# config_hash = "));
    assert!(text.contains("case = \"II\""));
    assert!(text.contains("sigma_star = 0.0416"));
}

#[test]
fn config_errors_exit_with_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = robustmv(dir.path(), &["solve", "--set", "case2.sigma_lo=0.5", "--case", "II"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma2_lo <= sigma2_hi"));
    let out = robustmv(dir.path(), &["solve", "--set", "market.horizons=3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_solve_and_evaluate_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let out = small(dir.path(), &["solve", "--out", run]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let policy = format!("{run}/policy.json");
        let out = small(dir.path(), &["evaluate", "--policy", &policy, "--out", run]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["policy.json", "eval.json", "wealths.csv", "traces.csv"] {
        assert_eq!(
            read(dir.path().join("a").join(file)),
            read(dir.path().join("b").join(file)),
            "{file}"
        );
    }
    let file = PolicyFile::read(&dir.path().join("a/policy.json")).unwrap();
    assert_eq!(file.policy.steps.len(), 3);
    assert_eq!(read_wealths(&dir.path().join("a/wealths.csv")).unwrap().len(), 64);
    let manifest = String::from_utf8(read(dir.path().join("a/manifest.json"))).unwrap();
    assert!(manifest.contains("\"solve\"") && manifest.contains("\"evaluate\""));
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    for (run, threads) in [("one", "1"), ("three", "3")] {
        let out = small(
            dir.path(),
            &["solve", "--case", "II", "--out", run, "--threads", threads],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(
        read(dir.path().join("one/policy.json")),
        read(dir.path().join("three/policy.json"))
    );
}

#[test]
fn mismatched_policy_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small(dir.path(), &["solve", "--out", "p"]).status.success());
    let out = small(
        dir.path(),
        &["evaluate", "--policy", "p/policy.json", "--set", "market.gamma=0.9"],
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different market"));

    std::fs::write(dir.path().join("junk.json"), "{\"format\": \"other\"}").unwrap();
    let out = small(dir.path(), &["evaluate", "--policy", "junk.json"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn compare_writes_both_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = small(
        dir.path(),
        &["compare", "--case", "II", "--guess", "optimistic", "--out", "c"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    for stat in ["mean", "var", "q0.90", "max", "min", "V"] {
        assert!(
            table.lines().any(|l| l.split_whitespace().next() == Some(stat)),
            "{stat} missing:\n{table}"
        );
    }
    for file in [
        "compare.json",
        "adaptive-robust/policy.json",
        "strong-robust/wealths.csv",
    ] {
        assert!(dir.path().join("c").join(file).exists(), "{file}");
    }
}

#[test]
fn exact_mode_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("exact.toml"),
        "mode = \"exact\"\n\n[discrete]\nactions = [0.0, 1.0]\nthetas = [[0.01, 0.1], [0.03, 0.2]]\nregions = [[0, 1], [1]]\n",
    )
    .unwrap();
    let out = robustmv(dir.path(), &["solve", "-c", "exact.toml", "--out", "x"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tables: serde_json::Value = serde_json::from_slice(&read(dir.path().join("x/tables.json"))).unwrap();
    // root plus 2 x 2 x 2 children
    assert_eq!(tables["nodes"].as_array().unwrap().len(), 9);
    assert_eq!(tables["max_violation"].as_f64().unwrap(), 0.0);

    let out = robustmv(dir.path(), &["oracle-check", "-c", "exact.toml", "--out", "x"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(" ok"));
}

#[test]
fn oracle_campaign_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = robustmv(dir.path(), &["oracle-check", "--out", "o"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 20);
}
