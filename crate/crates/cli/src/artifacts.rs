//! Files written by the runner. JSON payloads carry the config hash and
//! seeds; CSV files carry them as leading `#` comment lines.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use robustmv::bellman::{SolvedPolicy, POLICY_FORMAT_VERSION};
use robustmv::evaluation::{Comparison, EvalMeta, EvalResult, Summary, TraceRow};
use robustmv::oracle::{Branch, ExactTables, NodeRecord, SubgameReport};

use crate::config::Seeds;
use crate::CliError;

pub const POLICY_FORMAT: &str = "robustmv-policy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seeds: Seeds,
    pub policy: SolvedPolicy,
}

impl PolicyFile {
    pub fn new(config_hash: String, seeds: Seeds, policy: SolvedPolicy) -> Self {
        Self {
            format: POLICY_FORMAT.into(),
            version: POLICY_FORMAT_VERSION,
            config_hash,
            seeds,
            policy,
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let file: PolicyFile = read_json(path)?;
        if file.format != POLICY_FORMAT || file.version != POLICY_FORMAT_VERSION {
            return Err(robustmv::Error::Incompatible(format!(
                "{} is `{}` version {}, expected `{POLICY_FORMAT}` version {POLICY_FORMAT_VERSION}",
                path.display(),
                file.format,
                file.version
            ))
            .into());
        }
        Ok(file)
    }
}

/// `eval.json`: the evaluation without the wealth list (that goes to `wealths.csv`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub config_hash: String,
    /// Hash recorded in the evaluated policy file.
    pub policy_config_hash: String,
    pub seeds: Seeds,
    pub meta: EvalMeta,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareFile {
    pub config_hash: String,
    pub seeds: Seeds,
    pub adaptive: EvalMeta,
    pub strong: EvalMeta,
    pub comparison: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub path: Vec<Branch>,
    pub record: NodeRecord,
}

/// `tables.json` for exact mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablesFile {
    pub config_hash: String,
    pub seeds: Seeds,
    pub max_violation: f64,
    pub max_value_gap: f64,
    pub nodes: Vec<TableRow>,
}

impl TablesFile {
    pub fn new(config_hash: String, seeds: Seeds, tables: &ExactTables, report: &SubgameReport) -> Self {
        Self {
            config_hash,
            seeds,
            max_violation: report.max_violation,
            max_value_gap: report.max_value_gap,
            nodes: tables
                .nodes
                .iter()
                .map(|(k, r)| TableRow {
                    path: k.clone(),
                    record: *r,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config_hash: String,
    pub seeds: Seeds,
    pub tool_version: String,
    pub policy_format_version: u32,
    pub threads: usize,
    pub wall_time_secs: f64,
    /// SHA-256 of each written file.
    pub files: BTreeMap<String, String>,
}

/// `manifest.json`: one entry per command run in the directory. Wall times
/// make it the only file that differs between identical runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    /// Adds or replaces `command` in `dir/manifest.json`.
    pub fn record(dir: &Path, command: &str, entry: ManifestEntry) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let mut manifest: Manifest = if path.exists() {
            read_json(&path)?
        } else {
            Manifest::default()
        };
        manifest.runs.insert(command.to_string(), entry);
        write_json(&path, &manifest)?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<String, CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(bytes))
}

/// Pretty JSON with a trailing newline; returns the SHA-256 of the bytes written.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn csv_bytes<F>(config_hash: &str, seeds: &Seeds, header: &[&str], fill: F) -> Result<Vec<u8>, csv::Error>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut out = Vec::new();
    writeln!(out, "# config_hash={config_hash}")?;
    writeln!(
        out,
        "# seeds mesh={} mc={} eval={} oracle={}",
        seeds.mesh, seeds.mc, seeds.eval, seeds.oracle
    )?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header)?;
        fill(&mut w)?;
        w.flush()?;
    }
    Ok(out)
}

fn csv_failure(path: &Path, e: csv::Error) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// `wealths.csv`: `path,wealth`.
pub fn write_wealths(path: &Path, config_hash: &str, seeds: &Seeds, wealths: &[f64]) -> Result<String, CliError> {
    let bytes = csv_bytes(config_hash, seeds, &["path", "wealth"], |w| {
        for (i, x) in wealths.iter().enumerate() {
            w.write_record([i.to_string(), x.to_string()])?;
        }
        Ok(())
    })
    .map_err(|e| csv_failure(path, e))?;
    write_bytes(path, &bytes)
}

/// `traces.csv`: one row per traced `(path, t)`.
pub fn write_traces(path: &Path, config_hash: &str, seeds: &Seeds, traces: &[TraceRow]) -> Result<String, CliError> {
    let header = ["path", "t", "wealth", "c_mu", "c_sigma2", "action"];
    let bytes = csv_bytes(config_hash, seeds, &header, |w| {
        for r in traces {
            w.write_record([
                r.path.to_string(),
                r.t.to_string(),
                r.wealth.to_string(),
                r.c_mu.to_string(),
                r.c_sigma2.to_string(),
                r.action.to_string(),
            ])?;
        }
        Ok(())
    })
    .map_err(|e| csv_failure(path, e))?;
    write_bytes(path, &bytes)
}

/// Reads `wealths.csv` back, skipping comment lines.
pub fn read_wealths(path: &Path) -> Result<Vec<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_failure(path, e))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_failure(path, e))?;
        let w = row.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| CliError::Parse {
            path: path.to_path_buf(),
            reason: format!("bad wealth row {row:?}"),
        })?;
        out.push(w);
    }
    Ok(out)
}

/// Files of one evaluation inside `dir`; returns `(name, sha256)` pairs.
pub fn write_evaluation(
    dir: &Path,
    config_hash: &str,
    policy_config_hash: &str,
    seeds: &Seeds,
    result: &EvalResult,
) -> Result<Vec<(String, String)>, CliError> {
    let file = EvalFile {
        config_hash: config_hash.into(),
        policy_config_hash: policy_config_hash.into(),
        seeds: *seeds,
        meta: result.meta.clone(),
        summary: result.summary,
    };
    Ok(vec![
        ("eval.json".into(), write_json(&dir.join("eval.json"), &file)?),
        (
            "wealths.csv".into(),
            write_wealths(&dir.join("wealths.csv"), config_hash, seeds, &result.wealths)?,
        ),
        (
            "traces.csv".into(),
            write_traces(&dir.join("traces.csv"), config_hash, seeds, &result.traces)?,
        ),
    ])
}

/// `dir/name` for a path relative to the output root, e.g. `adaptive-robust/eval.json`.
pub fn relative_name(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wealth_csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let w = vec![101.25, 0.1 + 0.2, 1e-300, 102.01966123456789];
        write_wealths(&path, "abc", &Seeds::default(), &w).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_hash=abc\n# seeds mesh=1"));
        assert_eq!(read_wealths(&path).unwrap(), w);
    }

    #[test]
    fn manifest_keeps_earlier_commands() {
        let dir = tempfile::tempdir().unwrap();
        let entry = ManifestEntry {
            config_hash: "h".into(),
            seeds: Seeds::default(),
            tool_version: "0".into(),
            policy_format_version: 1,
            threads: 1,
            wall_time_secs: 0.5,
            files: BTreeMap::new(),
        };
        Manifest::record(dir.path(), "solve", entry.clone()).unwrap();
        Manifest::record(dir.path(), "evaluate", entry).unwrap();
        let m: Manifest = read_json(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.runs.keys().collect::<Vec<_>>(), ["evaluate", "solve"]);
    }
}
