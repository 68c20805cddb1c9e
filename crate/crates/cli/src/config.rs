//! Run configuration: a TOML file with nested sections, dotted `--set`
//! overrides, and a SHA-256 hash of the resolved values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use robustmv::bellman::{Mode, SolverConfig};
use robustmv::estimation::UncertaintySet;
use robustmv::gp::FitOptions;
use robustmv::market::{uniform_actions, MarketConfig, ThetaPoint};
use robustmv::oracle::DiscreteInstance;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    /// Unknown mean, known volatility.
    I,
    /// Unknown mean and volatility.
    II,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guess {
    Optimistic,
    Pessimistic,
    /// Take `custom.mu0` (and `custom.sigma0` in case II).
    Custom,
}

impl Guess {
    pub fn label(self) -> &'static str {
        match self {
            Guess::Optimistic => "optimistic",
            Guess::Pessimistic => "pessimistic",
            Guess::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketSection {
    pub horizon: usize,
    pub rate: f64,
    pub initial_wealth: f64,
    pub gamma: f64,
    /// Size of the uniform action grid on `[0, 1]`.
    pub actions: usize,
}

impl Default for MarketSection {
    fn default() -> Self {
        Self {
            horizon: 52,
            rate: 0.0003846,
            initial_wealth: 100.0,
            gamma: 0.2,
            actions: 11,
        }
    }
}

/// Mean-return parameters shared by both cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mu_star: f64,
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub mu0_optimistic: f64,
    pub mu0_pessimistic: f64,
    pub alpha: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            mu_star: 0.00192,
            mu_lo: 0.000192,
            mu_hi: 0.0096,
            mu0_optimistic: 0.002308,
            mu0_pessimistic: 0.001538,
            alpha: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Case1Section {
    pub sigma: f64,
    pub resolution: usize,
}

impl Default for Case1Section {
    fn default() -> Self {
        Self {
            sigma: 0.0166,
            resolution: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Case2Section {
    pub sigma_star: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub sigma0_optimistic: f64,
    pub sigma0_pessimistic: f64,
    /// Grid points per axis of the `(mu, sigma^2)` grid.
    pub resolution: usize,
}

impl Default for Case2Section {
    fn default() -> Self {
        Self {
            sigma_star: 0.0416,
            sigma_lo: 0.0069,
            sigma_hi: 0.1109,
            sigma0_optimistic: 0.0347,
            sigma0_pessimistic: 0.0485,
            resolution: 7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CustomGuess {
    pub mu0: Option<f64>,
    pub sigma0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub mesh_paths: usize,
    pub mc_samples: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            mesh_paths: 200,
            mc_samples: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSection {
    pub nugget: f64,
    pub max_nugget: f64,
    pub center_targets: bool,
    pub length_scale_bounds: [f64; 2],
    pub signal_variance_bounds: [f64; 2],
    /// Learn the noise variance inside this box (multiples of the target variance).
    pub noise_variance_bounds: Option<[f64; 2]>,
    pub start_seeds: Vec<u64>,
    pub sweeps: usize,
    pub tolerance: f64,
}

impl Default for GpSection {
    fn default() -> Self {
        let f = FitOptions::default();
        Self {
            nugget: f.nugget,
            max_nugget: f.max_nugget,
            center_targets: f.center_targets,
            length_scale_bounds: [f.length_scale_bounds.0, f.length_scale_bounds.1],
            signal_variance_bounds: [f.signal_variance_bounds.0, f.signal_variance_bounds.1],
            noise_variance_bounds: None,
            start_seeds: f.start_seeds,
            sweeps: f.sweeps,
            tolerance: f.tolerance,
        }
    }
}

impl GpSection {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            nugget: self.nugget,
            max_nugget: self.max_nugget,
            center_targets: self.center_targets,
            length_scale_bounds: (self.length_scale_bounds[0], self.length_scale_bounds[1]),
            signal_variance_bounds: (self.signal_variance_bounds[0], self.signal_variance_bounds[1]),
            noise_variance_bounds: self.noise_variance_bounds.map(|b| (b[0], b[1])),
            start_seeds: self.start_seeds.clone(),
            sweeps: self.sweeps,
            tolerance: self.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub paths: usize,
    /// Paths whose per-step states go to `traces.csv`.
    pub trace_paths: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            paths: 2000,
            trace_paths: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub mesh: u64,
    pub mc: u64,
    pub eval: u64,
    /// Root seed of `oracle-check`'s random instances.
    pub oracle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            mesh: 1,
            mc: 2,
            eval: 3,
            oracle: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

/// Finite instance for `mode = "exact"`; rate, gamma and initial wealth come from `[market]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteSection {
    pub actions: Vec<f64>,
    /// `(mu, sigma)` pairs; each gets the two-point noise `mu -/+ sigma`.
    pub thetas: Vec<[f64; 2]>,
    /// Indices into `thetas` available at each step; its length is the horizon.
    pub regions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub case: Case,
    pub mode: Mode,
    pub guess: Guess,
    pub market: MarketSection,
    pub model: ModelSection,
    pub case1: Case1Section,
    pub case2: Case2Section,
    pub custom: CustomGuess,
    pub solver: SolverSection,
    pub gp: GpSection,
    pub eval: EvalSection,
    pub seeds: Seeds,
    pub output: OutputSection,
    pub discrete: Option<DiscreteSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            case: Case::I,
            mode: Mode::AdaptiveRobust,
            guess: Guess::Pessimistic,
            market: MarketSection::default(),
            model: ModelSection::default(),
            case1: Case1Section::default(),
            case2: Case2Section::default(),
            custom: CustomGuess::default(),
            solver: SolverSection::default(),
            gp: GpSection::default(),
            eval: EvalSection::default(),
            seeds: Seeds::default(),
            output: OutputSection::default(),
            discrete: None,
        }
    }
}

/// Sets `path = raw` inside `table`, creating intermediate tables. `raw` is
/// read as a TOML value and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<(), CliError> {
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::Config(format!("empty override key `{path}`")))?;
    let mut cursor = table;
    for part in parts {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{part}` in `{path}` is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads an optional TOML file, applies `key=value` overrides in order and validates.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
            apply_override(&mut table, key.trim(), raw.trim())?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.mode == Mode::Exact {
            self.discrete_instance()?;
        } else {
            self.solver_config()?.validate()?;
            self.theta_star()?;
        }
        if self.eval.paths == 0 {
            return Err(robustmv::Error::Config {
                field: "eval.paths".into(),
                reason: "need at least one path".into(),
            }
            .into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = OutputSection::default();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        format!("{:x}", Sha256::digest(&bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn uncertainty_set(&self) -> robustmv::Result<UncertaintySet> {
        let m = &self.model;
        match self.case {
            Case::I => UncertaintySet::mean_only(m.mu_lo, m.mu_hi, self.case1.sigma * self.case1.sigma),
            Case::II => {
                let c = &self.case2;
                UncertaintySet::mean_variance(m.mu_lo, m.mu_hi, c.sigma_lo * c.sigma_lo, c.sigma_hi * c.sigma_hi)
            }
        }
    }

    /// Initial `(mu0, sigma0)` for the configured guess; `sigma0` is `None` in case I.
    pub fn initial_guess(&self) -> robustmv::Result<(f64, Option<f64>)> {
        let missing = |field: &str| robustmv::Error::Config {
            field: field.into(),
            reason: "required when guess = \"custom\"".into(),
        };
        let mu0 = match self.guess {
            Guess::Optimistic => self.model.mu0_optimistic,
            Guess::Pessimistic => self.model.mu0_pessimistic,
            Guess::Custom => self.custom.mu0.ok_or_else(|| missing("custom.mu0"))?,
        };
        let sigma0 = match (self.case, self.guess) {
            (Case::I, _) => None,
            (Case::II, Guess::Optimistic) => Some(self.case2.sigma0_optimistic),
            (Case::II, Guess::Pessimistic) => Some(self.case2.sigma0_pessimistic),
            (Case::II, Guess::Custom) => Some(self.custom.sigma0.ok_or_else(|| missing("custom.sigma0"))?),
        };
        Ok((mu0, sigma0))
    }

    pub fn theta_star(&self) -> robustmv::Result<ThetaPoint> {
        let sigma = match self.case {
            Case::I => self.case1.sigma,
            Case::II => self.case2.sigma_star,
        };
        ThetaPoint::new(self.model.mu_star, sigma * sigma)
    }

    pub fn market(&self) -> MarketConfig {
        MarketConfig {
            rate: self.market.rate,
            horizon: self.market.horizon,
            initial_wealth: self.market.initial_wealth,
            gamma: self.market.gamma,
            actions: uniform_actions(self.market.actions),
        }
    }

    /// Solver configuration for the configured mode (which must not be exact).
    pub fn solver_config(&self) -> robustmv::Result<SolverConfig> {
        let set = self.uncertainty_set()?;
        let (mu0, sigma0) = self.initial_guess()?;
        if self.market.actions < 1 {
            return Err(robustmv::Error::Config {
                field: "market.actions".into(),
                reason: "need at least one action".into(),
            });
        }
        let initial = set.initial_estimate(mu0, sigma0.map(|s| s * s))?;
        let config = SolverConfig {
            market: self.market(),
            set,
            initial,
            alpha: self.model.alpha,
            resolution: match self.case {
                Case::I => self.case1.resolution,
                Case::II => self.case2.resolution,
            },
            mesh_paths: self.solver.mesh_paths,
            mc_samples: self.solver.mc_samples,
            mesh_seed: self.seeds.mesh,
            mc_seed: self.seeds.mc,
            mode: self.mode,
            fit: self.gp.fit_options(),
        };
        Ok(config)
    }

    /// The same run with a different adversary.
    pub fn with_mode(&self, mode: Mode) -> RunConfig {
        RunConfig { mode, ..self.clone() }
    }

    pub fn discrete_instance(&self) -> robustmv::Result<DiscreteInstance> {
        let d = self.discrete.as_ref().ok_or_else(|| robustmv::Error::Config {
            field: "discrete".into(),
            reason: "mode = \"exact\" needs a [discrete] block".into(),
        })?;
        let thetas = d
            .thetas
            .iter()
            .map(|[mu, sigma]| ThetaPoint::new(*mu, sigma * sigma))
            .collect::<robustmv::Result<Vec<_>>>()?;
        DiscreteInstance::two_point(
            self.market.rate,
            self.market.gamma,
            self.market.initial_wealth,
            d.actions.clone(),
            thetas,
            d.regions.clone(),
        )
    }

    /// Labels copied into evaluation metadata.
    pub fn labels(&self) -> Vec<(String, String)> {
        vec![
            ("case".into(), format!("{:?}", self.case)),
            ("guess".into(), self.guess.label().into()),
        ]
    }
}
