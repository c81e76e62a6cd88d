//! Run configuration.

use std::path::{Path, PathBuf};

use pmean::envs::{DisasterConfig, RandomMdpSpec};
use pmean::error::from_json_str;
use pmean::mdp::DEFAULT_PATH_CAP;
use pmean::portfolio::default_alphas;
use pmean::welfare::check_alpha;
use pmean::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub environment: EnvironmentRef,
    #[serde(default)]
    pub policies: PolicySpec,
    #[serde(default)]
    pub rule: Rule,
    /// Required when `rule` is `esr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub esr: Option<EsrSettings>,
    pub algorithm: AlgorithmConfig,
    /// Baseline comparisons at each portfolio size the run produces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baselines: Option<BaselineSettings>,
    #[serde(default)]
    pub grid: GridSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("pmean-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentRef {
    /// `disaster-reduced`, `disaster` or `smoke`.
    Builtin(String),
    Disaster(DisasterConfig),
    MdpFile(PathBuf),
    Random(RandomMdpSpec),
}

impl Default for EnvironmentRef {
    fn default() -> Self {
        EnvironmentRef::Builtin("disaster-reduced".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySpec {
    File(PathBuf),
    /// Priority policies for disaster environments.
    Generator {
        count: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Exhaustive {
        #[serde(default = "default_max_count")]
        max_count: usize,
        #[serde(default)]
        stationary: bool,
    },
    Random {
        count: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

fn default_max_count() -> usize {
    100_000
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::Generator { count: 10_000, seed: None }
    }
}

/// Aggregation rule: ESR scalarizes each trajectory, SER the expected return vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Esr,
    #[default]
    Ser,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EsrMode {
    Exact,
    Mc,
    /// Exact when every policy's path count is within `path_cap`, otherwise Monte Carlo.
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsrSettings {
    #[serde(default)]
    pub mode: EsrMode,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_path_cap")]
    pub path_cap: f64,
    /// Monte-Carlo comparisons are widened by this many standard errors.
    #[serde(default)]
    pub margin: f64,
}

fn default_samples() -> usize {
    10_000
}

fn default_path_cap() -> f64 {
    DEFAULT_PATH_CAP
}

impl Default for EsrSettings {
    fn default() -> Self {
        EsrSettings { mode: EsrMode::Auto, n_samples: default_samples(), path_cap: default_path_cap(), margin: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmConfig {
    Portfolio {
        alpha: f64,
    },
    Budget {
        #[serde(rename = "K")]
        k: usize,
        #[serde(default = "default_p0")]
        p0: f64,
    },
    Sweep {
        #[serde(default = "default_alphas")]
        alphas: Vec<f64>,
        /// Also run the budget heuristic with `K` equal to each size.
        #[serde(default)]
        compare_budget: bool,
        #[serde(default = "default_p0")]
        p0: f64,
    },
    Baseline {
        method: BaselineMethod,
        #[serde(rename = "K")]
        k: usize,
        #[serde(default = "default_trials")]
        trials: usize,
        #[serde(default = "default_p0")]
        p0: f64,
    },
    Evaluate {
        portfolio: PathBuf,
    },
}

impl AlgorithmConfig {
    fn smallest_alpha(&self) -> Option<f64> {
        match self {
            AlgorithmConfig::Portfolio { alpha } => Some(*alpha),
            AlgorithmConfig::Sweep { alphas, .. } => alphas.first().copied(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    RandomPolicy,
    RandomP,
}

fn default_p0() -> f64 {
    -100.0
}

fn default_trials() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSettings {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "yes")]
    pub random_policy: bool,
    #[serde(default = "yes")]
    pub random_p: bool,
    /// Lower end of the random-p range.
    #[serde(default = "default_p0")]
    pub p0: f64,
}

fn yes() -> bool {
    true
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings { trials: default_trials(), random_policy: true, random_p: true, p0: default_p0() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low: Option<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub rule: Option<Rule>,
    pub mc_samples: Option<usize>,
    pub grid_points: Option<usize>,
    pub grid_low: Option<f64>,
}

impl RunConfig {
    pub fn new(algorithm: AlgorithmConfig) -> Self {
        RunConfig {
            environment: EnvironmentRef::default(),
            policies: PolicySpec::default(),
            rule: Rule::default(),
            esr: None,
            algorithm,
            baselines: None,
            grid: GridSettings::default(),
            seed: 0,
            output_dir: default_output_dir(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = from_json_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(rule) = o.rule {
            self.rule = rule;
        }
        if let Some(n) = o.mc_samples {
            self.rule = Rule::Esr;
            let esr = self.esr.get_or_insert_with(EsrSettings::default);
            esr.mode = EsrMode::Mc;
            esr.n_samples = n;
        }
        if self.rule == Rule::Esr && self.esr.is_none() {
            self.esr = Some(EsrSettings::default());
        }
        if o.grid_points.is_some() {
            self.grid.points = o.grid_points;
        }
        if o.grid_low.is_some() {
            self.grid.low = o.grid_low;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match (self.rule, &self.esr) {
            (Rule::Esr, None) => return bad("rule `esr` needs an `esr` block with an evaluation mode".into()),
            (Rule::Ser, Some(_)) => return bad("an `esr` block was given but the rule is `ser`".into()),
            (Rule::Esr, Some(esr)) => {
                if esr.n_samples == 0 || !(esr.path_cap >= 1.0) || !(esr.margin >= 0.0) {
                    return bad("esr needs n_samples ≥ 1, path_cap ≥ 1 and margin ≥ 0".into());
                }
            }
            (Rule::Ser, None) => {}
        }
        match &self.algorithm {
            AlgorithmConfig::Portfolio { alpha } => check_alpha(*alpha).map_err(|e| Error::Config(e.to_string()))?,
            AlgorithmConfig::Budget { k, p0 } => {
                if *k < 1 || !p0.is_finite() || *p0 >= 1.0 {
                    return bad(format!("budget needs K ≥ 1 and a finite p0 < 1, got K = {k}, p0 = {p0}"));
                }
            }
            AlgorithmConfig::Sweep { alphas, p0, .. } => {
                if alphas.is_empty() || alphas.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("sweep alphas must be non-empty and strictly ascending".into());
                }
                for &a in alphas {
                    check_alpha(a).map_err(|e| Error::Config(e.to_string()))?;
                }
                if !p0.is_finite() || *p0 >= 1.0 {
                    return bad(format!("p0 must be finite and below 1, got {p0}"));
                }
            }
            AlgorithmConfig::Baseline { k, trials, p0, .. } => {
                if *k < 1 || *trials < 1 || !p0.is_finite() || *p0 >= 1.0 {
                    return bad("baseline needs K ≥ 1, trials ≥ 1 and a finite p0 < 1".into());
                }
            }
            AlgorithmConfig::Evaluate { .. } => {}
        }
        if let Some(b) = &self.baselines {
            if b.trials < 1 || !b.p0.is_finite() || b.p0 >= 1.0 {
                return bad("baselines need trials ≥ 1 and a finite p0 < 1".into());
            }
        }
        if let Some(points) = self.grid.points {
            if points < 2 {
                return bad(format!("grid needs at least 2 points, got {points}"));
            }
        }
        if let Some(low) = self.grid.low {
            if !low.is_finite() || low >= 1.0 {
                return bad(format!("grid low end must be finite and below 1, got {low}"));
            }
        }
        Ok(())
    }

    /// Hash of the configuration with the output directory blanked, so runs that differ only
    /// in where they write share a hash.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serialization cannot fail");
        hex::encode(Sha256::digest(bytes))
    }

    pub(crate) fn smallest_alpha(&self) -> Option<f64> {
        self.algorithm.smallest_alpha()
    }
}
