//! Environment construction, run orchestration and result persistence.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use pmean::envs::{self, DisasterConfig, DisasterModel};
use pmean::mdp::{FiniteMdp, MdpBuilder};
use pmean::oracle::{Aggregation, CallRecord, Evaluator, Oracle};
use pmean::policy::{enumerate_deterministic_policies, load_policy_set, PolicySet};
use pmean::portfolio::{
    alpha_sweep_with_margin, approximation_factor, budget_constrained_portfolio, p_mean_portfolio, random_p_baseline,
    random_policy_baseline, Algorithm, EvalReport, GridSpec, LineSearch, Portfolio,
};
use pmean::seeding::derive_seed;
use pmean::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AlgorithmConfig, BaselineMethod, EnvironmentRef, EsrMode, PolicySpec, Rule, RunConfig};

/// An MDP plus, for disaster instances, its decoded spaces.
pub struct Environment {
    pub mdp: Arc<FiniteMdp>,
    pub disaster: Option<DisasterModel>,
}

/// Builds the configured environment. Failures other than size-cap refusals are reported as
/// environment errors.
pub fn build_environment(env: &EnvironmentRef) -> Result<Environment> {
    let disaster = |config: &DisasterConfig| -> Result<Environment> {
        let model = DisasterModel::new(config)?;
        let mdp = envs::build_from_model(&model)?;
        Ok(Environment { mdp: Arc::new(mdp), disaster: Some(model) })
    };
    let built = match env {
        EnvironmentRef::Builtin(name) => match name.as_str() {
            "disaster-reduced" => disaster(&DisasterConfig::reduced()),
            "disaster" => disaster(&DisasterConfig::default()),
            "smoke" => MdpBuilder::uniform(3, 2, 3, 2, 1.0)
                .build()
                .map(|mdp| Environment { mdp: Arc::new(mdp), disaster: None }),
            other => return Err(Error::Config(format!("unknown builtin environment `{other}`"))),
        },
        EnvironmentRef::Disaster(config) => disaster(config),
        EnvironmentRef::MdpFile(path) => {
            FiniteMdp::load(path).map(|mdp| Environment { mdp: Arc::new(mdp), disaster: None })
        }
        EnvironmentRef::Random(spec) => {
            envs::random_mdp(spec).map(|mdp| Environment { mdp: Arc::new(mdp), disaster: None })
        }
    };
    built.map_err(|e| match e {
        Error::SizeCap { .. } | Error::Config(_) => e,
        other => Error::Environment(other.to_string()),
    })
}

pub fn build_policies(spec: &PolicySpec, env: &Environment, master_seed: u64) -> Result<PolicySet> {
    let set = match spec {
        PolicySpec::File(path) => load_policy_set(path)?,
        PolicySpec::Generator { count, seed } => {
            let model = env
                .disaster
                .as_ref()
                .ok_or_else(|| Error::Config("the policy generator needs a disaster environment".into()))?;
            envs::generate_from_model(model, *count, seed.unwrap_or(master_seed))?
        }
        PolicySpec::Exhaustive { max_count, stationary } => {
            enumerate_deterministic_policies(&env.mdp, *max_count, *stationary)?
        }
        PolicySpec::Random { count, seed } => envs::random_policy_set(&env.mdp, *count, seed.unwrap_or(master_seed))?,
    };
    set.check_against(&env.mdp)?;
    Ok(set.with_mdp_ref(&env.mdp))
}

pub fn build_aggregation(config: &RunConfig, mdp: &FiniteMdp, policies: &PolicySet) -> Result<Aggregation> {
    match (config.rule, &config.esr) {
        (Rule::Ser, _) => Ok(Aggregation::Ser),
        (Rule::Esr, None) => Err(Error::Config("rule `esr` needs an `esr` block".into())),
        (Rule::Esr, Some(esr)) => {
            let seed = derive_seed(&[config.seed, 3]);
            Ok(match esr.mode {
                EsrMode::Exact => Aggregation::EsrExact { path_cap: esr.path_cap },
                EsrMode::Mc => Aggregation::EsrMc { n_samples: esr.n_samples, seed },
                EsrMode::Auto => Aggregation::esr_auto(mdp, policies, esr.path_cap, esr.n_samples, seed)?,
            })
        }
    }
}

/// Environment, policy set and evaluator for a configuration.
pub fn build_evaluator(config: &RunConfig) -> Result<(Environment, Evaluator)> {
    let env = build_environment(&config.environment)?;
    let policies = build_policies(&config.policies, &env, config.seed)?;
    let aggregation = build_aggregation(config, &env.mdp, &policies)?;
    let evaluator = Evaluator::new(env.mdp.clone(), Arc::new(policies), aggregation)?;
    Ok((env, evaluator))
}

pub fn grid_spec(config: &RunConfig, n_stakeholders: usize) -> Result<GridSpec> {
    let mut grid = GridSpec::default_for(n_stakeholders, config.smallest_alpha())?;
    if let Some(points) = config.grid.points {
        grid.points = points;
    }
    if let Some(low) = config.grid.low {
        grid.low = low;
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLedger {
    pub name: String,
    pub oracle_calls: u64,
    pub point_evaluations: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub wall_clock_seconds: f64,
    pub aggregation: String,
    pub stages: Vec<StageLedger>,
    pub files: Vec<FileEntry>,
    pub degraded: bool,
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub size: usize,
    pub method: String,
    pub alpha: Option<f64>,
    /// Mean over trials for the random baselines.
    pub q_min: f64,
    pub oracle_calls: f64,
    pub trials: usize,
}

#[derive(Serialize)]
struct SweepRecord<'a> {
    size: usize,
    alpha: f64,
    portfolio: &'a Portfolio,
    #[serde(skip_serializing_if = "Option::is_none")]
    budget: Option<&'a Portfolio>,
}

#[derive(Serialize)]
struct LedgerFile<'a> {
    aggregation: String,
    stages: &'a [StageLedger],
}

struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("output serialization cannot fail");
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn report(&mut self, name: &str, report: &EvalReport) -> Result<()> {
        let mut bytes = Vec::new();
        report.write_csv(&mut bytes)?;
        self.write(name, &bytes)
    }

    fn table(&mut self, rows: &[TableRow]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row).map_err(|e| Error::invalid("table", e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid("table", e.to_string()))?;
        self.write("table.csv", &bytes)
    }
}

fn stage(name: impl Into<String>, portfolio: &Portfolio) -> StageLedger {
    StageLedger {
        name: name.into(),
        oracle_calls: portfolio.oracle_calls,
        point_evaluations: portfolio.point_evaluations,
        records: Vec::new(),
    }
}

fn row(size: usize, portfolio: &Portfolio, report: &EvalReport) -> TableRow {
    TableRow {
        size,
        method: portfolio.algorithm.label().to_string(),
        alpha: portfolio.alpha,
        q_min: report.q_min,
        oracle_calls: portfolio.oracle_calls as f64,
        trials: 1,
    }
}

fn baseline_row(size: usize, method: Algorithm, portfolios: &[Portfolio], reports: &[EvalReport]) -> TableRow {
    let n = portfolios.len() as f64;
    TableRow {
        size,
        method: method.label().to_string(),
        alpha: None,
        q_min: reports.iter().map(|r| r.q_min).sum::<f64>() / n,
        oracle_calls: portfolios.iter().map(|p| p.oracle_calls as f64).sum::<f64>() / n,
        trials: portfolios.len(),
    }
}

/// Runs the configured algorithm and writes every output into `config.output_dir`.
pub fn run(config: &RunConfig) -> Result<RunManifest> {
    config.validate()?;
    let started = Instant::now();
    let (_env, evaluator) = build_evaluator(config)?;
    let grid = grid_spec(config, evaluator.mdp().n_rewards())?;
    let margin = config.esr.as_ref().map_or(0.0, |e| e.margin);
    let baseline_seed = derive_seed(&[config.seed, 2]);
    let mut out = Outputs::new(&config.output_dir)?;
    let mut stages = Vec::new();
    let mut rows = Vec::new();
    let mut sizes = Vec::new();
    let mut degraded = false;

    let evaluate = |portfolio: &Portfolio| approximation_factor(portfolio, &mut Oracle::new(&evaluator), &grid);

    match &config.algorithm {
        AlgorithmConfig::Portfolio { alpha } => {
            let mut oracle = Oracle::new(&evaluator).with_margin(margin);
            let portfolio = p_mean_portfolio(&mut oracle, *alpha)?;
            stages.push(StageLedger {
                name: portfolio.algorithm.label().into(),
                oracle_calls: oracle.ledger().oracle_calls,
                point_evaluations: oracle.ledger().point_evaluations,
                records: oracle.ledger().records.clone(),
            });
            let report = evaluate(&portfolio)?;
            degraded |= portfolio.is_degraded();
            out.json("portfolio.json", &portfolio)?;
            out.json::<[LineSearch]>("traces.json", &portfolio.searches)?;
            out.report("report.csv", &report)?;
            rows.push(row(portfolio.size(), &portfolio, &report));
            sizes.push(portfolio.size());
        }
        AlgorithmConfig::Budget { k, p0 } => {
            let mut oracle = Oracle::new(&evaluator).with_margin(margin);
            let portfolio = budget_constrained_portfolio(&mut oracle, *k, *p0)?;
            stages.push(StageLedger {
                name: portfolio.algorithm.label().into(),
                oracle_calls: oracle.ledger().oracle_calls,
                point_evaluations: oracle.ledger().point_evaluations,
                records: oracle.ledger().records.clone(),
            });
            let report = evaluate(&portfolio)?;
            out.json("portfolio.json", &portfolio)?;
            out.report("report.csv", &report)?;
            rows.push(row(*k, &portfolio, &report));
            sizes.push(*k);
        }
        AlgorithmConfig::Sweep { alphas, compare_budget, p0 } => {
            let sweep = alpha_sweep_with_margin(&evaluator, alphas, margin)?;
            let mut budgets = Vec::new();
            for (&size, entry) in &sweep {
                let report = evaluate(&entry.portfolio)?;
                degraded |= entry.portfolio.is_degraded();
                stages.push(stage(format!("p-MeanPortfolio alpha={}", entry.alpha), &entry.portfolio));
                out.report(&format!("reports/p-mean-size-{size}.csv"), &report)?;
                rows.push(row(size, &entry.portfolio, &report));
                if *compare_budget {
                    let budget = budget_constrained_portfolio(&mut Oracle::new(&evaluator).with_margin(margin), size, *p0)?;
                    let report = evaluate(&budget)?;
                    stages.push(stage(format!("BudgetConstrainedPortfolio K={size}"), &budget));
                    out.report(&format!("reports/budget-size-{size}.csv"), &report)?;
                    rows.push(row(size, &budget, &report));
                    budgets.push(budget);
                }
                sizes.push(size);
            }
            let records: Vec<SweepRecord> = sweep
                .iter()
                .enumerate()
                .map(|(i, (&size, e))| SweepRecord {
                    size,
                    alpha: e.alpha,
                    portfolio: &e.portfolio,
                    budget: budgets.get(i),
                })
                .collect();
            out.json("portfolios.json", &records)?;
        }
        AlgorithmConfig::Baseline { method, k, trials, p0 } => {
            let portfolios = match method {
                BaselineMethod::RandomPolicy => random_policy_baseline(evaluator.policies(), *k, baseline_seed, *trials)?,
                BaselineMethod::RandomP => random_p_baseline(&evaluator, *k, *p0, baseline_seed, *trials)?,
            };
            let reports = portfolios.iter().map(evaluate).collect::<Result<Vec<_>>>()?;
            let algorithm = portfolios[0].algorithm;
            stages.push(StageLedger {
                name: algorithm.label().into(),
                oracle_calls: portfolios.iter().map(|p| p.oracle_calls).sum(),
                point_evaluations: 0,
                records: Vec::new(),
            });
            out.json("portfolios.json", &portfolios)?;
            rows.push(baseline_row(*k, algorithm, &portfolios, &reports));
        }
        AlgorithmConfig::Evaluate { portfolio } => {
            let text = std::fs::read_to_string(portfolio).map_err(|e| Error::io(portfolio, e))?;
            let portfolio = Portfolio::from_json(&text)?;
            let report = evaluate(&portfolio)?;
            degraded |= portfolio.is_degraded();
            out.report("report.csv", &report)?;
            rows.push(row(portfolio.size(), &portfolio, &report));
        }
    }

    if let Some(b) = &config.baselines {
        for &size in &sizes {
            if b.random_policy && size <= evaluator.policies().len() {
                let seed = derive_seed(&[baseline_seed, size as u64, 0]);
                let portfolios = random_policy_baseline(evaluator.policies(), size, seed, b.trials)?;
                let reports = portfolios.iter().map(evaluate).collect::<Result<Vec<_>>>()?;
                rows.push(baseline_row(size, Algorithm::RandomPolicy, &portfolios, &reports));
            }
            if b.random_p {
                let seed = derive_seed(&[baseline_seed, size as u64, 1]);
                let portfolios = random_p_baseline(&evaluator, size, b.p0, seed, b.trials)?;
                let reports = portfolios.iter().map(evaluate).collect::<Result<Vec<_>>>()?;
                stages.push(StageLedger {
                    name: format!("RandomPSampling K={size}"),
                    oracle_calls: portfolios.iter().map(|p| p.oracle_calls).sum(),
                    point_evaluations: 0,
                    records: Vec::new(),
                });
                rows.push(baseline_row(size, Algorithm::RandomP, &portfolios, &reports));
            }
        }
    }

    out.table(&rows)?;
    out.json("ledger.json", &LedgerFile { aggregation: evaluator.aggregation().label(), stages: &stages })?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        aggregation: evaluator.aggregation().label(),
        stages,
        files: out.files.clone(),
        degraded,
    };
    let path = config.output_dir.join("manifest.json");
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serialization cannot fail");
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Process exit code for an error: 3 for environment and size-cap refusals, 2 otherwise.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::SizeCap { .. } | Error::Environment(_) => 3,
        _ => 2,
    }
}
