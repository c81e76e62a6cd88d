use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pmean::policy::{save_policy_set, Policy};
use pmean::portfolio::Portfolio;
use pmean::{Error, Result};
use pmean_cli::breakdown::{breakdown, disaster_groups, single_group, Group};
use pmean_cli::config::{AlgorithmConfig, BaselineMethod, Overrides, Rule, RunConfig};
use pmean_cli::pipeline::{build_environment, build_policies};
use pmean_cli::{exit_code, run};

/// Small policy portfolios that are near-optimal for every p-mean welfare objective.
#[derive(Parser)]
#[command(name = "pmean", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    rule: Option<Rule>,
    /// Monte-Carlo samples per policy; implies `--rule esr`.
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    grid_low: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the algorithm block of the configuration.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Build an α-approximate portfolio.
    Portfolio {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Build a portfolio with exactly K oracle calls.
    Budget {
        #[command(flatten)]
        common: Common,
        #[arg(long = "k")]
        k: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        p0: Option<f64>,
    },
    /// Random-policy or random-p baseline portfolios.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<BaselineMethod>,
        #[arg(long = "k")]
        k: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        p0: Option<f64>,
    },
    /// Portfolios over a list of α values, one per resulting size.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Also run the budget heuristic at each size.
        #[arg(long)]
        compare_budget: bool,
    },
    /// Measure the approximation quality of a saved portfolio.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        portfolio: PathBuf,
    },
    /// Environment utilities.
    Env {
        #[command(subcommand)]
        command: EnvCommand,
    },
    /// Per-group stakeholder returns of selected policies.
    Breakdown {
        #[command(flatten)]
        common: Common,
        /// Portfolio whose policies are reported.
        #[arg(long)]
        portfolio: Option<PathBuf>,
        /// Extra policy ids to report.
        #[arg(long = "policy")]
        policies: Vec<String>,
        /// `all`, `income`, `density`, `proximity`, `cluster`, or a JSON file of groups.
        #[arg(long, default_value = "all")]
        groups: String,
        /// Report scores relative to this policy.
        #[arg(long)]
        baseline: Option<String>,
        /// Also write a bar chart.
        #[arg(long)]
        svg: bool,
    },
}

#[derive(Subcommand)]
enum EnvCommand {
    /// Write the configured environment as an MDP file.
    Build {
        #[command(flatten)]
        common: Common,
    },
    /// Write the configured policy set.
    GenPolicies {
        #[command(flatten)]
        common: Common,
        /// Overrides the generator's policy count.
        #[arg(long)]
        count: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(degraded) if degraded => {
            eprintln!("warning: a line search hit its safeguard; the α guarantee may not hold");
            ExitCode::from(4)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("PMEAN_THREADS") else { return Ok(()) };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("PMEAN_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Loads the configuration file (if any), lets `choose` decide the algorithm block given the
/// file's own, and applies the common overrides.
fn load(
    common: &Common,
    choose: impl FnOnce(Option<AlgorithmConfig>) -> Result<AlgorithmConfig>,
) -> Result<RunConfig> {
    let mut doc = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| Error::Schema { pointer: String::new(), message: e.to_string() })?
        }
        None => serde_json::json!({}),
    };
    let object = doc
        .as_object_mut()
        .ok_or_else(|| Error::Schema { pointer: String::new(), message: "expected a JSON object".into() })?;
    let existing = match object.get("algorithm") {
        Some(value) => Some(
            pmean::error::from_json_str::<AlgorithmConfig>(&value.to_string()).map_err(|e| match e {
                Error::Schema { pointer, message } => Error::Schema { pointer: format!("/algorithm{pointer}"), message },
                other => other,
            })?,
        ),
        None => None,
    };
    let algorithm = choose(existing)?;
    object.insert("algorithm".into(), serde_json::to_value(algorithm).expect("algorithm serializes"));
    let mut config: RunConfig = pmean::error::from_json_str(&doc.to_string())?;
    config.apply(&Overrides {
        seed: common.seed,
        output_dir: common.out.clone(),
        rule: common.rule,
        mc_samples: common.mc_samples,
        grid_points: common.grid_points,
        grid_low: common.grid_low,
    });
    config.validate()?;
    Ok(config)
}

fn missing(what: &str) -> Error {
    Error::Config(format!("missing {what}"))
}

fn dispatch(command: Command) -> Result<bool> {
    let config = match command {
        Command::Run { common } => load(&common, |a| a.ok_or_else(|| missing("`algorithm` block in the configuration")))?,
        Command::Portfolio { common, alpha } => load(&common, |a| {
            let alpha = alpha
                .or(match a {
                    Some(AlgorithmConfig::Portfolio { alpha }) => Some(alpha),
                    _ => None,
                })
                .ok_or_else(|| missing("--alpha"))?;
            Ok(AlgorithmConfig::Portfolio { alpha })
        })?,
        Command::Budget { common, k, p0 } => load(&common, |a| {
            let (k0, p00) = match a {
                Some(AlgorithmConfig::Budget { k, p0 }) => (Some(k), Some(p0)),
                _ => (None, None),
            };
            Ok(AlgorithmConfig::Budget {
                k: k.or(k0).ok_or_else(|| missing("--k"))?,
                p0: p0.or(p00).unwrap_or(-100.0),
            })
        })?,
        Command::Baseline { common, method, k, trials, p0 } => load(&common, |a| {
            let base = match a {
                Some(AlgorithmConfig::Baseline { method, k, trials, p0 }) => Some((method, k, trials, p0)),
                _ => None,
            };
            Ok(AlgorithmConfig::Baseline {
                method: method.or(base.map(|b| b.0)).ok_or_else(|| missing("--method"))?,
                k: k.or(base.map(|b| b.1)).ok_or_else(|| missing("--k"))?,
                trials: trials.or(base.map(|b| b.2)).unwrap_or(10),
                p0: p0.or(base.map(|b| b.3)).unwrap_or(-100.0),
            })
        })?,
        Command::Sweep { common, alphas, compare_budget } => load(&common, |a| {
            let (alphas0, compare0, p0) = match a {
                Some(AlgorithmConfig::Sweep { alphas, compare_budget, p0 }) => (Some(alphas), compare_budget, p0),
                _ => (None, false, -100.0),
            };
            Ok(AlgorithmConfig::Sweep {
                alphas: alphas.or(alphas0).unwrap_or_else(pmean::portfolio::default_alphas),
                compare_budget: compare_budget || compare0,
                p0,
            })
        })?,
        Command::Evaluate { common, portfolio } => load(&common, |_| Ok(AlgorithmConfig::Evaluate { portfolio }))?,
        Command::Env { command } => return env_command(command).map(|_| false),
        Command::Breakdown { common, portfolio, policies, groups, baseline, svg } => {
            return breakdown_command(&common, portfolio.as_deref(), &policies, &groups, baseline.as_deref(), svg)
                .map(|_| false)
        }
    };
    let manifest = run(&config)?;
    println!("wrote {} files to {}", manifest.files.len() + 1, config.output_dir.display());
    Ok(manifest.degraded)
}

/// Any algorithm block will do for commands that only need the environment.
fn keep_or_placeholder(a: Option<AlgorithmConfig>) -> Result<AlgorithmConfig> {
    Ok(a.unwrap_or(AlgorithmConfig::Portfolio { alpha: 0.5 }))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn env_command(command: EnvCommand) -> Result<()> {
    match command {
        EnvCommand::Build { common } => {
            let config = load(&common, keep_or_placeholder)?;
            let env = build_environment(&config.environment)?;
            create_dir(&config.output_dir)?;
            let path = config.output_dir.join("mdp.json");
            env.mdp.save(&path)?;
            println!(
                "{} states, {} actions, {} stakeholders, horizon {}, kappa {} -> {}",
                env.mdp.n_states(),
                env.mdp.n_actions(),
                env.mdp.n_rewards(),
                env.mdp.horizon(),
                env.mdp.condition_number(),
                path.display()
            );
        }
        EnvCommand::GenPolicies { common, count } => {
            let mut config = load(&common, keep_or_placeholder)?;
            if let Some(n) = count {
                match &mut config.policies {
                    pmean_cli::config::PolicySpec::Generator { count, .. }
                    | pmean_cli::config::PolicySpec::Random { count, .. } => *count = n,
                    _ => return Err(Error::Config("--count applies to generated policy sets only".into())),
                }
            }
            let env = build_environment(&config.environment)?;
            let set = build_policies(&config.policies, &env, config.seed)?;
            create_dir(&config.output_dir)?;
            let path = config.output_dir.join("policies.json");
            save_policy_set(&set, &path)?;
            println!("{} policies -> {}", set.len(), path.display());
        }
    }
    Ok(())
}

fn breakdown_command(
    common: &Common,
    portfolio: Option<&Path>,
    extra: &[String],
    groups: &str,
    baseline: Option<&str>,
    svg: bool,
) -> Result<()> {
    let config = load(common, keep_or_placeholder)?;
    let env = build_environment(&config.environment)?;
    let set = build_policies(&config.policies, &env, config.seed)?;
    let mut ids: Vec<String> = match portfolio {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Portfolio::from_json(&text)?.policy_ids().into_iter().map(str::to_string).collect()
        }
        None => Vec::new(),
    };
    ids.extend(extra.iter().cloned());
    if ids.is_empty() {
        return Err(Error::Config("breakdown needs --portfolio or --policy".into()));
    }
    let lookup = |id: &str| set.by_id(id).ok_or_else(|| Error::UnknownPolicy(id.to_string()));
    let policies: Vec<&Policy> = ids.iter().map(|id| lookup(id)).collect::<Result<_>>()?;
    let baseline = baseline.map(lookup).transpose()?;
    let groups: Vec<Group> = match (groups, &env.disaster) {
        ("all", _) => single_group(env.mdp.n_rewards()),
        (name @ ("income" | "density" | "proximity" | "cluster"), Some(model)) => disaster_groups(model, name)?,
        (name @ ("income" | "density" | "proximity" | "cluster"), None) => {
            return Err(Error::Config(format!("grouping `{name}` needs a disaster environment")))
        }
        (path, _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(Path::new(path), e))?;
            pmean::error::from_json_str(&text)?
        }
    };
    let table = breakdown(&env.mdp, &policies, &groups, baseline)?;
    create_dir(&config.output_dir)?;
    let csv_path = config.output_dir.join("breakdown.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    table.write_csv(file)?;
    println!("{} policies x {} groups -> {}", table.rows.len(), table.groups.len(), csv_path.display());
    if svg {
        let svg_path = config.output_dir.join("breakdown.svg");
        std::fs::write(&svg_path, table.to_svg()).map_err(|e| Error::io(&svg_path, e))?;
    }
    Ok(())
}
