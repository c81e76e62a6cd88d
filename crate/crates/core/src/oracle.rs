//! The welfare-maximization oracle `v*(p) = max_{π ∈ Π} v(π, p)`.
//!
//! An [`Evaluator`] owns the MDP, the feasible policy set and the aggregation rule, and caches
//! every value it computes. An [`Oracle`] is a cheap per-run view over an evaluator that does
//! the call accounting: one oracle call per distinct `p` passed to [`Oracle::solve`], while
//! single-policy queries through [`Oracle::evaluate`] are point evaluations.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{self, FiniteMdp};
use crate::policy::{enumerate_deterministic_policies, PolicySet};
use crate::welfare::{p_mean_unchecked, PKey, PValue};

/// How a policy's welfare is aggregated over trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Aggregation {
    /// Scalarized expected returns, exact.
    Ser,
    /// Expected scalarized returns by trajectory enumeration.
    EsrExact { path_cap: f64 },
    /// Expected scalarized returns by Monte Carlo.
    EsrMc { n_samples: usize, seed: u64 },
}

impl Aggregation {
    /// Exact ESR when every policy's trajectory count fits under `path_cap`, Monte Carlo otherwise.
    pub fn esr_auto(mdp: &FiniteMdp, policies: &PolicySet, path_cap: f64, n_samples: usize, seed: u64) -> Result<Self> {
        for p in policies.policies() {
            if mdp::path_count(mdp, p)? > path_cap {
                log::info!("policy `{}` exceeds the exact-ESR path cap; using Monte Carlo", p.id());
                return Ok(Aggregation::EsrMc { n_samples, seed });
            }
        }
        Ok(Aggregation::EsrExact { path_cap })
    }

    pub fn label(&self) -> String {
        match self {
            Aggregation::Ser => "ser-exact".into(),
            Aggregation::EsrExact { .. } => "esr-exact".into(),
            Aggregation::EsrMc { n_samples, .. } => format!("esr-mc(n={n_samples})"),
        }
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self, Aggregation::EsrMc { .. })
    }
}

/// A policy value with its standard error (zero for exact evaluations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, stderr: 0.0 }
    }
}

/// Per-policy data from which every `v(π, p)` follows.
enum Summary {
    Expected(Vec<f64>),
    Paths(Vec<(f64, Vec<f64>)>),
    Samples(Vec<Vec<f64>>),
}

/// Computes and caches `v(π, p)` for a fixed MDP, policy set and aggregation rule.
///
/// Safe to share between threads; cached values never change once stored.
pub struct Evaluator {
    mdp: Arc<FiniteMdp>,
    policies: Arc<PolicySet>,
    aggregation: Aggregation,
    summaries: Vec<OnceLock<Summary>>,
    dense: Mutex<HashMap<PKey, Arc<Vec<Estimate>>>>,
    points: Mutex<HashMap<(usize, PKey), Estimate>>,
    computations: AtomicU64,
}

impl Evaluator {
    pub fn new(mdp: Arc<FiniteMdp>, policies: Arc<PolicySet>, aggregation: Aggregation) -> Result<Self> {
        policies.check_against(&mdp)?;
        if let Aggregation::EsrMc { n_samples: 0, .. } = aggregation {
            return Err(Error::Config("Monte-Carlo ESR needs at least one sample".into()));
        }
        let summaries = (0..policies.len()).map(|_| OnceLock::new()).collect();
        Ok(Evaluator {
            mdp,
            policies,
            aggregation,
            summaries,
            dense: Mutex::new(HashMap::new()),
            points: Mutex::new(HashMap::new()),
            computations: AtomicU64::new(0),
        })
    }

    /// An evaluator over every deterministic policy of `mdp`.
    pub fn exhaustive(mdp: Arc<FiniteMdp>, aggregation: Aggregation, max_count: usize, stationary: bool) -> Result<Self> {
        let set = enumerate_deterministic_policies(&mdp, max_count, stationary)?;
        Self::new(mdp, Arc::new(set), aggregation)
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    /// Number of `v(π, p)` values actually computed (cache misses).
    pub fn computations(&self) -> u64 {
        self.computations.load(Ordering::Relaxed)
    }

    fn summary(&self, index: usize) -> Result<&Summary> {
        if let Some(s) = self.summaries[index].get() {
            return Ok(s);
        }
        let policy = &self.policies.policies()[index];
        let summary = match self.aggregation {
            Aggregation::Ser => Summary::Expected(mdp::expected_return_vector(&self.mdp, policy)?.0),
            Aggregation::EsrExact { path_cap } => Summary::Paths(mdp::return_distribution(&self.mdp, policy, path_cap)?),
            Aggregation::EsrMc { n_samples, seed } => {
                Summary::Samples(mdp::sample_returns(&self.mdp, policy, n_samples, seed)?)
            }
        };
        Ok(self.summaries[index].get_or_init(|| summary))
    }

    fn compute(&self, index: usize, p: PValue) -> Result<Estimate> {
        self.computations.fetch_add(1, Ordering::Relaxed);
        Ok(match self.summary(index)? {
            Summary::Expected(g) => Estimate::exact(p_mean_unchecked(g, p)),
            Summary::Paths(dist) => Estimate::exact(mdp::esr_from_distribution(dist, p)),
            Summary::Samples(samples) => {
                let mc = mdp::mc_from_samples(samples, p);
                Estimate { value: mc.estimate, stderr: mc.stderr }
            }
        })
    }

    /// `v(π, p)` for every policy, computed in parallel on first request and cached.
    pub fn values_at(&self, p: PValue) -> Result<Arc<Vec<Estimate>>> {
        let key = p.key();
        if let Some(v) = self.dense.lock().unwrap().get(&key) {
            return Ok(Arc::clone(v));
        }
        let values: Vec<Estimate> =
            (0..self.policies.len()).into_par_iter().map(|i| self.compute(i, p)).collect::<Result<_>>()?;
        let values = Arc::new(values);
        self.dense.lock().unwrap().entry(key).or_insert_with(|| Arc::clone(&values));
        Ok(values)
    }

    /// Cached-or-computed `v(π, p)` for one policy.
    pub fn value(&self, index: usize, p: PValue) -> Result<Estimate> {
        if index >= self.policies.len() {
            return Err(Error::UnknownPolicy(format!("#{index}")));
        }
        let key = p.key();
        if let Some(v) = self.dense.lock().unwrap().get(&key) {
            return Ok(v[index]);
        }
        if let Some(v) = self.points.lock().unwrap().get(&(index, key)) {
            return Ok(*v);
        }
        let v = self.compute(index, p)?;
        self.points.lock().unwrap().insert((index, key), v);
        Ok(v)
    }
}

/// Result of one oracle call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub p: PValue,
    pub best_index: usize,
    pub best_policy_id: String,
    /// `v*(p)`.
    pub best_value: f64,
    pub best_stderr: f64,
    /// Number of policy values inspected by this call.
    pub evaluations_performed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call: u64,
    pub p: PValue,
    pub best_policy_id: String,
    pub best_value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallLedger {
    pub oracle_calls: u64,
    pub point_evaluations: u64,
    pub records: Vec<CallRecord>,
}

/// Call-accounting view over an [`Evaluator`]. Used by one orchestrator at a time.
pub struct Oracle<'e> {
    evaluator: &'e Evaluator,
    solved: HashMap<PKey, OracleResult>,
    ledger: CallLedger,
    margin: f64,
}

impl<'e> Oracle<'e> {
    pub fn new(evaluator: &'e Evaluator) -> Self {
        Oracle { evaluator, solved: HashMap::new(), ledger: CallLedger::default(), margin: 0.0 }
    }

    /// Comparisons made by the portfolio algorithms widen Monte-Carlo values by `k` standard
    /// errors in the conservative direction. No effect on exact evaluators.
    pub fn with_margin(mut self, k: f64) -> Self {
        self.margin = k;
        self
    }

    pub fn evaluator(&self) -> &'e Evaluator {
        self.evaluator
    }

    pub fn ledger(&self) -> &CallLedger {
        &self.ledger
    }

    pub fn oracle_calls(&self) -> u64 {
        self.ledger.oracle_calls
    }

    pub fn n_stakeholders(&self) -> usize {
        self.evaluator.mdp.n_rewards()
    }

    pub fn policy_id(&self, index: usize) -> &'e str {
        self.evaluator.policies.policies()[index].id()
    }

    /// Solves `max_{π ∈ Π} v(π, p)`, breaking ties towards the lowest policy index.
    ///
    /// Repeating a `p` this oracle has already solved replays the stored result and is not counted.
    pub fn solve(&mut self, p: PValue) -> Result<OracleResult> {
        if let Some(r) = self.solved.get(&p.key()) {
            return Ok(r.clone());
        }
        if self.evaluator.policies.is_empty() {
            return Err(Error::Config("the feasible policy set is empty".into()));
        }
        let values = self.evaluator.values_at(p)?;
        let mut best = 0;
        for (i, v) in values.iter().enumerate().skip(1) {
            if v.value > values[best].value {
                best = i;
            }
        }
        self.ledger.oracle_calls += 1;
        let result = OracleResult {
            p,
            best_index: best,
            best_policy_id: self.policy_id(best).to_string(),
            best_value: values[best].value,
            best_stderr: values[best].stderr,
            evaluations_performed: values.len(),
        };
        self.ledger.records.push(CallRecord {
            call: self.ledger.oracle_calls,
            p,
            best_policy_id: result.best_policy_id.clone(),
            best_value: result.best_value,
        });
        self.solved.insert(p.key(), result.clone());
        Ok(result)
    }

    /// `v(π, p)` for one policy. A point evaluation, not an oracle call.
    pub fn evaluate(&mut self, policy_id: &str, p: PValue) -> Result<f64> {
        let index = self
            .evaluator
            .policies
            .index_of(policy_id)
            .ok_or_else(|| Error::UnknownPolicy(policy_id.to_string()))?;
        Ok(self.evaluate_index(index, p)?.value)
    }

    pub fn evaluate_index(&mut self, index: usize, p: PValue) -> Result<Estimate> {
        self.ledger.point_evaluations += 1;
        self.evaluator.value(index, p)
    }

    /// Lower end of an estimate under the configured margin.
    pub fn pessimistic(&self, e: Estimate) -> f64 {
        e.value - self.margin * e.stderr
    }

    /// Upper end of an estimate under the configured margin.
    pub fn optimistic(&self, e: Estimate) -> f64 {
        e.value + self.margin * e.stderr
    }
}

/// `(q − p)·U·H·κ·ln κ`: how far the optimum at `q` can sit above the value at `q` of the
/// policy optimal at `p`.
pub fn warm_start_gap_bound(p: f64, q: f64, mdp: &FiniteMdp) -> Result<f64> {
    if !(p.is_finite() && q.is_finite()) || q > 1.0 {
        return Err(Error::Domain(format!("need finite p < q ≤ 1, got p = {p}, q = {q}")));
    }
    if p >= q {
        return Err(Error::Domain(format!("need p < q, got p = {p}, q = {q}")));
    }
    let kappa = mdp.condition_number();
    Ok((q - p) * mdp.reward_upper() * mdp.horizon() as f64 * crate::welfare::slope_bound(kappa)?)
}
