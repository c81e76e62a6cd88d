//! Portfolio construction and the approximation-quality evaluator.
//!
//! * [`p_mean_portfolio`] walks `p` upward from `p₀ = −ln N / ln(1/α)`, adding the optimal policy
//!   at each stop and using [`line_search`] to find how far that policy stays α-approximate.
//! * [`budget_constrained_portfolio`] spends exactly `K` oracle calls, each time bisecting the
//!   interval whose left-endpoint policy looks worst at the right endpoint.
//! * [`approximation_factor`] measures `Q(Π′) = min_p max_{π ∈ Π′} v(π, p) / v*(p)` on a grid.
//! * [`random_p_baseline`] and [`random_policy_baseline`] are the comparison methods.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{Estimate, Evaluator, Oracle};
use crate::policy::PolicySet;
use crate::seeding;
use crate::welfare::{check_alpha, p_floor, PValue};

/// Line search stops bisecting once the bracket is narrower than this.
pub const MIN_BRACKET: f64 = 1e-9;
/// Line search gives up after this many bisections.
pub const MAX_BISECTIONS: usize = 200;
/// p-MeanPortfolio stops, flagged as degraded, after this many line searches.
pub const MAX_LINE_SEARCHES: usize = 1000;
/// Flag set on a portfolio whose line search hit a safeguard.
pub const FLAG_DEGRADED: &str = "degraded";
/// Flag set when the budget heuristic ran out of distinct midpoints.
pub const FLAG_EXHAUSTED: &str = "intervals-exhausted";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    PMean,
    Budget,
    RandomP,
    RandomPolicy,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::PMean => "p-MeanPortfolio",
            Algorithm::Budget => "BudgetConstrainedPortfolio",
            Algorithm::RandomP => "RandomPSampling",
            Algorithm::RandomPolicy => "RandomPolicySampling",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioEntry {
    /// The p at which the policy was chosen; absent for random policy sampling.
    pub p: Option<PValue>,
    pub policy_id: String,
    /// `v*(p)` at the entry's p.
    pub v_star: Option<f64>,
}

/// `u(l)` for the interval between two chosen p values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalFactor {
    pub left_p: PValue,
    pub right_p: PValue,
    pub u: f64,
}

/// One selection round of the budget heuristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRound {
    pub call: usize,
    pub factors: Vec<IntervalFactor>,
    /// Index into `factors` of the interval that was split.
    pub split: usize,
    pub next_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    pub entries: Vec<PortfolioEntry>,
    pub oracle_calls: u64,
    #[serde(default)]
    pub point_evaluations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intervals: Vec<IntervalRound>,
    /// Line-search traces of a p-mean run, kept in memory only.
    #[serde(skip)]
    pub searches: Vec<LineSearch>,
}

impl Portfolio {
    fn empty(algorithm: Algorithm) -> Self {
        Portfolio {
            algorithm,
            alpha: None,
            budget: None,
            p0: None,
            entries: Vec::new(),
            oracle_calls: 0,
            point_evaluations: 0,
            seed: None,
            flags: Vec::new(),
            intervals: Vec::new(),
            searches: Vec::new(),
        }
    }

    /// Number of distinct policies.
    pub fn size(&self) -> usize {
        self.entries.iter().map(|e| e.policy_id.as_str()).collect::<BTreeSet<_>>().len()
    }

    /// Distinct policy ids in entry order.
    pub fn policy_ids(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.entries.iter().map(|e| e.policy_id.as_str()).filter(|id| seen.insert(*id)).collect()
    }

    pub fn is_degraded(&self) -> bool {
        self.flags.iter().any(|f| f == FLAG_DEGRADED)
    }

    fn flag(&mut self, flag: &str) {
        if !self.flags.iter().any(|f| f == flag) {
            self.flags.push(flag.to_string());
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("portfolio serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::error::from_json_str(text)
    }

    /// Policy-set indices of the portfolio's distinct policies.
    pub fn indices(&self, set: &PolicySet) -> Result<Vec<usize>> {
        self.policy_ids()
            .into_iter()
            .map(|id| set.index_of(id).ok_or_else(|| Error::UnknownPolicy(id.to_string())))
            .collect()
    }
}

/// One bisection step of [`line_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    /// `v(π, a)` at the start of the step.
    pub policy_at_a: f64,
    /// `v*(a)` at the start of the step.
    pub optimum_at_a: f64,
    pub optimum_at_q: f64,
    /// Whether `v(π, a) ≥ √α·v*(q)` held, moving `a` to `q`.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub p: f64,
    pub alpha: f64,
    pub policy_id: String,
    pub b_star: f64,
    /// `v*(p)`.
    pub optimum_at_p: f64,
    /// `v*(b*)`.
    pub optimum_at_b: f64,
    /// `v(π, b*)`.
    pub policy_at_b: f64,
    /// `a` and `v(π, a)`, `v*(a)` when the search stopped.
    pub final_a: f64,
    pub final_policy_at_a: f64,
    pub final_optimum_at_a: f64,
    pub steps: Vec<TraceStep>,
    pub degraded: bool,
}

impl LineSearch {
    /// Violations of the loop invariant `v(π, a) ≥ √α·v*(a)` and, when `b* < 1`, of the bracket
    /// `v*(b*) ≥ v*(p)/√α` and `v(π, b*) ≥ α·v*(b*)`. Comparisons allow `rel_tol` relative slack.
    pub fn invariant_violations(&self, rel_tol: f64) -> Vec<String> {
        let root = self.alpha.sqrt();
        let geq = |lhs: f64, rhs: f64| lhs >= rhs * (1.0 - rel_tol);
        let mut out = Vec::new();
        let states = self
            .steps
            .iter()
            .map(|s| (s.a, s.policy_at_a, s.optimum_at_a))
            .chain(std::iter::once((self.final_a, self.final_policy_at_a, self.final_optimum_at_a)));
        for (a, v_pi, v_star) in states {
            if !geq(v_pi, root * v_star) {
                out.push(format!("p = {}: v(π, {a}) = {v_pi} < √α·v*(a) = {}", self.p, root * v_star));
            }
        }
        if self.b_star < 1.0 && !self.degraded {
            if !geq(self.optimum_at_b, self.optimum_at_p / root) {
                out.push(format!(
                    "p = {}: v*(b*) = {} < v*(p)/√α = {}",
                    self.p,
                    self.optimum_at_b,
                    self.optimum_at_p / root
                ));
            }
            if !geq(self.policy_at_b, self.alpha * self.optimum_at_b) {
                out.push(format!(
                    "p = {}: v(π, b*) = {} < α·v*(b*) = {}",
                    self.p,
                    self.policy_at_b,
                    self.alpha * self.optimum_at_b
                ));
            }
        }
        out
    }
}

/// Finds `b* ∈ (p, 1]` such that the policy optimal at `p` is α-approximate on `[p, b*]`.
///
/// Each step bisects `[a, b]` at `q`; `a` moves to `q` when `v(π, a) ≥ √α·v*(q)`, otherwise `b`
/// does. The search ends once `v(π, a) ≥ α·v*(b)`, or, flagged as degraded, when the bracket
/// is narrower than [`MIN_BRACKET`] or [`MAX_BISECTIONS`] steps have run.
pub fn line_search(oracle: &mut Oracle<'_>, p: f64, alpha: f64) -> Result<LineSearch> {
    check_alpha(alpha)?;
    if !p.is_finite() || p >= 1.0 {
        return Err(Error::Domain(format!("line search needs a finite p < 1, got {p}")));
    }
    let root = alpha.sqrt();
    let start = oracle.solve(PValue::Finite(p))?;
    let policy = start.best_index;
    let mut a = p;
    let mut b = 1.0;
    let mut at_a = oracle.evaluate_index(policy, PValue::Finite(a))?;
    let mut best_b = best_estimate(oracle, b)?;
    let mut steps = Vec::new();
    let mut degraded = false;
    while oracle.pessimistic(at_a) < alpha * oracle.optimistic(best_b) {
        if b - a < MIN_BRACKET || steps.len() >= MAX_BISECTIONS {
            degraded = true;
            log::warn!("line search from p = {p} stopped at a = {a}, b = {b} without closing the gap");
            break;
        }
        let q = 0.5 * (a + b);
        let best_q = best_estimate(oracle, q)?;
        let accepted = oracle.pessimistic(at_a) >= root * oracle.optimistic(best_q);
        steps.push(TraceStep {
            a,
            b,
            q,
            policy_at_a: at_a.value,
            optimum_at_a: oracle.solve(PValue::Finite(a))?.best_value,
            optimum_at_q: best_q.value,
            accepted,
        });
        if accepted {
            a = q;
            at_a = oracle.evaluate_index(policy, PValue::Finite(a))?;
        } else {
            b = q;
        }
        best_b = best_estimate(oracle, b)?;
    }
    let policy_at_b = oracle.evaluate_index(policy, PValue::Finite(b))?.value;
    Ok(LineSearch {
        p,
        alpha,
        policy_id: start.best_policy_id,
        b_star: b,
        optimum_at_p: start.best_value,
        optimum_at_b: best_b.value,
        policy_at_b,
        final_a: a,
        final_policy_at_a: at_a.value,
        final_optimum_at_a: oracle.solve(PValue::Finite(a))?.best_value,
        steps,
        degraded,
    })
}

fn best_estimate(oracle: &mut Oracle<'_>, p: f64) -> Result<Estimate> {
    let r = oracle.solve(PValue::Finite(p))?;
    Ok(Estimate { value: r.best_value, stderr: r.best_stderr })
}

/// Builds an α-approximate portfolio for every `p ≤ 1`.
pub fn p_mean_portfolio(oracle: &mut Oracle<'_>, alpha: f64) -> Result<Portfolio> {
    check_alpha(alpha)?;
    let calls_before = oracle.oracle_calls();
    let evals_before = oracle.ledger().point_evaluations;
    let p0 = p_floor(oracle.n_stakeholders(), alpha)?;
    let mut portfolio = Portfolio::empty(Algorithm::PMean);
    portfolio.alpha = Some(alpha);
    portfolio.p0 = Some(p0);
    let mut p = p0;
    while p < 1.0 {
        if portfolio.searches.len() >= MAX_LINE_SEARCHES {
            log::warn!("p-MeanPortfolio stopped at p = {p} after {MAX_LINE_SEARCHES} line searches");
            portfolio.flag(FLAG_DEGRADED);
            break;
        }
        let r = oracle.solve(PValue::Finite(p))?;
        portfolio.entries.push(PortfolioEntry {
            p: Some(PValue::Finite(p)),
            policy_id: r.best_policy_id,
            v_star: Some(r.best_value),
        });
        let search = line_search(oracle, p, alpha)?;
        if search.degraded {
            portfolio.flag(FLAG_DEGRADED);
        }
        p = search.b_star;
        portfolio.searches.push(search);
    }
    portfolio.oracle_calls = oracle.oracle_calls() - calls_before;
    portfolio.point_evaluations = oracle.ledger().point_evaluations - evals_before;
    Ok(portfolio)
}

/// Spends exactly `k` oracle calls: first at `p0`, then at 1, then at the midpoint of the
/// interval with the smallest interval approximation factor `u(l)`.
pub fn budget_constrained_portfolio(oracle: &mut Oracle<'_>, k: usize, p0: f64) -> Result<Portfolio> {
    if k < 1 {
        return Err(Error::Domain("the budget K must be at least 1".into()));
    }
    if !p0.is_finite() || p0 >= 1.0 {
        return Err(Error::Domain(format!("the initial p must be finite and below 1, got {p0}")));
    }
    let calls_before = oracle.oracle_calls();
    let evals_before = oracle.ledger().point_evaluations;
    let mut portfolio = Portfolio::empty(Algorithm::Budget);
    portfolio.budget = Some(k);
    portfolio.p0 = Some(p0);
    // chosen p → (policy index, v*(p)), kept sorted by p
    let mut chosen: BTreeMap<PValue, (usize, f64)> = BTreeMap::new();
    for call in 1..=k {
        let p = match call {
            1 => p0,
            2 => 1.0,
            _ => {
                let points: Vec<(f64, usize, f64)> =
                    chosen.iter().map(|(p, &(i, v))| (p.as_f64(), i, v)).collect();
                let mut factors = Vec::with_capacity(points.len() - 1);
                for w in points.windows(2) {
                    let (left, policy, _) = w[0];
                    let (right, _, optimum) = w[1];
                    let value = oracle.evaluate_index(policy, PValue::Finite(right))?.value;
                    factors.push(IntervalFactor {
                        left_p: PValue::Finite(left),
                        right_p: PValue::Finite(right),
                        u: value / optimum,
                    });
                }
                let mut order: Vec<usize> = (0..factors.len()).collect();
                order.sort_by(|&x, &y| factors[x].u.total_cmp(&factors[y].u).then(x.cmp(&y)));
                let split = order.into_iter().find(|&l| {
                    let mid = midpoint(&factors[l]);
                    mid > factors[l].left_p.as_f64() && mid < factors[l].right_p.as_f64()
                });
                let Some(split) = split else {
                    portfolio.flag(FLAG_EXHAUSTED);
                    break;
                };
                let next_p = midpoint(&factors[split]);
                portfolio.intervals.push(IntervalRound { call, factors, split, next_p });
                next_p
            }
        };
        let r = oracle.solve(PValue::Finite(p))?;
        chosen.insert(PValue::Finite(p), (r.best_index, r.best_value));
    }
    portfolio.entries = chosen
        .iter()
        .map(|(p, &(i, v))| PortfolioEntry { p: Some(*p), policy_id: oracle.policy_id(i).to_string(), v_star: Some(v) })
        .collect();
    portfolio.oracle_calls = oracle.oracle_calls() - calls_before;
    portfolio.point_evaluations = oracle.ledger().point_evaluations - evals_before;
    Ok(portfolio)
}

fn midpoint(f: &IntervalFactor) -> f64 {
    0.5 * (f.left_p.as_f64() + f.right_p.as_f64())
}

/// Evaluation grid: `−∞` plus `points − 1` evenly spaced values on `[low, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub low: f64,
}

impl GridSpec {
    pub const DEFAULT_POINTS: usize = 1000;
    pub const DEFAULT_LOW: f64 = -100.0;

    /// `low = min(p₀(N, smallest α), −100)`.
    pub fn default_for(n_stakeholders: usize, smallest_alpha: Option<f64>) -> Result<Self> {
        let floor = match smallest_alpha {
            Some(alpha) => p_floor(n_stakeholders, alpha)?,
            None => Self::DEFAULT_LOW,
        };
        Ok(GridSpec { points: Self::DEFAULT_POINTS, low: floor.min(Self::DEFAULT_LOW) })
    }

    pub fn grid(&self) -> Result<Vec<PValue>> {
        if self.points < 2 {
            return Err(Error::Domain("the evaluation grid needs at least 2 points".into()));
        }
        if !self.low.is_finite() || self.low >= 1.0 {
            return Err(Error::Domain(format!("grid lower end must be finite and below 1, got {}", self.low)));
        }
        let n = self.points - 1;
        let mut out = vec![PValue::NegInfinity];
        out.extend((0..n).map(|i| {
            let p = if n == 1 { 1.0 } else { self.low + (1.0 - self.low) * i as f64 / (n - 1) as f64 };
            PValue::Finite(p.min(1.0))
        }));
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub p: PValue,
    pub best_in_portfolio: f64,
    pub v_star: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub grid: Vec<GridRow>,
    pub q_min: f64,
    pub argmin_p: PValue,
}

impl EvalReport {
    /// CSV with columns `p, best_in_portfolio, v_star, ratio`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.grid {
            w.serialize(row).map_err(|e| Error::invalid("report", e.to_string()))?;
        }
        w.flush().map_err(|e| Error::invalid("report", e.to_string()))
    }
}

/// `Q(Π′)` on a grid: the worst ratio of the best portfolio member to the optimum.
///
/// `oracle` supplies `v*(p)` at every grid point; pass one that is not accounting for an
/// algorithm run.
pub fn approximation_factor(portfolio: &Portfolio, oracle: &mut Oracle<'_>, grid: &GridSpec) -> Result<EvalReport> {
    if portfolio.entries.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty portfolio".into()));
    }
    let members = portfolio.indices(oracle.evaluator().policies())?;
    let mut rows = Vec::with_capacity(grid.points);
    for p in grid.grid()? {
        let v_star = oracle.solve(p)?.best_value;
        let mut best = f64::NEG_INFINITY;
        for &i in &members {
            best = best.max(oracle.evaluate_index(i, p)?.value);
        }
        rows.push(GridRow { p, best_in_portfolio: best, v_star, ratio: best / v_star });
    }
    let worst = rows
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.ratio.total_cmp(&y.1.ratio).then(x.0.cmp(&y.0)))
        .map(|(_, r)| (r.ratio, r.p))
        .expect("grid is non-empty");
    Ok(EvalReport { grid: rows, q_min: worst.0, argmin_p: worst.1 })
}

/// Portfolios from `k` values of p drawn uniformly on `[p0, 1]`, one per trial.
pub fn random_p_baseline(evaluator: &Evaluator, k: usize, p0: f64, seed: u64, trials: usize) -> Result<Vec<Portfolio>> {
    if k < 1 || trials < 1 {
        return Err(Error::Domain("K and trials must both be at least 1".into()));
    }
    if !p0.is_finite() || p0 >= 1.0 {
        return Err(Error::Domain(format!("the lower end must be finite and below 1, got {p0}")));
    }
    (0..trials)
        .map(|trial| {
            let trial_seed = seeding::derive_seed(&[seed, trial as u64]);
            let mut rng = seeding::rng(trial_seed, 0);
            let mut ps: Vec<f64> = (0..k).map(|_| rng.random_range(p0..=1.0)).collect();
            ps.sort_by(f64::total_cmp);
            ps.dedup();
            let mut oracle = Oracle::new(evaluator);
            let mut portfolio = Portfolio::empty(Algorithm::RandomP);
            portfolio.budget = Some(k);
            portfolio.p0 = Some(p0);
            portfolio.seed = Some(trial_seed);
            for p in ps {
                let r = oracle.solve(PValue::Finite(p))?;
                portfolio.entries.push(PortfolioEntry {
                    p: Some(PValue::Finite(p)),
                    policy_id: r.best_policy_id,
                    v_star: Some(r.best_value),
                });
            }
            portfolio.oracle_calls = oracle.oracle_calls();
            Ok(portfolio)
        })
        .collect()
}

/// Portfolios of `k` policies sampled from `Π` without replacement; no oracle calls.
pub fn random_policy_baseline(policies: &PolicySet, k: usize, seed: u64, trials: usize) -> Result<Vec<Portfolio>> {
    if k < 1 || trials < 1 {
        return Err(Error::Domain("K and trials must both be at least 1".into()));
    }
    if k > policies.len() {
        return Err(Error::Domain(format!("cannot sample {k} policies from a set of {}", policies.len())));
    }
    Ok((0..trials)
        .map(|trial| {
            let trial_seed = seeding::derive_seed(&[seed, trial as u64]);
            let mut rng = seeding::rng(trial_seed, 0);
            let mut picks = rand::seq::index::sample(&mut rng, policies.len(), k).into_vec();
            picks.sort_unstable();
            let mut portfolio = Portfolio::empty(Algorithm::RandomPolicy);
            portfolio.budget = Some(k);
            portfolio.seed = Some(trial_seed);
            portfolio.entries = picks
                .into_iter()
                .map(|i| PortfolioEntry { p: None, policy_id: policies.policies()[i].id().to_string(), v_star: None })
                .collect();
            portfolio
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub alpha: f64,
    pub portfolio: Portfolio,
}

/// Runs [`p_mean_portfolio`] for each α (ascending) and keeps, per resulting portfolio size,
/// the run with the smallest α.
pub fn alpha_sweep(evaluator: &Evaluator, alphas: &[f64]) -> Result<BTreeMap<usize, SweepEntry>> {
    alpha_sweep_with_margin(evaluator, alphas, 0.0)
}

/// [`alpha_sweep`] with Monte-Carlo comparisons widened by `margin` standard errors.
pub fn alpha_sweep_with_margin(evaluator: &Evaluator, alphas: &[f64], margin: f64) -> Result<BTreeMap<usize, SweepEntry>> {
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("alphas must be strictly ascending".into()));
    }
    let mut out = BTreeMap::new();
    for &alpha in alphas {
        let mut oracle = Oracle::new(evaluator).with_margin(margin);
        let portfolio = p_mean_portfolio(&mut oracle, alpha)?;
        out.entry(portfolio.size()).or_insert(SweepEntry { alpha, portfolio });
    }
    Ok(out)
}

/// `{0.05, 0.10, …, 0.95, 0.99}`.
pub fn default_alphas() -> Vec<f64> {
    let mut alphas: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
    alphas.push(0.99);
    alphas
}
