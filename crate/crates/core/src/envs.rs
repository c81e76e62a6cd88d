//! Built-in environments: the post-disaster resource allocation MDP with its priority-policy
//! generator, and random MDPs and policy sets for property tests.
//!
//! # Disaster MDP
//!
//! The state is the vector of remaining needs, one per cluster, each a multiple of the
//! increment `b` clipped to `[0, need_cap]`. An action allocates multiples of `b` to clusters
//! with a total of at most the budget `B`. Per cluster, an allocation covering the need clears
//! it; otherwise the need drops by the allocation with probability `success_prob` or grows by
//! `b` (up to `need_cap`) with probability `balloon_prob`.
//!
//! Each cluster is a stakeholder. Its step reward is the average of the fraction of its
//! initial need met by the allocation and its share of the total allocation. Steps with no
//! aid for a cluster earn zero, which the MDP lower bound `L = 1e−3·U` raises to `L`. This
//! pushes the condition number `κ` to about 1000.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, MdpBuilder};
use crate::policy::{Policy, PolicySet, PolicySource};
use crate::seeding;

const CLUSTERS_JSON: &str = include_str!("../resources/disaster_clusters.json");

/// Cluster ids of the reduced instance used by default.
pub const REDUCED_CLUSTER_IDS: [u32; 4] = [2, 6, 7, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Density {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Proximity {
    Near,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Income {
    Low,
    Middle,
    High,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub cluster_id: u32,
    pub density: Density,
    pub proximity: Proximity,
    pub income_level: Income,
    pub total_population: u64,
    pub initial_need: u64,
}

/// The bundled twelve-cluster dataset.
pub fn default_clusters() -> Vec<ClusterSpec> {
    serde_json::from_str(CLUSTERS_JSON).expect("bundled cluster data is valid")
}

/// How step rewards add up over the horizon.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Every step pays its full reward; returns are sums over the horizon.
    #[default]
    PerStep,
    /// Step rewards are divided by `H`, so returns are per-step averages.
    HorizonAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisasterConfig {
    #[serde(default = "default_clusters")]
    pub clusters: Vec<ClusterSpec>,
    /// Keep only these cluster ids, in this order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_ids: Option<Vec<u32>>,
    #[serde(default = "defaults::increment")]
    pub increment: u64,
    #[serde(default = "defaults::budget")]
    pub budget: u64,
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    #[serde(default = "defaults::success_prob")]
    pub success_prob: f64,
    #[serde(default = "defaults::balloon_prob")]
    pub balloon_prob: f64,
    #[serde(default = "defaults::need_cap")]
    pub need_cap: u64,
    #[serde(default)]
    pub reward_mode: RewardMode,
    #[serde(default)]
    pub policy_redraw: Redraw,
    #[serde(default = "defaults::max_states")]
    pub max_states: usize,
    #[serde(default = "defaults::max_actions")]
    pub max_actions: usize,
}

mod defaults {
    pub fn increment() -> u64 {
        50
    }
    pub fn budget() -> u64 {
        150
    }
    pub fn horizon() -> usize {
        4
    }
    pub fn success_prob() -> f64 {
        0.7
    }
    pub fn balloon_prob() -> f64 {
        0.3
    }
    pub fn need_cap() -> u64 {
        150
    }
    pub fn max_states() -> usize {
        1 << 16
    }
    pub fn max_actions() -> usize {
        4096
    }
}

impl Default for DisasterConfig {
    /// All twelve clusters. Too large to build with the default caps.
    fn default() -> Self {
        DisasterConfig {
            clusters: default_clusters(),
            cluster_ids: None,
            increment: defaults::increment(),
            budget: defaults::budget(),
            horizon: defaults::horizon(),
            success_prob: defaults::success_prob(),
            balloon_prob: defaults::balloon_prob(),
            need_cap: defaults::need_cap(),
            reward_mode: RewardMode::default(),
            policy_redraw: Redraw::default(),
            max_states: defaults::max_states(),
            max_actions: defaults::max_actions(),
        }
    }
}

impl DisasterConfig {
    /// The four-cluster instance small enough for exact evaluation.
    pub fn reduced() -> Self {
        DisasterConfig { cluster_ids: Some(REDUCED_CLUSTER_IDS.to_vec()), ..Self::default() }
    }

    /// Clusters after applying `cluster_ids`.
    pub fn active_clusters(&self) -> Result<Vec<ClusterSpec>> {
        match &self.cluster_ids {
            None => Ok(self.clusters.clone()),
            Some(ids) => ids
                .iter()
                .map(|id| {
                    self.clusters
                        .iter()
                        .find(|c| c.cluster_id == *id)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("unknown cluster id {id}")))
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("disaster config", reason));
        let clusters = self.active_clusters()?;
        if clusters.is_empty() {
            return bad("at least one cluster is required".into());
        }
        let mut ids: Vec<u32> = clusters.iter().map(|c| c.cluster_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("cluster ids must be unique".into());
        }
        if let Some(c) = clusters.iter().find(|c| c.total_population == 0) {
            return bad(format!("cluster {} has zero population", c.cluster_id));
        }
        if self.increment == 0 || self.budget % self.increment != 0 || self.need_cap % self.increment != 0 {
            return bad("the increment must be positive and divide both the budget and the need cap".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        let probs = [self.success_prob, self.balloon_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs[0] + probs[1] - 1.0).abs() > 1e-12 {
            return bad(format!("success and balloon probabilities must sum to 1, got {probs:?}"));
        }
        Ok(())
    }
}

/// Decoded state and action spaces of a disaster instance.
#[derive(Debug, Clone)]
pub struct DisasterModel {
    pub config: DisasterConfig,
    pub clusters: Vec<ClusterSpec>,
    levels: usize,
    allocations: Vec<Vec<u64>>,
    action_index: HashMap<Vec<u64>, usize>,
}

impl DisasterModel {
    /// Validates `config` and enumerates the spaces, refusing instances beyond the caps.
    pub fn new(config: &DisasterConfig) -> Result<Self> {
        config.validate()?;
        let clusters = config.active_clusters()?;
        let n = clusters.len();
        let levels = (config.need_cap / config.increment) as usize + 1;
        let n_states = (levels as f64).powi(n as i32);
        if n_states > config.max_states as f64 {
            return Err(Error::SizeCap { what: "disaster states", count: n_states, cap: config.max_states as f64 });
        }
        let units = (config.budget / config.increment) as usize;
        // allocations of at most `units` chunks over n clusters: C(units + n, n)
        let n_actions = (1..=n).fold(1.0, |acc, i| acc * (units + i) as f64 / i as f64).round();
        if n_actions > config.max_actions as f64 {
            return Err(Error::SizeCap { what: "disaster actions", count: n_actions, cap: config.max_actions as f64 });
        }
        let mut allocations = Vec::with_capacity(n_actions as usize);
        let mut current = vec![0u64; n];
        enumerate_allocations(&mut current, 0, units as u64, config.increment, &mut allocations);
        let action_index = allocations.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Ok(DisasterModel { config: config.clone(), clusters, levels, allocations, action_index })
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_states(&self) -> usize {
        self.levels.pow(self.clusters.len() as u32)
    }

    pub fn n_actions(&self) -> usize {
        self.allocations.len()
    }

    /// Remaining need per cluster; the first cluster is the most significant digit.
    pub fn needs(&self, state: usize) -> Vec<u64> {
        let mut out = vec![0; self.n_clusters()];
        let mut rest = state;
        for slot in out.iter_mut().rev() {
            *slot = (rest % self.levels) as u64 * self.config.increment;
            rest /= self.levels;
        }
        out
    }

    pub fn state_index(&self, needs: &[u64]) -> usize {
        needs.iter().fold(0, |acc, &s| acc * self.levels + (s / self.config.increment) as usize)
    }

    pub fn allocation(&self, action: usize) -> &[u64] {
        &self.allocations[action]
    }

    pub fn action_index(&self, allocation: &[u64]) -> Option<usize> {
        self.action_index.get(allocation).copied()
    }

    /// Initial needs rounded up to the increment and clipped to the cap.
    pub fn initial_needs(&self) -> Vec<u64> {
        let b = self.config.increment;
        self.clusters.iter().map(|c| (c.initial_need.div_ceil(b) * b).min(self.config.need_cap)).collect()
    }

    /// An action is feasible in a state when it gives nothing to zero-need clusters.
    pub fn is_feasible(&self, state: usize, action: usize) -> bool {
        self.needs(state).iter().zip(self.allocation(action)).all(|(&s, &a)| s > 0 || a == 0)
    }

    /// Next-need distribution of one cluster.
    pub fn cluster_transition(&self, need: u64, allocation: u64) -> Vec<(u64, f64)> {
        if allocation >= need {
            return vec![(0, 1.0)];
        }
        let c = &self.config;
        let grown = (need + c.increment).min(c.need_cap);
        [(need - allocation, c.success_prob), (grown, c.balloon_prob)].into_iter().filter(|(_, p)| *p > 0.0).collect()
    }

    /// Step reward of every cluster before the lower-bound clamp.
    pub fn step_rewards(&self, state: usize, action: usize) -> Vec<f64> {
        let needs = self.needs(state);
        let alloc = self.allocation(action);
        let total: u64 = alloc.iter().sum();
        let scale = match self.config.reward_mode {
            RewardMode::PerStep => 1.0,
            RewardMode::HorizonAverage => 1.0 / self.config.horizon as f64,
        };
        self.clusters
            .iter()
            .zip(needs.iter().zip(alloc))
            .map(|(cluster, (&s, &a))| {
                let met = if cluster.initial_need > 0 { a.min(s) as f64 / cluster.initial_need as f64 } else { 0.0 };
                let share = if total > 0 { a as f64 / total as f64 } else { 0.0 };
                scale * 0.5 * (met + share)
            })
            .collect()
    }

    fn joint_transition(&self, state: usize, action: usize) -> Vec<(u32, f64)> {
        let needs = self.needs(state);
        let mut outcomes: Vec<(Vec<u64>, f64)> = vec![(Vec::with_capacity(needs.len()), 1.0)];
        for (&s, &a) in needs.iter().zip(self.allocation(action)) {
            let options = self.cluster_transition(s, a);
            outcomes = outcomes
                .into_iter()
                .flat_map(|(prefix, p)| {
                    options.iter().map(move |&(next, q)| {
                        let mut v = prefix.clone();
                        v.push(next);
                        (v, p * q)
                    })
                })
                .collect();
        }
        let mut merged: BTreeMap<u32, f64> = BTreeMap::new();
        for (next, p) in outcomes {
            *merged.entry(self.state_index(&next) as u32).or_default() += p;
        }
        merged.into_iter().collect()
    }

    fn state_label(&self, state: usize) -> String {
        join(&self.needs(state))
    }
}

fn join(values: &[u64]) -> String {
    values.iter().map(u64::to_string).collect::<Vec<_>>().join("-")
}

fn enumerate_allocations(current: &mut Vec<u64>, cluster: usize, units_left: u64, b: u64, out: &mut Vec<Vec<u64>>) {
    if cluster == current.len() {
        out.push(current.clone());
        return;
    }
    for u in 0..=units_left {
        current[cluster] = u * b;
        enumerate_allocations(current, cluster + 1, units_left - u, b, out);
    }
    current[cluster] = 0;
}

/// Builds the explicit disaster MDP. States are labelled by their needs, actions by their
/// allocations, both as dash-separated lists in cluster order.
pub fn build_disaster_mdp(config: &DisasterConfig) -> Result<FiniteMdp> {
    let model = DisasterModel::new(config)?;
    build_from_model(&model)
}

pub fn build_from_model(model: &DisasterModel) -> Result<FiniteMdp> {
    let (n_s, n_a, n) = (model.n_states(), model.n_actions(), model.n_clusters());
    let rows: Vec<Vec<(u32, f64)>> =
        (0..n_s * n_a).into_par_iter().map(|i| model.joint_transition(i / n_a, i % n_a)).collect();
    let mut rewards = vec![vec![0.0; n_s * n_a]; n];
    for s in 0..n_s {
        for a in 0..n_a {
            for (c, r) in model.step_rewards(s, a).into_iter().enumerate() {
                rewards[c][s * n_a + a] = r;
            }
        }
    }
    MdpBuilder {
        states: (0..n_s).map(|s| model.state_label(s)).collect(),
        actions: model.allocations.iter().map(|a| join(a)).collect(),
        rows,
        rewards,
        horizon: model.config.horizon,
        initial_state: model.state_index(&model.initial_needs()),
        lower: None,
        upper: None,
    }
    .build()
}

/// The six allocation priorities, each scoring clusters in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Priority {
    LowestIncome,
    HighestPopulation,
    HighestUnmetNeed,
    HighestNeedPerCapita,
    HighDensity,
    FarFromInfrastructure,
}

impl Priority {
    pub const ALL: [Priority; 6] = [
        Priority::LowestIncome,
        Priority::HighestPopulation,
        Priority::HighestUnmetNeed,
        Priority::HighestNeedPerCapita,
        Priority::HighDensity,
        Priority::FarFromInfrastructure,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Priority::LowestIncome => "lowest-income",
            Priority::HighestPopulation => "highest-population",
            Priority::HighestUnmetNeed => "highest-unmet-need",
            Priority::HighestNeedPerCapita => "highest-need-per-capita",
            Priority::HighDensity => "high-density",
            Priority::FarFromInfrastructure => "far-from-infrastructure",
        }
    }
}

/// How a policy ranks clusters within one step.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Rule {
    /// Highest weighted sum of priority scores.
    Weighted([f64; 6]),
    /// Lexicographic comparison of priority scores in the given order.
    Ordered([usize; 6]),
}

struct Scorer<'m> {
    model: &'m DisasterModel,
    max_population: f64,
    max_per_capita: f64,
}

impl<'m> Scorer<'m> {
    fn new(model: &'m DisasterModel) -> Self {
        let cap = model.config.need_cap as f64;
        let max_population = model.clusters.iter().map(|c| c.total_population).max().unwrap_or(1) as f64;
        let max_per_capita =
            model.clusters.iter().map(|c| cap / c.total_population as f64).fold(f64::MIN_POSITIVE, f64::max);
        Scorer { model, max_population, max_per_capita }
    }

    fn scores(&self, cluster: usize, remaining: u64) -> [f64; 6] {
        let c = &self.model.clusters[cluster];
        let income = match c.income_level {
            Income::Low => 1.0,
            Income::Middle => 0.5,
            Income::High => 0.0,
        };
        let remaining = remaining as f64;
        [
            income,
            c.total_population as f64 / self.max_population,
            remaining / self.model.config.need_cap as f64,
            remaining / c.total_population as f64 / self.max_per_capita,
            if c.density == Density::High { 1.0 } else { 0.0 },
            if c.proximity == Proximity::Far { 1.0 } else { 0.0 },
        ]
    }

    /// Greedy allocation: each chunk of `b` goes to the best-ranked cluster that still has
    /// unmet need, with ties broken by the lower position.
    fn action(&self, rule: &Rule, state: usize) -> usize {
        let alloc = self.allocate(rule, &self.model.needs(state));
        self.model.action_index(&alloc).expect("greedy allocation stays within budget")
    }

    fn allocate(&self, rule: &Rule, needs: &[u64]) -> Vec<u64> {
        let b = self.model.config.increment;
        let mut remaining = needs.to_vec();
        let mut alloc = vec![0; needs.len()];
        for _ in 0..self.model.config.budget / b {
            let mut best: Option<(usize, [f64; 6])> = None;
            for (c, &r) in remaining.iter().enumerate() {
                if r == 0 {
                    continue;
                }
                let scores = self.scores(c, r);
                if best.is_none_or(|(_, top)| ranks_above(rule, &scores, &top)) {
                    best = Some((c, scores));
                }
            }
            let Some((c, _)) = best else { break };
            alloc[c] += b;
            remaining[c] = remaining[c].saturating_sub(b);
        }
        alloc
    }
}

fn ranks_above(rule: &Rule, x: &[f64; 6], y: &[f64; 6]) -> bool {
    match rule {
        Rule::Weighted(w) => {
            let dot = |v: &[f64; 6]| w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            dot(x) > dot(y)
        }
        Rule::Ordered(order) => {
            for &i in order {
                if x[i] != y[i] {
                    return x[i] > y[i];
                }
            }
            false
        }
    }
}

fn pure(i: usize) -> Rule {
    let mut w = [0.0; 6];
    w[i] = 1.0;
    Rule::Weighted(w)
}

/// How often a generated policy draws a new ranking rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Redraw {
    /// One rule for the whole policy.
    Policy,
    /// A fresh rule at every time step.
    Step,
    /// A fresh rule at every (time step, state) pair.
    #[default]
    StepState,
}

/// Feasible priority policies for the disaster instance.
///
/// The first six follow one priority each. Every later policy draws rules at the granularity
/// set by `config.policy_redraw`; each draw is, with equal chance, one pure priority, a
/// Dirichlet(1) weighting of the six scores, or a random priority order. Policy `k` uses seed
/// `derive_seed([seed, k])`.
pub fn generate_disaster_policies(config: &DisasterConfig, count: usize, seed: u64) -> Result<PolicySet> {
    let model = DisasterModel::new(config)?;
    generate_from_model(&model, count, seed)
}

pub fn generate_from_model(model: &DisasterModel, count: usize, seed: u64) -> Result<PolicySet> {
    if count < Priority::ALL.len() {
        return Err(Error::Domain(format!("at least 6 policies are required, got {count}")));
    }
    let scorer = Scorer::new(model);
    let horizon = model.config.horizon;
    let n_s = model.n_states();
    let redraw = model.config.policy_redraw;
    let policies = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut actions = Vec::with_capacity(horizon * n_s);
            let id = if k < Priority::ALL.len() {
                let rule = pure(k);
                for _ in 0..horizon {
                    actions.extend((0..n_s).map(|s| scorer.action(&rule, s)));
                }
                format!("priority-{}", Priority::ALL[k].slug())
            } else {
                let mut rng = seeding::rng(seeding::derive_seed(&[seed, k as u64]), 0);
                let mut rule = random_rule(&mut rng);
                for h in 0..horizon {
                    if redraw == Redraw::Step && h > 0 {
                        rule = random_rule(&mut rng);
                    }
                    for s in 0..n_s {
                        if redraw == Redraw::StepState && (h, s) != (0, 0) {
                            rule = random_rule(&mut rng);
                        }
                        actions.push(scorer.action(&rule, s));
                    }
                }
                format!("random-{k:05}")
            };
            Policy::deterministic(id, n_s, model.n_actions(), horizon, &actions)
        })
        .collect::<Result<Vec<_>>>()?;
    PolicySet::new(policies, PolicySource { generator: "disaster".into(), seed: Some(seed) })
}

fn random_rule<R: Rng>(rng: &mut R) -> Rule {
    match rng.random_range(0..3) {
        0 => pure(rng.random_range(0..Priority::ALL.len())),
        1 => Rule::Weighted(Dirichlet::new([1.0; 6]).expect("valid concentration").sample(rng)),
        _ => {
            let mut order = [0, 1, 2, 3, 4, 5];
            order.shuffle(rng);
            Rule::Ordered(order)
        }
    }
}

/// Shape of a random MDP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpSpec {
    pub states: usize,
    pub actions: usize,
    pub stakeholders: usize,
    pub horizon: usize,
    pub kappa: f64,
    pub seed: u64,
}

/// Dense random transitions and rewards uniform on `[1/κ, 1]`.
pub fn random_mdp(spec: &RandomMdpSpec) -> Result<FiniteMdp> {
    if spec.states == 0 || spec.actions == 0 || spec.stakeholders == 0 || spec.horizon == 0 {
        return Err(Error::Domain("random MDP sizes must be at least 1".into()));
    }
    if !(spec.kappa >= 1.0) || !spec.kappa.is_finite() {
        return Err(Error::Domain(format!("kappa must be finite and at least 1, got {}", spec.kappa)));
    }
    let mut rng = seeding::rng(spec.seed, 0);
    let (n_s, n_a) = (spec.states, spec.actions);
    let rows = (0..n_s * n_a)
        .map(|_| {
            let weights: Vec<f64> = (0..n_s).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = weights.iter().sum();
            weights.iter().enumerate().map(|(t, w)| (t as u32, w / total)).collect()
        })
        .collect();
    let (lower, upper) = (1.0 / spec.kappa, 1.0);
    let rewards = (0..spec.stakeholders)
        .map(|_| (0..n_s * n_a).map(|_| lower + (upper - lower) * rng.random::<f64>()).collect())
        .collect();
    MdpBuilder {
        states: (0..n_s).map(|s| s.to_string()).collect(),
        actions: (0..n_a).map(|a| a.to_string()).collect(),
        rows,
        rewards,
        horizon: spec.horizon,
        initial_state: 0,
        lower: Some(lower),
        upper: Some(upper),
    }
    .build()
}

/// `count` uniformly random deterministic policies (duplicates possible).
pub fn random_policy_set(mdp: &FiniteMdp, count: usize, seed: u64) -> Result<PolicySet> {
    let mut rng = seeding::rng(seed, 0);
    let slots = mdp.n_states() * mdp.horizon();
    let policies = (0..count)
        .map(|k| {
            let actions: Vec<usize> = (0..slots).map(|_| rng.random_range(0..mdp.n_actions())).collect();
            Policy::deterministic(format!("rand-{k:05}"), mdp.n_states(), mdp.n_actions(), mdp.horizon(), &actions)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicySet::new(policies, PolicySource { generator: "random".into(), seed: Some(seed) })?.with_mdp_ref(mdp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::write_policy_set;

    fn toy(needs: &[u64], budget: u64) -> DisasterConfig {
        let clusters = default_clusters()
            .into_iter()
            .zip(needs)
            .map(|(c, &n)| ClusterSpec { initial_need: n, ..c })
            .collect();
        DisasterConfig { clusters, budget, ..DisasterConfig::default() }
    }

    #[test]
    fn table_data_is_bundled() {
        let all = default_clusters();
        assert_eq!(all.len(), 12);
        assert_eq!(all.iter().map(|c| c.total_population).sum::<u64>(), 7126);
        assert_eq!(all.iter().map(|c| c.initial_need).sum::<u64>(), 5450);
        assert_eq!(all[5].density, Density::High);
        assert_eq!(all[5].income_level, Income::Middle);
    }

    #[test]
    fn single_cluster_transitions() {
        let m = DisasterModel::new(&toy(&[100], 150)).unwrap();
        assert_eq!(m.cluster_transition(100, 100), vec![(0, 1.0)]);
        assert_eq!(m.cluster_transition(100, 50), vec![(50, 0.7), (150, 0.3)]);
        assert_eq!(m.cluster_transition(150, 0), vec![(150, 0.7), (150, 0.3)]);
        assert_eq!(m.cluster_transition(0, 0), vec![(0, 1.0)]);
    }

    #[test]
    fn reduced_instance_dimensions() {
        let mdp = build_disaster_mdp(&DisasterConfig::reduced()).unwrap();
        assert_eq!(mdp.n_states(), 256);
        assert_eq!(mdp.n_actions(), 35);
        assert_eq!(mdp.n_rewards(), 4);
        assert_eq!(mdp.horizon(), 4);
        assert_eq!(mdp.state_names()[mdp.initial_state()], "150-150-150-50");
        assert!((mdp.reward_lower() - 1e-3 * mdp.reward_upper()).abs() < 1e-15);
    }

    #[test]
    fn full_instance_is_refused_with_counts() {
        match build_disaster_mdp(&DisasterConfig::default()) {
            Err(Error::SizeCap { count, .. }) => assert_eq!(count, 16_777_216.0),
            other => panic!("expected a size-cap refusal, got {other:?}"),
        }
    }

    #[test]
    fn kernel_rows_and_marginals() {
        let config = toy(&[100, 150, 50], 100);
        let model = DisasterModel::new(&config).unwrap();
        let mdp = build_from_model(&model).unwrap();
        for s in 0..mdp.n_states() {
            let needs = model.needs(s);
            for a in 0..mdp.n_actions() {
                let row = mdp.successors(s, a);
                let total: f64 = row.iter().map(|(_, p)| p).sum();
                assert!((total - 1.0).abs() < 1e-9);
                let alloc = model.allocation(a);
                assert!(alloc.iter().sum::<u64>() <= 100);
                assert!(alloc.iter().all(|x| x % 50 == 0));
                for c in 0..3 {
                    let mut marginal: BTreeMap<u64, f64> = BTreeMap::new();
                    for &(t, p) in row {
                        *marginal.entry(model.needs(t as usize)[c]).or_default() += p;
                    }
                    let mut expect: BTreeMap<u64, f64> = BTreeMap::new();
                    for (next, p) in model.cluster_transition(needs[c], alloc[c]) {
                        *expect.entry(next).or_default() += p;
                    }
                    assert_eq!(marginal.keys().collect::<Vec<_>>(), expect.keys().collect::<Vec<_>>());
                    for (k, p) in &expect {
                        assert!((marginal[k] - p).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn step_reward_formula() {
        let model = DisasterModel::new(&toy(&[100, 300], 150)).unwrap();
        let s = model.state_index(&[100, 150]);
        let a = model.action_index(&[50, 100]).unwrap();
        let r = model.step_rewards(s, a);
        assert!((r[0] - 0.5 * (50.0 / 100.0 + 50.0 / 150.0)).abs() < 1e-15);
        assert!((r[1] - 0.5 * (100.0 / 300.0 + 100.0 / 150.0)).abs() < 1e-15);
        let idle = model.action_index(&[0, 0]).unwrap();
        assert_eq!(model.step_rewards(s, idle), vec![0.0, 0.0]);
        let averaged = DisasterModel::new(&DisasterConfig { reward_mode: RewardMode::HorizonAverage, ..toy(&[100, 300], 150) })
            .unwrap()
            .step_rewards(s, a);
        assert!((averaged[0] - r[0] / 4.0).abs() < 1e-15);
    }

    #[test]
    fn six_pure_priorities() {
        let set = generate_disaster_policies(&DisasterConfig::reduced(), 6, 3).unwrap();
        assert_eq!(set.len(), 6);
        assert!(set.policies().iter().all(|p| p.id().starts_with("priority-")));
        assert!(generate_disaster_policies(&DisasterConfig::reduced(), 5, 3).is_err());
    }

    #[test]
    fn unmet_need_priority_toy() {
        let config = toy(&[100, 50], 50);
        let model = DisasterModel::new(&config).unwrap();
        let set = generate_from_model(&model, 6, 0).unwrap();
        let policy = set.by_id("priority-highest-unmet-need").unwrap();
        let start = model.state_index(&model.initial_needs());
        let action = policy.deterministic_actions().unwrap()[start];
        assert_eq!(model.allocation(action), &[50, 0]);
    }

    #[test]
    fn generated_policies_are_feasible() {
        let config = DisasterConfig::reduced();
        let model = DisasterModel::new(&config).unwrap();
        let set = generate_from_model(&model, 40, 11).unwrap();
        let n_s = model.n_states();
        for policy in set.policies() {
            for (slot, &a) in policy.deterministic_actions().unwrap().iter().enumerate() {
                let s = slot % n_s;
                assert!(model.is_feasible(s, a), "{} allocates to a zero-need cluster in state {s}", policy.id());
                let needs = model.needs(s);
                let alloc = model.allocation(a);
                // the greedy rule spends the whole budget unless the total need is smaller
                assert_eq!(alloc.iter().sum::<u64>(), needs.iter().sum::<u64>().min(150));
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let bytes = |seed| {
            let set = generate_disaster_policies(&DisasterConfig::reduced(), 30, seed).unwrap();
            let mut out = Vec::new();
            write_policy_set(&set, &mut out).unwrap();
            out
        };
        assert_eq!(bytes(5), bytes(5));
        assert_ne!(bytes(5), bytes(6));
    }

    #[test]
    fn random_mdp_properties() {
        let spec = RandomMdpSpec { states: 4, actions: 3, stakeholders: 3, horizon: 3, kappa: 1.0, seed: 1 };
        let flat = random_mdp(&spec).unwrap();
        for i in 0..3 {
            for s in 0..4 {
                for a in 0..3 {
                    assert_eq!(flat.reward(i, s, a), 1.0);
                    let total: f64 = flat.successors(s, a).iter().map(|(_, p)| p).sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
        let a = random_mdp(&RandomMdpSpec { kappa: 10.0, ..spec }).unwrap();
        let b = random_mdp(&RandomMdpSpec { kappa: 10.0, seed: 2, ..spec }).unwrap();
        assert_eq!(a.digest(), random_mdp(&RandomMdpSpec { kappa: 10.0, ..spec }).unwrap().digest());
        assert_ne!(a.digest(), b.digest());
        assert!(a.condition_number() <= 10.0 + 1e-12);
        assert!(random_mdp(&RandomMdpSpec { kappa: 0.5, ..spec }).is_err());
    }
}
