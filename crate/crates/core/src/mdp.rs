//! Finite-horizon MDPs with one reward table per stakeholder, and the two ways of
//! aggregating a policy's returns: scalarized expected returns (SER) and expected
//! scalarized returns (ESR).

use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{from_json_str, Error, Result};
use crate::policy::{ActionDist, Policy};
use crate::seeding;
use crate::welfare::{p_mean_unchecked, PValue};

/// Tolerance on transition row sums.
pub const ROW_TOL: f64 = 1e-9;
/// Default cap on the number of trajectories exact ESR may enumerate.
pub const DEFAULT_PATH_CAP: f64 = 1e6;
/// When no lower reward bound is declared, `L = LOWER_BOUND_RATIO · U`.
pub const LOWER_BOUND_RATIO: f64 = 1e-3;

/// A finite-horizon MDP. Immutable once built; reward entries satisfy `L ≤ R ≤ U`.
#[derive(Debug, Clone)]
pub struct FiniteMdp {
    states: Vec<String>,
    actions: Vec<String>,
    /// Sparse successor lists indexed by `s·|A| + a`.
    rows: Vec<Vec<(u32, f64)>>,
    /// `rewards[i][s·|A| + a]`.
    rewards: Vec<Vec<f64>>,
    horizon: usize,
    initial_state: usize,
    lower: f64,
    upper: f64,
    clamped: usize,
    digest: OnceLock<String>,
}

impl PartialEq for FiniteMdp {
    fn eq(&self, other: &Self) -> bool {
        self.states == other.states
            && self.actions == other.actions
            && self.rows == other.rows
            && self.rewards == other.rewards
            && self.horizon == other.horizon
            && self.initial_state == other.initial_state
            && self.lower == other.lower
            && self.upper == other.upper
    }
}

impl FiniteMdp {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    /// Number of stakeholders `N`.
    pub fn n_rewards(&self) -> usize {
        self.rewards.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn state_names(&self) -> &[String] {
        &self.states
    }

    pub fn action_names(&self) -> &[String] {
        &self.actions
    }

    pub fn reward_lower(&self) -> f64 {
        self.lower
    }

    pub fn reward_upper(&self) -> f64 {
        self.upper
    }

    /// Number of reward entries raised to `L` when the model was built.
    pub fn clamped_entries(&self) -> usize {
        self.clamped
    }

    /// `κ = U / L`.
    pub fn condition_number(&self) -> f64 {
        self.upper / self.lower
    }

    /// Successor states of `(state, action)` with positive probability.
    pub fn successors(&self, state: usize, action: usize) -> &[(u32, f64)] {
        &self.rows[state * self.actions.len() + action]
    }

    pub fn reward(&self, stakeholder: usize, state: usize, action: usize) -> f64 {
        self.rewards[stakeholder][state * self.actions.len() + action]
    }

    /// Hex SHA-256 of the canonical JSON form; used as `mdp_ref` in policy-set files.
    pub fn digest(&self) -> String {
        self.digest
            .get_or_init(|| {
                let bytes = serde_json::to_vec(&self.to_file()).expect("MDP serialization cannot fail");
                hex::encode(Sha256::digest(bytes))
            })
            .clone()
    }

    pub fn to_file(&self) -> MdpFile {
        let n_a = self.actions.len();
        let n_s = self.states.len();
        let transition = (0..n_s)
            .map(|s| {
                (0..n_a)
                    .map(|a| {
                        let mut dense = vec![0.0; n_s];
                        for &(t, pr) in &self.rows[s * n_a + a] {
                            dense[t as usize] += pr;
                        }
                        dense
                    })
                    .collect()
            })
            .collect();
        let rewards = self
            .rewards
            .iter()
            .map(|table| table.chunks(n_a).map(<[f64]>::to_vec).collect())
            .collect();
        MdpFile {
            states: self.states.iter().cloned().map(Label::Name).collect(),
            actions: self.actions.iter().cloned().map(Label::Name).collect(),
            transition,
            rewards,
            horizon: self.horizon,
            initial_state: self.initial_state,
            reward_bounds: Some([Some(self.lower), Some(self.upper)]),
        }
    }

    pub fn from_file(file: MdpFile) -> Result<Self> {
        let n_s = file.states.len();
        let n_a = file.actions.len();
        if file.transition.len() != n_s {
            return Err(schema("/transition", format!("expected {n_s} rows of actions, got {}", file.transition.len())));
        }
        let mut rows = Vec::with_capacity(n_s * n_a);
        for (s, per_action) in file.transition.iter().enumerate() {
            if per_action.len() != n_a {
                return Err(schema(&format!("/transition/{s}"), format!("expected {n_a} actions")));
            }
            for (a, dense) in per_action.iter().enumerate() {
                if dense.len() != n_s {
                    return Err(schema(&format!("/transition/{s}/{a}"), format!("expected {n_s} probabilities")));
                }
                rows.push(dense.iter().enumerate().filter(|(_, p)| **p != 0.0).map(|(t, p)| (t as u32, *p)).collect());
            }
        }
        let mut rewards = Vec::with_capacity(file.rewards.len());
        for (i, table) in file.rewards.iter().enumerate() {
            if table.len() != n_s || table.iter().any(|r| r.len() != n_a) {
                return Err(schema(&format!("/rewards/{i}"), format!("expected a {n_s}×{n_a} table")));
            }
            rewards.push(table.iter().flatten().copied().collect());
        }
        let [lower, upper] = file.reward_bounds.unwrap_or([None, None]);
        MdpBuilder {
            states: file.states.into_iter().map(Label::into_string).collect(),
            actions: file.actions.into_iter().map(Label::into_string).collect(),
            rows,
            rewards,
            horizon: file.horizon,
            initial_state: file.initial_state,
            lower,
            upper,
        }
        .build()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(from_json_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(&self.to_file()).map_err(|e| Error::invalid("MDP", e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn schema(pointer: &str, message: String) -> Error {
    Error::Schema { pointer: pointer.into(), message }
}

/// State or action label; files may use strings or numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Name(String),
    Number(serde_json::Number),
}

impl Label {
    fn into_string(self) -> String {
        match self {
            Label::Name(s) => s,
            Label::Number(n) => n.to_string(),
        }
    }
}

/// The MDP JSON document. `reward_bounds` entries may be `null` to request the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub states: Vec<Label>,
    pub actions: Vec<Label>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<Vec<f64>>>,
    pub horizon: usize,
    pub initial_state: usize,
    #[serde(default)]
    pub reward_bounds: Option<[Option<f64>; 2]>,
}

/// Assembles and validates a [`FiniteMdp`].
#[derive(Debug, Clone)]
pub struct MdpBuilder {
    pub states: Vec<String>,
    pub actions: Vec<String>,
    /// Sparse successor lists indexed by `s·|A| + a`.
    pub rows: Vec<Vec<(u32, f64)>>,
    /// `rewards[i][s·|A| + a]`.
    pub rewards: Vec<Vec<f64>>,
    pub horizon: usize,
    pub initial_state: usize,
    /// Declared `L`; defaults to `1e−3·U`.
    pub lower: Option<f64>,
    /// Declared `U`; defaults to the largest reward entry.
    pub upper: Option<f64>,
}

impl MdpBuilder {
    /// Numbered states and actions, uniform transitions and every reward equal to `value`,
    /// with bounds `L = U = value`.
    pub fn uniform(n_states: usize, n_actions: usize, n_rewards: usize, horizon: usize, value: f64) -> Self {
        let row: Vec<(u32, f64)> = (0..n_states as u32).map(|t| (t, 1.0 / n_states as f64)).collect();
        MdpBuilder {
            states: (0..n_states).map(|s| s.to_string()).collect(),
            actions: (0..n_actions).map(|a| a.to_string()).collect(),
            rows: vec![row; n_states * n_actions],
            rewards: vec![vec![value; n_states * n_actions]; n_rewards],
            horizon,
            initial_state: 0,
            lower: Some(value),
            upper: Some(value),
        }
    }

    pub fn build(self) -> Result<FiniteMdp> {
        let n_s = self.states.len();
        let n_a = self.actions.len();
        let bad = |reason: String| Error::invalid("MDP", reason);
        if n_s == 0 || n_a == 0 {
            return Err(bad("state and action sets must be non-empty".into()));
        }
        if self.horizon == 0 {
            return Err(bad("horizon must be at least 1".into()));
        }
        if self.initial_state >= n_s {
            return Err(bad(format!("initial state {} out of range", self.initial_state)));
        }
        if self.rows.len() != n_s * n_a {
            return Err(bad(format!("expected {} transition rows, got {}", n_s * n_a, self.rows.len())));
        }
        for (idx, row) in self.rows.iter().enumerate() {
            let (s, a) = (idx / n_a, idx % n_a);
            if let Some(&(t, p)) = row.iter().find(|(t, p)| *t as usize >= n_s || !(*p >= 0.0) || !p.is_finite()) {
                return Err(bad(format!("row ({s}, {a}): invalid entry ({t}, {p})")));
            }
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > ROW_TOL {
                return Err(bad(format!("row ({s}, {a}) sums to {total}")));
            }
        }
        if self.rewards.is_empty() {
            return Err(bad("at least one reward function is required".into()));
        }
        let mut rewards = self.rewards;
        for (i, table) in rewards.iter().enumerate() {
            if table.len() != n_s * n_a {
                return Err(bad(format!("reward table {i} has {} entries, expected {}", table.len(), n_s * n_a)));
            }
            if table.iter().any(|r| !r.is_finite()) {
                return Err(bad(format!("reward table {i} has a non-finite entry")));
            }
        }
        let observed_max = rewards.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let upper = self.upper.unwrap_or(observed_max);
        let lower = self.lower.unwrap_or(LOWER_BOUND_RATIO * upper);
        if !(lower > 0.0) || !(upper >= lower) || !upper.is_finite() {
            return Err(bad(format!("reward bounds must satisfy 0 < L ≤ U, got L = {lower}, U = {upper}")));
        }
        if observed_max > upper {
            return Err(bad(format!("reward {observed_max} exceeds the declared upper bound {upper}")));
        }
        let mut clamped = 0;
        for r in rewards.iter_mut().flatten() {
            if *r < lower {
                *r = lower;
                clamped += 1;
            }
        }
        if clamped > 0 {
            log::warn!("raised {clamped} reward entries to the lower bound L = {lower}");
        }
        Ok(FiniteMdp {
            states: self.states,
            actions: self.actions,
            rows: self.rows,
            rewards,
            horizon: self.horizon,
            initial_state: self.initial_state,
            lower,
            upper,
            clamped,
            digest: OnceLock::new(),
        })
    }
}

/// A sampled trajectory `(s_h, a_h)` for `h = 0..H`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Total (or expected total) reward per stakeholder.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnVector(pub Vec<f64>);

impl ReturnVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

fn dist_at<'p>(policy: &'p Policy, state: usize, step: usize) -> Result<ActionDist<'p>> {
    policy
        .action(state, step)
        .ok_or_else(|| Error::UndefinedPolicy { policy: policy.id().to_string(), state, step })
}

fn sample_index(weights: impl Iterator<Item = (usize, f64)>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights {
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Samples one trajectory. Actions and successors come from independent sub-streams of `seed`.
pub fn simulate(mdp: &FiniteMdp, policy: &Policy, seed: u64) -> Result<Trajectory> {
    policy.check_shape(mdp)?;
    let mut action_rng = seeding::rng(seed, 0);
    let mut state_rng = seeding::rng(seed, 1);
    let mut s = mdp.initial_state;
    let mut steps = Vec::with_capacity(mdp.horizon);
    for h in 0..mdp.horizon {
        let a = match dist_at(policy, s, h)? {
            ActionDist::Single(a) => a,
            dist @ ActionDist::Mixed(_) => sample_index(dist.support(), action_rng.random::<f64>()),
        };
        steps.push((s, a));
        if h + 1 < mdp.horizon {
            let row = mdp.successors(s, a);
            s = if row.len() == 1 {
                row[0].0 as usize
            } else {
                sample_index(row.iter().map(|&(t, p)| (t as usize, p)), state_rng.random::<f64>())
            };
        }
    }
    Ok(Trajectory { steps, seed })
}

/// `Gᵢ(τ) = Σ_h Rᵢ(s_h, a_h)`.
pub fn return_vector(mdp: &FiniteMdp, trajectory: &Trajectory) -> ReturnVector {
    let n_a = mdp.n_actions();
    ReturnVector(
        mdp.rewards
            .iter()
            .map(|table| trajectory.steps.iter().map(|&(s, a)| table[s * n_a + a]).sum())
            .collect(),
    )
}

/// Exact `E_τ[G(τ)]` by propagating the state-occupancy distribution forward over the horizon.
pub fn expected_return_vector(mdp: &FiniteMdp, policy: &Policy) -> Result<ReturnVector> {
    policy.check_shape(mdp)?;
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let mut occupancy = vec![0.0; n_s];
    occupancy[mdp.initial_state] = 1.0;
    let mut next = vec![0.0; n_s];
    let mut totals = vec![0.0; mdp.n_rewards()];
    for h in 0..mdp.horizon {
        let last = h + 1 == mdp.horizon;
        next.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..n_s {
            let d = occupancy[s];
            if d == 0.0 {
                continue;
            }
            for (a, pa) in dist_at(policy, s, h)?.support() {
                let w = d * pa;
                let idx = s * n_a + a;
                for (total, table) in totals.iter_mut().zip(&mdp.rewards) {
                    *total += w * table[idx];
                }
                if !last {
                    for &(t, pt) in &mdp.rows[idx] {
                        next[t as usize] += w * pt;
                    }
                }
            }
        }
        std::mem::swap(&mut occupancy, &mut next);
    }
    Ok(ReturnVector(totals))
}

/// Scalarized expected returns `f(E[G(τ)], p)`, computed without sampling.
pub fn ser_value(mdp: &FiniteMdp, policy: &Policy, p: PValue) -> Result<f64> {
    let g = expected_return_vector(mdp, policy)?;
    crate::welfare::p_mean(g.as_slice(), p)
}

/// Number of distinct trajectories with positive probability under `policy`.
pub fn path_count(mdp: &FiniteMdp, policy: &Policy) -> Result<f64> {
    policy.check_shape(mdp)?;
    let n_s = mdp.n_states();
    // paths[s] for the step currently being folded, filled backwards from the last step
    let mut below = vec![1.0; n_s];
    let mut reach = vec![vec![false; n_s]; mdp.horizon];
    reach[0][mdp.initial_state] = true;
    for h in 0..mdp.horizon {
        for s in 0..n_s {
            if !reach[h][s] {
                continue;
            }
            let dist = dist_at(policy, s, h)?;
            if h + 1 < mdp.horizon {
                for (a, _) in dist.support() {
                    for &(t, _) in mdp.successors(s, a) {
                        reach[h + 1][t as usize] = true;
                    }
                }
            }
        }
    }
    for h in (0..mdp.horizon).rev() {
        let mut here = vec![0.0; n_s];
        for s in 0..n_s {
            if !reach[h][s] {
                continue;
            }
            let dist = dist_at(policy, s, h)?;
            here[s] = if h + 1 == mdp.horizon {
                dist.support().count() as f64
            } else {
                dist.support()
                    .map(|(a, _)| mdp.successors(s, a).iter().map(|&(t, _)| below[t as usize]).sum::<f64>())
                    .sum()
            };
        }
        below = here;
    }
    Ok(below[mdp.initial_state])
}

/// All trajectories' `(probability, G(τ))` pairs, refusing when more than `cap` paths exist.
pub fn return_distribution(mdp: &FiniteMdp, policy: &Policy, cap: f64) -> Result<Vec<(f64, Vec<f64>)>> {
    let count = path_count(mdp, policy)?;
    if count > cap {
        return Err(Error::SizeCap { what: "exact ESR trajectory enumeration", count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut acc = vec![0.0; mdp.n_rewards()];
    enumerate_paths(mdp, policy, mdp.initial_state, 0, 1.0, &mut acc, &mut out)?;
    Ok(out)
}

fn enumerate_paths(
    mdp: &FiniteMdp,
    policy: &Policy,
    s: usize,
    h: usize,
    prob: f64,
    acc: &mut Vec<f64>,
    out: &mut Vec<(f64, Vec<f64>)>,
) -> Result<()> {
    let n_a = mdp.n_actions();
    for (a, pa) in dist_at(policy, s, h)?.support() {
        let idx = s * n_a + a;
        for (v, table) in acc.iter_mut().zip(&mdp.rewards) {
            *v += table[idx];
        }
        if h + 1 == mdp.horizon {
            out.push((prob * pa, acc.clone()));
        } else {
            for &(t, pt) in &mdp.rows[idx] {
                enumerate_paths(mdp, policy, t as usize, h + 1, prob * pa * pt, acc, out)?;
            }
        }
        for (v, table) in acc.iter_mut().zip(&mdp.rewards) {
            *v -= table[idx];
        }
    }
    Ok(())
}

/// `Σ_τ Pr(τ) · f(G(τ), p)` over an enumerated return distribution.
pub fn esr_from_distribution(dist: &[(f64, Vec<f64>)], p: PValue) -> f64 {
    dist.iter().map(|(pr, g)| pr * p_mean_unchecked(g, p)).sum()
}

/// Expected scalarized returns `E_τ[f(G(τ), p)]` by exhaustive trajectory enumeration.
pub fn esr_value_exact(mdp: &FiniteMdp, policy: &Policy, p: PValue, cap: f64) -> Result<f64> {
    let dist = return_distribution(mdp, policy, cap)?;
    crate::welfare::p_mean(&[1.0], p)?; // validates p
    Ok(esr_from_distribution(&dist, p))
}

/// Seed of the `k`-th Monte-Carlo trajectory for a policy. Independent of `p`, so every p reuses
/// the same sample paths and adding policies leaves existing estimates untouched.
pub fn sample_seed(master: u64, policy_id: &str, k: u64) -> u64 {
    seeding::derive_seed(&[master, seeding::hash_str(policy_id), k])
}

/// Return vectors of `n` sampled trajectories.
pub fn sample_returns(mdp: &FiniteMdp, policy: &Policy, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    (0..n as u64)
        .map(|k| simulate(mdp, policy, sample_seed(seed, policy.id(), k)).map(|t| return_vector(mdp, &t).0))
        .collect()
}

/// Sample mean and standard error of `f(Gₖ, p)` over pre-drawn returns.
pub fn mc_from_samples(samples: &[Vec<f64>], p: PValue) -> McEstimate {
    let values: Vec<f64> = samples.iter().map(|g| p_mean_unchecked(g, p)).collect();
    if values.iter().all(|v| *v == values[0]) {
        return McEstimate { estimate: values[0], stderr: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    McEstimate { estimate: mean, stderr: (var / n).sqrt() }
}

/// Monte-Carlo estimate of expected scalarized returns.
pub fn esr_value_mc(mdp: &FiniteMdp, policy: &Policy, p: PValue, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be at least 1".into()));
    }
    crate::welfare::p_mean(&[1.0], p)?;
    Ok(mc_from_samples(&sample_returns(mdp, policy, n_samples, seed)?, p))
}
