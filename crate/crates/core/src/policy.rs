//! Tabular time-dependent policies, policy sets, exhaustive enumeration and the policy-set file.
//!
//! Steps are 0-based throughout (`0..H`); table slot `(s, h)` lives at index `h·|S| + s`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{from_json_str, Error, Result};
use crate::mdp::FiniteMdp;

const UNDEFINED: u32 = u32::MAX;
const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
enum Table {
    /// One action index per slot, `UNDEFINED` where the policy has no entry.
    Deterministic(Vec<u32>),
    /// One distribution per slot, empty where the policy has no entry.
    Stochastic(Vec<Vec<f64>>),
}

/// The action distribution a policy prescribes at one `(state, step)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionDist<'a> {
    Single(usize),
    Mixed(&'a [f64]),
}

impl ActionDist<'_> {
    /// `(action, probability)` pairs with positive mass.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (single, mixed) = match *self {
            ActionDist::Single(a) => (Some((a, 1.0)), None),
            ActionDist::Mixed(probs) => (None, Some(probs)),
        };
        single.into_iter().chain(
            mixed
                .into_iter()
                .flat_map(|p| p.iter().copied().enumerate().filter(|(_, w)| *w > 0.0)),
        )
    }
}

/// A tabular map `(state, step) → Δ(actions)` with a stable id.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    id: String,
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    table: Table,
}

impl Policy {
    /// A deterministic policy from one action per slot (`h·|S| + s` ordering).
    pub fn deterministic(
        id: impl Into<String>,
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        actions: &[usize],
    ) -> Result<Self> {
        let slots = actions.iter().map(|&a| Some(a)).collect::<Vec<_>>();
        Self::deterministic_partial(id, n_states, n_actions, horizon, &slots)
    }

    /// Like [`Policy::deterministic`] but `None` slots stay undefined.
    pub fn deterministic_partial(
        id: impl Into<String>,
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        actions: &[Option<usize>],
    ) -> Result<Self> {
        let id = id.into();
        check_dims(&id, n_states, n_actions, horizon, actions.len())?;
        let mut table = Vec::with_capacity(actions.len());
        for (slot, a) in actions.iter().enumerate() {
            match *a {
                Some(a) if a < n_actions => table.push(a as u32),
                Some(a) => {
                    return Err(Error::invalid(
                        "policy",
                        format!("`{id}` slot {slot}: action {a} out of range (|A| = {n_actions})"),
                    ))
                }
                None => table.push(UNDEFINED),
            }
        }
        Ok(Policy { id, n_states, n_actions, horizon, table: Table::Deterministic(table) })
    }

    /// A stochastic policy; each non-empty distribution must sum to 1 within 1e−9. Empty slots stay undefined.
    pub fn stochastic(
        id: impl Into<String>,
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        probs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let id = id.into();
        check_dims(&id, n_states, n_actions, horizon, probs.len())?;
        for (slot, dist) in probs.iter().enumerate() {
            if dist.is_empty() {
                continue;
            }
            if dist.len() != n_actions {
                return Err(Error::invalid(
                    "policy",
                    format!("`{id}` slot {slot}: distribution has {} entries, expected {n_actions}", dist.len()),
                ));
            }
            if dist.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                return Err(Error::invalid("policy", format!("`{id}` slot {slot}: negative or non-finite mass")));
            }
            let total: f64 = dist.iter().sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(Error::invalid("policy", format!("`{id}` slot {slot}: mass sums to {total}")));
            }
        }
        Ok(Policy { id, n_states, n_actions, horizon, table: Table::Stochastic(probs) })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> PolicyKind {
        match self.table {
            Table::Deterministic(_) => PolicyKind::Deterministic,
            Table::Stochastic(_) => PolicyKind::Stochastic,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// The distribution at `(state, step)`, or `None` where the policy is undefined.
    pub fn action(&self, state: usize, step: usize) -> Option<ActionDist<'_>> {
        if state >= self.n_states || step >= self.horizon {
            return None;
        }
        let slot = step * self.n_states + state;
        match &self.table {
            Table::Deterministic(t) => match t[slot] {
                UNDEFINED => None,
                a => Some(ActionDist::Single(a as usize)),
            },
            Table::Stochastic(t) if t[slot].is_empty() => None,
            Table::Stochastic(t) => Some(ActionDist::Mixed(&t[slot])),
        }
    }

    /// True when every `(state, step)` slot has a distribution.
    pub fn is_complete(&self) -> bool {
        match &self.table {
            Table::Deterministic(t) => t.iter().all(|&a| a != UNDEFINED),
            Table::Stochastic(t) => t.iter().all(|d| !d.is_empty()),
        }
    }

    /// Deterministic action table in slot order, if this policy is deterministic and complete.
    pub fn deterministic_actions(&self) -> Option<Vec<usize>> {
        match &self.table {
            Table::Deterministic(t) if t.iter().all(|&a| a != UNDEFINED) => {
                Some(t.iter().map(|&a| a as usize).collect())
            }
            _ => None,
        }
    }

    /// Checks the policy's shape against an MDP.
    pub fn check_shape(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() || self.horizon != mdp.horizon() {
            return Err(Error::invalid(
                "policy",
                format!(
                    "`{}` has shape |S|={} |A|={} H={}, the MDP has |S|={} |A|={} H={}",
                    self.id,
                    self.n_states,
                    self.n_actions,
                    self.horizon,
                    mdp.n_states(),
                    mdp.n_actions(),
                    mdp.horizon()
                ),
            ));
        }
        Ok(())
    }
}

fn check_dims(id: &str, n_states: usize, n_actions: usize, horizon: usize, len: usize) -> Result<()> {
    if n_states == 0 || n_actions == 0 || horizon == 0 {
        return Err(Error::invalid("policy", format!("`{id}`: empty state/action set or zero horizon")));
    }
    if n_actions >= UNDEFINED as usize {
        return Err(Error::invalid("policy", format!("`{id}`: too many actions")));
    }
    if len != n_states * horizon {
        return Err(Error::invalid(
            "policy",
            format!("`{id}`: table has {len} slots, expected |S|·H = {}", n_states * horizon),
        ));
    }
    Ok(())
}

/// Where a policy set came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicySource {
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// An ordered collection of policies with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    policies: Vec<Policy>,
    index: HashMap<String, usize>,
    pub source: PolicySource,
    /// Digest of the MDP the set was built for, when known.
    pub mdp_ref: Option<String>,
}

impl PolicySet {
    pub fn new(policies: Vec<Policy>, source: PolicySource) -> Result<Self> {
        let mut index = HashMap::with_capacity(policies.len());
        for (i, p) in policies.iter().enumerate() {
            if index.insert(p.id.clone(), i).is_some() {
                return Err(Error::invalid("policy set", format!("duplicate policy id `{}`", p.id)));
            }
        }
        if let Some(first) = policies.first() {
            if let Some(bad) = policies
                .iter()
                .find(|p| (p.n_states, p.n_actions, p.horizon) != (first.n_states, first.n_actions, first.horizon))
            {
                return Err(Error::invalid("policy set", format!("`{}` differs in shape from `{}`", bad.id, first.id)));
            }
        }
        Ok(PolicySet { policies, index, source, mdp_ref: None })
    }

    pub fn with_mdp_ref(mut self, mdp: &FiniteMdp) -> Self {
        self.mdp_ref = Some(mdp.digest());
        self
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn policies(&self) -> &[Policy] {
        &self.policies
    }

    pub fn get(&self, index: usize) -> Option<&Policy> {
        self.policies.get(index)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&Policy> {
        self.index_of(id).map(|i| &self.policies[i])
    }

    /// Checks every policy against the MDP's shape and the set's `mdp_ref`, if present.
    pub fn check_against(&self, mdp: &FiniteMdp) -> Result<()> {
        if let Some(r) = &self.mdp_ref {
            let digest = mdp.digest();
            if *r != digest {
                return Err(Error::invalid(
                    "policy set",
                    format!("built for MDP {r}, but the loaded MDP has digest {digest}"),
                ));
            }
        }
        self.policies.iter().try_for_each(|p| p.check_shape(mdp))
    }
}

/// Number of deterministic policies: `|A|^(|S|·H)`, or `|A|^|S|` when stationary.
pub fn deterministic_policy_count(mdp: &FiniteMdp, stationary: bool) -> f64 {
    let slots = if stationary { mdp.n_states() } else { mdp.n_states() * mdp.horizon() };
    (mdp.n_actions() as f64).powi(slots as i32)
}

/// Every deterministic policy of `mdp`, in lexicographic order of the action table.
///
/// Stationary policies repeat one action per state at every step. Refuses when the count
/// exceeds `max_count`.
pub fn enumerate_deterministic_policies(mdp: &FiniteMdp, max_count: usize, stationary: bool) -> Result<PolicySet> {
    let count = deterministic_policy_count(mdp, stationary);
    if count > max_count as f64 {
        return Err(Error::SizeCap { what: "deterministic policy enumeration", count, cap: max_count as f64 });
    }
    let (n_s, n_a, h) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let digits = if stationary { n_s } else { n_s * h };
    let count = count as usize;
    let width = count.saturating_sub(1).to_string().len();
    let prefix = if stationary { "stat" } else { "det" };
    let mut policies = Vec::with_capacity(count);
    let mut code = vec![0usize; digits];
    for k in 0..count {
        let actions: Vec<usize> = if stationary { (0..h).flat_map(|_| code.iter().copied()).collect() } else { code.clone() };
        policies.push(Policy::deterministic(format!("{prefix}-{k:0width$}"), n_s, n_a, h, &actions)?);
        // increment the base-|A| counter, most significant digit first
        for d in (0..digits).rev() {
            code[d] += 1;
            if code[d] < n_a {
                break;
            }
            code[d] = 0;
        }
    }
    let source = PolicySource {
        generator: if stationary { "exhaustive-stationary" } else { "exhaustive" }.into(),
        seed: None,
    };
    Ok(PolicySet::new(policies, source)?.with_mdp_ref(mdp))
}

// ---- file format ----

#[derive(Serialize)]
struct FileOut<'a> {
    mdp_ref: &'a Option<String>,
    policies: Vec<PolicyOut<'a>>,
    meta: MetaOut<'a>,
}

#[derive(Serialize)]
struct MetaOut<'a> {
    generator: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    states: usize,
    actions: usize,
    horizon: usize,
    count: usize,
}

#[derive(Serialize)]
struct PolicyOut<'a> {
    id: &'a str,
    kind: PolicyKind,
    table: TableOut<'a>,
}

struct TableOut<'a>(&'a Policy);

impl Serialize for TableOut<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let p = self.0;
        let mut map = serializer.serialize_map(None)?;
        for s in 0..p.n_states {
            for h in 0..p.horizon {
                let key = format!("{s},{h}");
                let slot = h * p.n_states + s;
                match &p.table {
                    Table::Deterministic(t) if t[slot] != UNDEFINED => map.serialize_entry(&key, &t[slot])?,
                    Table::Stochastic(t) if !t[slot].is_empty() => map.serialize_entry(&key, &t[slot])?,
                    _ => {}
                }
            }
        }
        map.end()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileIn {
    #[serde(default)]
    mdp_ref: Option<String>,
    policies: Vec<PolicyIn>,
    meta: MetaIn,
}

#[derive(Deserialize)]
struct MetaIn {
    #[serde(default)]
    generator: String,
    #[serde(default)]
    seed: Option<u64>,
    states: usize,
    actions: usize,
    horizon: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyIn {
    id: String,
    kind: PolicyKind,
    table: TableIn,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EntryIn {
    Action(u32),
    Probs(Vec<f64>),
}

struct TableIn(Vec<((usize, usize), EntryIn)>);

impl<'de> Deserialize<'de> for TableIn {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = TableIn;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from \"state,step\" to an action index or a distribution")
            }
            fn visit_map<M: MapAccess<'de>>(self, mut access: M) -> std::result::Result<TableIn, M::Error> {
                let mut out = Vec::with_capacity(access.size_hint().unwrap_or(0));
                while let Some(key) = access.next_key::<std::borrow::Cow<'de, str>>()? {
                    let parsed = key
                        .split_once(',')
                        .and_then(|(s, h)| Some((s.trim().parse().ok()?, h.trim().parse().ok()?)))
                        .ok_or_else(|| serde::de::Error::custom(format!("bad table key {key:?}, expected \"s,h\"")))?;
                    out.push((parsed, access.next_value()?));
                }
                Ok(TableIn(out))
            }
        }
        deserializer.deserialize_map(V)
    }
}

/// Writes the canonical JSON form of a policy set. Two saves of the same set are byte-identical.
pub fn write_policy_set<W: Write>(set: &PolicySet, writer: W) -> Result<()> {
    let (states, actions, horizon) =
        set.policies.first().map_or((0, 0, 0), |p| (p.n_states, p.n_actions, p.horizon));
    let file = FileOut {
        mdp_ref: &set.mdp_ref,
        policies: set
            .policies
            .iter()
            .map(|p| PolicyOut { id: &p.id, kind: p.kind(), table: TableOut(p) })
            .collect(),
        meta: MetaOut {
            generator: &set.source.generator,
            seed: set.source.seed,
            states,
            actions,
            horizon,
            count: set.len(),
        },
    };
    serde_json::to_writer(writer, &file).map_err(|e| Error::invalid("policy set", e.to_string()))
}

pub fn save_policy_set(set: &PolicySet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_policy_set(set, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_policy_set(text: &str) -> Result<PolicySet> {
    let file: FileIn = from_json_str(text)?;
    let (n_s, n_a, h) = (file.meta.states, file.meta.actions, file.meta.horizon);
    let mut policies = Vec::with_capacity(file.policies.len());
    for (i, raw) in file.policies.into_iter().enumerate() {
        let schema = |key: Option<(usize, usize)>, message: String| {
            let pointer = match key {
                Some((s, step)) => format!("/policies/{i}/table/{s},{step}"),
                None => format!("/policies/{i}"),
            };
            Error::Schema { pointer, message }
        };
        let mut det = vec![None; n_s * h];
        let mut sto = vec![Vec::new(); n_s * h];
        for ((s, step), entry) in raw.table.0 {
            if s >= n_s || step >= h {
                return Err(schema(Some((s, step)), format!("outside |S| = {n_s}, H = {h}")));
            }
            let slot = step * n_s + s;
            match (raw.kind, entry) {
                (PolicyKind::Deterministic, EntryIn::Action(a)) => det[slot] = Some(a as usize),
                (PolicyKind::Stochastic, EntryIn::Probs(p)) => sto[slot] = p,
                (PolicyKind::Deterministic, EntryIn::Probs(_)) => {
                    return Err(schema(Some((s, step)), "deterministic entries are action indices".into()))
                }
                (PolicyKind::Stochastic, EntryIn::Action(_)) => {
                    return Err(schema(Some((s, step)), "stochastic entries are probability lists".into()))
                }
            }
        }
        let policy = match raw.kind {
            PolicyKind::Deterministic => Policy::deterministic_partial(raw.id, n_s, n_a, h, &det),
            PolicyKind::Stochastic => Policy::stochastic(raw.id, n_s, n_a, h, sto),
        }
        .map_err(|e| schema(None, e.to_string()))?;
        policies.push(policy);
    }
    let source = PolicySource { generator: file.meta.generator, seed: file.meta.seed };
    let mut set = PolicySet::new(policies, source).map_err(|e| Error::Schema {
        pointer: "/policies".into(),
        message: e.to_string(),
    })?;
    set.mdp_ref = file.mdp_ref;
    Ok(set)
}

pub fn load_policy_set(path: &Path) -> Result<PolicySet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_policy_set(&text)
}
