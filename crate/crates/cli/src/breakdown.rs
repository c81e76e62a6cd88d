//! Per-group stakeholder returns for plotting.

use std::fmt::Write as _;
use std::io::Write;

use pmean::envs::DisasterModel;
use pmean::mdp::{expected_return_vector, FiniteMdp};
use pmean::policy::Policy;
use pmean::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub members: Vec<usize>,
}

/// Checks that `groups` partition the stakeholders `0..n`.
pub fn check_partition(groups: &[Group], n: usize) -> Result<()> {
    let bad = |reason: String| Err(Error::invalid("stakeholder groups", reason));
    if groups.is_empty() {
        return bad("at least one group is required".into());
    }
    let mut owner = vec![None; n];
    for g in groups {
        if g.members.is_empty() {
            return bad(format!("group `{}` is empty", g.name));
        }
        for &i in &g.members {
            if i >= n {
                return bad(format!("group `{}` names stakeholder {i}, but there are only {n}", g.name));
            }
            if let Some(other) = owner[i].replace(&g.name) {
                return bad(format!("stakeholder {i} is in both `{other}` and `{}`", g.name));
            }
        }
    }
    if let Some(i) = owner.iter().position(Option::is_none) {
        return bad(format!("stakeholder {i} is in no group"));
    }
    Ok(())
}

/// One group holding every stakeholder.
pub fn single_group(n: usize) -> Vec<Group> {
    vec![Group { name: "all".into(), members: (0..n).collect() }]
}

/// Groups disaster clusters by `income`, `density`, `proximity` or `cluster`.
pub fn disaster_groups(model: &DisasterModel, attribute: &str) -> Result<Vec<Group>> {
    let key = |i: usize| -> Result<String> {
        let c = &model.clusters[i];
        let value = match attribute {
            "income" => serde_json::to_value(c.income_level),
            "density" => serde_json::to_value(c.density),
            "proximity" => serde_json::to_value(c.proximity),
            "cluster" => return Ok(format!("cluster-{}", c.cluster_id)),
            other => return Err(Error::Config(format!("unknown grouping `{other}`"))),
        };
        Ok(value.ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default())
    };
    let mut groups: Vec<Group> = Vec::new();
    for i in 0..model.n_clusters() {
        let name = key(i)?;
        match groups.iter_mut().find(|g| g.name == name) {
            Some(g) => g.members.push(i),
            None => groups.push(Group { name, members: vec![i] }),
        }
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Breakdown {
    pub groups: Vec<String>,
    /// `(policy id, value per group)`.
    pub rows: Vec<(String, Vec<f64>)>,
}

/// Mean expected return of each group's stakeholders under each policy, divided by the
/// baseline policy's group means when one is given.
pub fn breakdown(mdp: &FiniteMdp, policies: &[&Policy], groups: &[Group], baseline: Option<&Policy>) -> Result<Breakdown> {
    check_partition(groups, mdp.n_rewards())?;
    let means = |policy: &Policy| -> Result<Vec<f64>> {
        let g = expected_return_vector(mdp, policy)?;
        Ok(groups.iter().map(|grp| grp.members.iter().map(|&i| g.0[i]).sum::<f64>() / grp.members.len() as f64).collect())
    };
    let scale = baseline.map(means).transpose()?;
    let rows = policies
        .iter()
        .map(|p| {
            let mut values = means(p)?;
            if let Some(base) = &scale {
                values.iter_mut().zip(base).for_each(|(v, b)| *v /= b);
            }
            Ok((p.id().to_string(), values))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Breakdown { groups: groups.iter().map(|g| g.name.clone()).collect(), rows })
}

impl Breakdown {
    /// CSV with a `policy` column followed by one column per group.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::invalid("breakdown", e.to_string());
        w.write_record(std::iter::once("policy").chain(self.groups.iter().map(String::as_str))).map_err(err)?;
        for (id, values) in &self.rows {
            let fields = std::iter::once(id.clone()).chain(values.iter().map(|v| v.to_string()));
            w.write_record(fields).map_err(err)?;
        }
        w.flush().map_err(|e| Error::invalid("breakdown", e.to_string()))
    }

    /// A grouped bar chart: one cluster of bars per group, one bar per policy.
    pub fn to_svg(&self) -> String {
        const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];
        let (width, height, margin) = (720.0, 360.0, 40.0);
        let max = self.rows.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
        let slot = (width - 2.0 * margin) / self.groups.len().max(1) as f64;
        let bar = slot * 0.8 / self.rows.len().max(1) as f64;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
        );
        let base = height - margin;
        let _ = writeln!(svg, "<line x1=\"{margin}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"black\"/>", width - margin);
        for (g, name) in self.groups.iter().enumerate() {
            let x0 = margin + g as f64 * slot + slot * 0.1;
            for (r, (_, values)) in self.rows.iter().enumerate() {
                let h = (height - 2.0 * margin) * values[g] / max;
                let _ = writeln!(
                    svg,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                    x0 + r as f64 * bar,
                    base - h,
                    bar,
                    h,
                    PALETTE[r % PALETTE.len()]
                );
            }
            let _ = writeln!(
                svg,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
                x0 + slot * 0.4,
                base + 16.0,
                escape(name)
            );
        }
        for (r, (id, _)) in self.rows.iter().enumerate() {
            let y = 14.0 + 14.0 * r as f64;
            let _ = writeln!(svg, "<rect x=\"{margin}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{}\"/>", y - 9.0, PALETTE[r % PALETTE.len()]);
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{y:.2}\" font-size=\"11\">{}</text>", margin + 14.0, escape(id));
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
