#![allow(dead_code)]

use pmean::envs::{random_mdp, RandomMdpSpec};
use pmean::mdp::FiniteMdp;
use pmean::policy::Policy;
use pmean::seeding;
use rand::Rng;

/// Every trajectory as `(probability, return vector)`, found by walking the tree of
/// (state, action, successor) choices.
pub fn enumerate_trajectories(mdp: &FiniteMdp, policy: &Policy) -> Vec<(f64, Vec<f64>)> {
    let mut out = Vec::new();
    let start = vec![0.0; mdp.n_rewards()];
    walk(mdp, policy, mdp.initial_state(), 0, 1.0, start, &mut out);
    out
}

fn walk(mdp: &FiniteMdp, policy: &Policy, s: usize, h: usize, prob: f64, g: Vec<f64>, out: &mut Vec<(f64, Vec<f64>)>) {
    let dist = policy.action(s, h).expect("complete policy");
    for (a, pa) in dist.support() {
        let mut g2 = g.clone();
        for (i, gi) in g2.iter_mut().enumerate() {
            *gi += mdp.reward(i, s, a);
        }
        if h + 1 == mdp.horizon() {
            out.push((prob * pa, g2));
            continue;
        }
        for &(t, pt) in mdp.successors(s, a) {
            walk(mdp, policy, t as usize, h + 1, prob * pa * pt, g2.clone(), out);
        }
    }
}

/// A random MDP with sizes drawn from the given upper limits.
pub fn small_mdp(seed: u64, max_s: usize, max_a: usize, max_n: usize, max_h: usize, kappa: f64) -> FiniteMdp {
    let mut rng = seeding::rng(seed, 7);
    let spec = RandomMdpSpec {
        states: rng.random_range(1..=max_s),
        actions: rng.random_range(1..=max_a),
        stakeholders: rng.random_range(1..=max_n),
        horizon: rng.random_range(1..=max_h),
        kappa,
        seed,
    };
    random_mdp(&spec).unwrap()
}

/// A random fully stochastic policy.
pub fn stochastic_policy(mdp: &FiniteMdp, id: &str, seed: u64) -> Policy {
    let mut rng = seeding::rng(seed, 9);
    let slots = mdp.n_states() * mdp.horizon();
    let probs = (0..slots)
        .map(|_| {
            let w: Vec<f64> = (0..mdp.n_actions()).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|x| x / total).collect()
        })
        .collect();
    Policy::stochastic(id, mdp.n_states(), mdp.n_actions(), mdp.horizon(), probs).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs())
}
