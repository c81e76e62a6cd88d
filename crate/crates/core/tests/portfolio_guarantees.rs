mod common;

use std::sync::Arc;

use common::small_mdp;
use pmean::envs::random_policy_set;
use pmean::oracle::{warm_start_gap_bound, Aggregation, Evaluator, Oracle};
use pmean::portfolio::{approximation_factor, budget_constrained_portfolio, p_mean_portfolio, GridSpec};
use pmean::seeding;
use pmean::PValue;
use rand::Rng;

fn evaluator(seed: u64, kappa: f64, policies: usize) -> Evaluator {
    let mdp = small_mdp(seed, 4, 3, 4, 3, kappa);
    let set = random_policy_set(&mdp, policies, seed).unwrap();
    Evaluator::new(Arc::new(mdp), Arc::new(set), Aggregation::Ser).unwrap()
}

#[test]
fn portfolios_are_alpha_approximate() {
    let grid = GridSpec { points: 400, low: -200.0 };
    for seed in 0..8 {
        let eval = evaluator(seed, 50.0, 40);
        let kappa = eval.mdp().condition_number();
        for alpha in [0.5, 0.8, 0.95] {
            let portfolio = p_mean_portfolio(&mut Oracle::new(&eval), alpha).unwrap();
            assert!(!portfolio.is_degraded());
            for search in &portfolio.searches {
                assert!(search.invariant_violations(1e-12).is_empty(), "{:?}", search.invariant_violations(1e-12));
            }
            let report = approximation_factor(&portfolio, &mut Oracle::new(&eval), &grid).unwrap();
            assert!(report.q_min >= alpha - 1e-9, "seed {seed}, α = {alpha}: q = {}", report.q_min);
            let bound = 2.0 * kappa.ln() / (1.0 / alpha).ln() + 2.0;
            assert!(portfolio.size() as f64 <= bound, "size {} > {bound}", portfolio.size());
        }
    }
}

#[test]
fn budget_spends_exactly_k_calls() {
    let eval = evaluator(42, 100.0, 60);
    let grid = GridSpec { points: 300, low: -100.0 };
    for k in 1..=10 {
        let portfolio = budget_constrained_portfolio(&mut Oracle::new(&eval), k, -100.0).unwrap();
        assert_eq!(portfolio.oracle_calls, k as u64);
        assert!(portfolio.size() <= k);
        let report = approximation_factor(&portfolio, &mut Oracle::new(&eval), &grid).unwrap();
        assert!(report.q_min > 0.0 && report.q_min <= 1.0);
    }
}

#[test]
fn warm_start_gap_is_bounded() {
    for seed in 0..4 {
        let eval = evaluator(seed + 50, 20.0, 30);
        let mut oracle = Oracle::new(&eval);
        let mut rng = seeding::rng(seed, 0);
        for _ in 0..200 {
            let a: f64 = rng.random_range(-30.0..1.0);
            let b: f64 = rng.random_range(-30.0..1.0);
            let (p, q) = if a <= b { (a, b) } else { (b, a) };
            let best_p = oracle.solve(PValue::Finite(p)).unwrap();
            let at_q = oracle.evaluate_index(best_p.best_index, PValue::Finite(q)).unwrap().value;
            let optimum_q = oracle.solve(PValue::Finite(q)).unwrap().best_value;
            let bound = warm_start_gap_bound(p, q, eval.mdp()).unwrap();
            assert!((optimum_q - at_q).abs() <= bound + 1e-12);
        }
    }
}
