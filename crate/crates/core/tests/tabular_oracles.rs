use std::sync::Arc;

use contrl::env::{Action, Environment, TabularEnv};
use contrl::mdp::{
    generate_random_mdp, optimal_action_values, solve_exact, stationary_distribution, DiscreteMDP, TabularPolicy,
};
use contrl::rng;
use proptest::prelude::*;

fn policy_mean(mdp: &DiscreteMDP, pi: &TabularPolicy, s: usize, f: impl Fn(usize) -> f64) -> f64 {
    (0..mdp.num_actions()).map(|a| pi.prob(s, a) * f(a)).sum()
}

/// Plain iterative policy evaluation, independent of the linear solve.
fn iterate_values(mdp: &DiscreteMDP, pi: &TabularPolicy, gamma: f64) -> Vec<f64> {
    let n = mdp.num_states();
    let mut v = vec![0.0; n];
    loop {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                policy_mean(mdp, pi, s, |a| {
                    let row = mdp.transition_row(s, a);
                    mdp.reward(s, a) + gamma * row.iter().zip(&v).map(|(p, x)| p * x).sum::<f64>()
                })
            })
            .collect();
        let change = next.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        if change < 1e-13 {
            return v;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_solve_matches_iteration(seed in 0u64..10_000, n in 2usize..8, m in 1usize..4, gamma in 0.0f64..0.95) {
        let mdp = generate_random_mdp(seed, n, m, 1.0).unwrap();
        let pi = TabularPolicy::random(seed ^ 0xabc, n, m, 0.05);
        let exact = solve_exact(&mdp, &pi, gamma).unwrap();
        let iter = iterate_values(&mdp, &pi, gamma);
        for (a, b) in exact.v_pi.iter().zip(&iter) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn stationary_distribution_is_invariant(seed in 0u64..10_000, n in 2usize..9, m in 1usize..4) {
        let mdp = generate_random_mdp(seed, n, m, 1.0).unwrap();
        let pi = TabularPolicy::random(seed + 1, n, m, 0.0);
        let d = stationary_distribution(&mdp, &pi).unwrap();
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(d.iter().all(|x| *x >= 0.0));
        for j in 0..n {
            let flow: f64 = (0..n)
                .map(|s| d[s] * policy_mean(&mdp, &pi, s, |a| mdp.transition_row(s, a)[j]))
                .sum();
            prop_assert!((flow - d[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn reward_shift_moves_values_by_constant(seed in 0u64..10_000, c in -50.0f64..50.0, gamma in 0.5f64..0.99) {
        let mdp = generate_random_mdp(seed, 5, 2, 1.0).unwrap();
        let shifted = DiscreteMDP::new(
            5,
            2,
            (0..5).map(|s| (0..2).map(|a| mdp.transition_row(s, a).to_vec()).collect()).collect(),
            (0..5).map(|s| (0..2).map(|a| mdp.reward(s, a) + c).collect()).collect(),
            mdp.initial_dist().to_vec(),
        )
        .unwrap();
        let pi = TabularPolicy::uniform(5, 2);
        let a = solve_exact(&mdp, &pi, gamma).unwrap();
        let b = solve_exact(&shifted, &pi, gamma).unwrap();
        let k = c / (1.0 - gamma);
        for (x, y) in a.v_pi.iter().zip(&b.v_pi) {
            prop_assert!((y - x - k).abs() < 1e-8 * (1.0 + k.abs()));
        }
        prop_assert!((b.reward_rate - a.reward_rate - c).abs() < 1e-10);
    }
}

#[test]
fn reward_rate_matches_simulation() {
    let mdp = generate_random_mdp(4, 6, 3, 1.0).unwrap();
    let pi = TabularPolicy::random(5, 6, 3, 0.1);
    let exact = solve_exact(&mdp, &pi, 0.9).unwrap().reward_rate;
    let mut env = TabularEnv::new(Arc::new(mdp), 0.0, rng::seeded(6)).unwrap();
    let mut r = rng::seeded(7);
    let steps = 400_000;
    let mut total = 0.0;
    for _ in 0..steps {
        let s = env.state();
        let a = contrl::env::sample_categorical(pi.row(s), &mut r);
        total += env.step(&Action::Discrete(a)).unwrap().reward;
    }
    // |r| ≤ 1 and the chain mixes fast; 0.01 is several standard errors.
    let rate = total / steps as f64;
    assert!((rate - exact).abs() < 0.01, "{rate} vs {exact}");
}

#[test]
fn value_iteration_satisfies_optimality_equation() {
    let mdp = generate_random_mdp(12, 7, 3, 1.0).unwrap();
    let gamma = 0.9;
    let q = optimal_action_values(&mdp, gamma, 1e-12).unwrap();
    for s in 0..7 {
        for a in 0..3 {
            let backup = mdp.reward(s, a)
                + gamma
                    * mdp
                        .transition_row(s, a)
                        .iter()
                        .zip(&q)
                        .map(|(p, row)| p * row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                        .sum::<f64>();
            assert!((backup - q[s][a]).abs() < 1e-9);
        }
    }
    // The greedy policy's exact values match the optimal state values.
    let greedy = contrl::mdp::greedy_actions(&q);
    let pi = TabularPolicy::deterministic(&greedy, 3).unwrap();
    let v = solve_exact(&mdp, &pi, gamma).unwrap().v_pi;
    for s in 0..7 {
        let best = q[s].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((v[s] - best).abs() < 1e-8);
    }
}
