//! Tabular MDPs and exact solvers.
//!
//! Everything here is a pure value-level computation. These routines are the
//! ground truth that the learning agents are checked against: discounted
//! policy values by a direct linear solve, stationary distributions, exact
//! reward rates, and optimal action values by value iteration.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const PROB_TOL: f64 = 1e-12;

/// Default uniform mixing weight used by [`generate_random_mdp`].
pub const DEFAULT_MIX: f64 = 0.05;

/// Finite MDP with expected rewards `reward[s][a]` and transition
/// probabilities `transition[s][a][s']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMdp")]
pub struct DiscreteMDP {
    num_states: usize,
    num_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    initial_dist: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    initial_dist: Vec<f64>,
}

impl TryFrom<RawMdp> for DiscreteMDP {
    type Error = Error;

    fn try_from(raw: RawMdp) -> Result<Self> {
        DiscreteMDP::new(
            raw.num_states,
            raw.num_actions,
            raw.transition,
            raw.reward,
            raw.initial_dist,
        )
    }
}

fn check_distribution(row: &[f64], what: impl Fn() -> String) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidMdp(format!("{} has a negative or non-finite entry", what())));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidMdp(format!("{} sums to {sum}", what())));
    }
    Ok(())
}

impl DiscreteMDP {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        if transition.len() != num_states || reward.len() != num_states {
            return Err(Error::InvalidMdp("state dimension mismatch".into()));
        }
        for s in 0..num_states {
            if transition[s].len() != num_actions || reward[s].len() != num_actions {
                return Err(Error::InvalidMdp(format!("action dimension mismatch at state {s}")));
            }
            for a in 0..num_actions {
                if transition[s][a].len() != num_states {
                    return Err(Error::InvalidMdp(format!("row p[{s}][{a}] has wrong length")));
                }
                check_distribution(&transition[s][a], || format!("p[{s}][{a}]"))?;
                if !reward[s][a].is_finite() {
                    return Err(Error::InvalidMdp(format!("r[{s}][{a}] is not finite")));
                }
            }
        }
        if initial_dist.len() != num_states {
            return Err(Error::InvalidMdp("initial_dist has wrong length".into()));
        }
        check_distribution(&initial_dist, || "initial_dist".to_string())?;
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            initial_dist,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Row `p[s][a][·]`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serializes")
    }

    /// Policy-averaged transition matrix `P_π` and reward vector `r_π`.
    pub fn policy_kernel(&self, policy: &TabularPolicy) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_policy(policy)?;
        let n = self.num_states;
        let mut p = DMatrix::zeros(n, n);
        let mut r = DVector::zeros(n);
        for s in 0..n {
            for a in 0..self.num_actions {
                let w = policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                r[s] += w * self.reward[s][a];
                for (s2, prob) in self.transition[s][a].iter().enumerate() {
                    p[(s, s2)] += w * prob;
                }
            }
        }
        Ok((p, r))
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(Error::InvalidPolicy(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.num_states(),
                policy.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    /// True when the states outside the transient set form a single closed
    /// communicating class.
    ///
    /// Builds the graph with an edge `s -> s'` whenever some action reaches
    /// `s'` with positive probability, condenses it into strongly connected
    /// components, and requires exactly one sink component. States outside
    /// that component are transient.
    pub fn is_weakly_communicating(&self) -> bool {
        let n = self.num_states;
        let mut graph = DiGraph::<(), ()>::with_capacity(n, n * n);
        let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
        for s in 0..n {
            for s2 in 0..n {
                if (0..self.num_actions).any(|a| self.transition[s][a][s2] > 0.0) {
                    graph.add_edge(nodes[s], nodes[s2], ());
                }
            }
        }
        let components = tarjan_scc(&graph);
        let mut component_of = vec![0usize; n];
        for (c, members) in components.iter().enumerate() {
            for node in members {
                component_of[node.index()] = c;
            }
        }
        let sinks = components
            .iter()
            .enumerate()
            .filter(|(c, members)| {
                members.iter().all(|node| {
                    graph
                        .neighbors(*node)
                        .all(|next| component_of[next.index()] == *c)
                })
            })
            .count();
        sinks == 1
    }
}

/// Stochastic tabular policy `π[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.is_empty() || probs[0].is_empty() {
            return Err(Error::InvalidPolicy("empty policy".into()));
        }
        let width = probs[0].len();
        for (s, row) in probs.iter().enumerate() {
            if row.len() != width {
                return Err(Error::InvalidPolicy(format!("row {s} has wrong length")));
            }
            check_distribution(row, || format!("π[{s}]"))
                .map_err(|e| Error::InvalidPolicy(e.to_string()))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / num_actions as f64; num_actions]; num_states],
        }
    }

    /// Deterministic policy picking `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        let probs = actions
            .iter()
            .map(|&a| {
                if a >= num_actions {
                    return Err(Error::IndexOutOfRange {
                        context: "deterministic policy",
                        index: a,
                        size: num_actions,
                    });
                }
                let mut row = vec![0.0; num_actions];
                row[a] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { probs })
    }

    /// Random policy with every probability at least `floor / |A|`.
    pub fn random(seed: u64, num_states: usize, num_actions: usize, floor: f64) -> Self {
        let mut rng = rng::seeded(seed);
        let probs = (0..num_states)
            .map(|_| {
                let raw: Vec<f64> = (0..num_actions).map(|_| rng.random::<f64>()).collect();
                let total: f64 = raw.iter().sum();
                let mut row: Vec<f64> = raw
                    .iter()
                    .map(|x| (1.0 - floor) * x / total + floor / num_actions as f64)
                    .collect();
                renormalize(&mut row);
                row
            })
            .collect();
        Self { probs }
    }

    pub fn num_states(&self) -> usize {
        self.probs.len()
    }

    pub fn num_actions(&self) -> usize {
        self.probs[0].len()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }
}

/// Fixes rounding so the row sums to one within a couple of ulps.
fn renormalize(row: &mut [f64]) {
    let total: f64 = row.iter().sum();
    for x in row.iter_mut() {
        *x /= total;
    }
    let residual = 1.0 - row.iter().sum::<f64>();
    if let Some(max) = row
        .iter_mut()
        .max_by(|a, b| a.partial_cmp(b).expect("finite probabilities"))
    {
        *max += residual;
    }
}

/// Exact quantities for one (MDP, policy, discount) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    pub v_pi: Vec<f64>,
    pub d_pi: Vec<f64>,
    pub reward_rate: f64,
    pub gamma: f64,
}

impl ExactSolution {
    /// `d_π·v_π`, the state-independent offset of the discounted values.
    pub fn offset(&self) -> f64 {
        dot(&self.d_pi, &self.v_pi)
    }
}

pub fn solve_exact(mdp: &DiscreteMDP, policy: &TabularPolicy, gamma: f64) -> Result<ExactSolution> {
    let v_pi = exact_discounted_values(mdp, policy, gamma)?;
    let d_pi = stationary_distribution(mdp, policy)?;
    let (_, r_pi) = mdp.policy_kernel(policy)?;
    let reward_rate = d_pi.iter().zip(r_pi.iter()).map(|(d, r)| d * r).sum();
    Ok(ExactSolution {
        v_pi,
        d_pi,
        reward_rate,
        gamma,
    })
}

/// Solves `(I - γ P_π) v = r_π`.
pub fn exact_discounted_values(mdp: &DiscreteMDP, policy: &TabularPolicy, gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidDiscount(gamma));
    }
    let (p, r) = mdp.policy_kernel(policy)?;
    let n = mdp.num_states();
    let a = DMatrix::identity(n, n) - p * gamma;
    let v = a
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::InvalidMdp("singular Bellman system".into()))?;
    Ok(v.iter().copied().collect())
}

/// Stationary distribution of the policy-induced chain.
///
/// Solves `d(P_π - I) = 0` with one balance equation replaced by `Σd = 1`.
/// Chains with more than one recurrent class make the system singular or
/// leave a residual, and are reported as errors.
pub fn stationary_distribution(mdp: &DiscreteMDP, policy: &TabularPolicy) -> Result<Vec<f64>> {
    let (p, _) = mdp.policy_kernel(policy)?;
    stationary_of_matrix(&p)
}

pub(crate) fn stationary_of_matrix(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let d = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Stationary("singular system (multiple recurrent classes?)".into()))?;
    let residual = (d.transpose() * p - d.transpose()).amax();
    if !residual.is_finite() || residual > 1e-10 || d.iter().any(|x| *x < -1e-10) {
        return Err(Error::Stationary(format!(
            "no unique stationary distribution (residual {residual:e})"
        )));
    }
    Ok(d.iter().map(|x| x.max(0.0)).collect())
}

/// Long-run average reward `d_π·r_π`.
pub fn reward_rate_exact(mdp: &DiscreteMDP, policy: &TabularPolicy) -> Result<f64> {
    let d = stationary_distribution(mdp, policy)?;
    let (_, r) = mdp.policy_kernel(policy)?;
    Ok(d.iter().zip(r.iter()).map(|(d, r)| d * r).sum())
}

/// Random MDP whose every transition row carries a uniform component of
/// weight `mix`, so every policy induces an ergodic chain.
pub fn generate_random_mdp_mixed(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    reward_span: f64,
    mix: f64,
) -> Result<DiscreteMDP> {
    if num_states < 2 || num_actions < 1 {
        return Err(Error::InvalidParameter(
            "random MDP needs at least 2 states and 1 action".into(),
        ));
    }
    if !(0.0..=1.0).contains(&mix) || mix == 0.0 {
        return Err(Error::InvalidParameter(format!("mixing weight {mix} outside (0, 1]")));
    }
    let mut rng = rng::seeded(seed);
    let uniform = 1.0 / num_states as f64;
    let mut transition = Vec::with_capacity(num_states);
    let mut reward = Vec::with_capacity(num_states);
    for _ in 0..num_states {
        let mut rows = Vec::with_capacity(num_actions);
        let mut rewards = Vec::with_capacity(num_actions);
        for _ in 0..num_actions {
            let raw: Vec<f64> = (0..num_states).map(|_| rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw
                .iter()
                .map(|x| (1.0 - mix) * x / total + mix * uniform)
                .collect();
            renormalize(&mut row);
            rows.push(row);
            rewards.push(rng.random_range(-reward_span..=reward_span));
        }
        transition.push(rows);
        reward.push(rewards);
    }
    DiscreteMDP::new(
        num_states,
        num_actions,
        transition,
        reward,
        vec![uniform; num_states],
    )
}

pub fn generate_random_mdp(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    reward_span: f64,
) -> Result<DiscreteMDP> {
    generate_random_mdp_mixed(seed, num_states, num_actions, reward_span, DEFAULT_MIX)
}

/// Optimal action values by value iteration, iterated until the max-norm
/// change drops below `tol`.
pub fn optimal_action_values(mdp: &DiscreteMDP, gamma: f64, tol: f64) -> Result<Vec<Vec<f64>>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidDiscount(gamma));
    }
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let mut v = vec![0.0; n];
    let mut q = vec![vec![0.0; m]; n];
    loop {
        let mut change: f64 = 0.0;
        for s in 0..n {
            for a in 0..m {
                q[s][a] = mdp.reward(s, a) + gamma * dot(mdp.transition_row(s, a), &v);
            }
        }
        for s in 0..n {
            let best = q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            change = change.max((best - v[s]).abs());
            v[s] = best;
        }
        if change < tol {
            return Ok(q);
        }
    }
}

/// Greedy action per row, lowest index on ties.
pub fn greedy_actions(q: &[Vec<f64>]) -> Vec<usize> {
    q.iter().map(|row| argmax(row)).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
