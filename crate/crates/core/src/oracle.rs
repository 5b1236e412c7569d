//! Self-checks against independent oracles: exact linear algebra, finite
//! differences, Monte Carlo, and closed-form sampling statistics.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::agents::{
    ddpg_update, gae, log_softmax, ppo_policy_gradient, sac_discrete_target, softmax,
    td3_update, warmup_action, AgentConfig, Algorithm, DeterministicNets, PpoBatch, PpoPolicy, Preset, Td0Agent,
    Transition, Agent as _,
};
use crate::centering::{CenteringConfig, RewardRateEstimator};
use crate::env::{sample_categorical, Action, Environment, Observation, Space, TabularEnv};
use crate::error::{Error, Result};
use crate::mdp::{generate_random_mdp, solve_exact, TabularPolicy};
use crate::nn::{Activation, MlpSpec, Network};
use crate::rng::{self, seeded, Stream};
use crate::wrappers::random_reset_wrap;

/// Result of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Laurent,
    Td0Convergence,
    Gradients,
    Wrappers,
}

impl Check {
    pub const ALL: [Check; 4] = [Check::Laurent, Check::Td0Convergence, Check::Gradients, Check::Wrappers];

    pub fn name(self) -> &'static str {
        match self {
            Check::Laurent => "laurent",
            Check::Td0Convergence => "td0-convergence",
            Check::Gradients => "gradients",
            Check::Wrappers => "wrappers",
        }
    }

    pub fn run(self) -> Result<Vec<CheckOutcome>> {
        match self {
            Check::Laurent => Ok(vec![laurent_identity(50)?]),
            Check::Td0Convergence => Ok(vec![td0_convergence(&Td0Settings::default())?]),
            Check::Gradients => gradient_checks(),
            Check::Wrappers => wrapper_checks(),
        }
    }
}

impl FromStr for Check {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown check `{s}`")))
    }
}

/// `|d_π·v_π − r(π)/(1−γ)| < 1e−6/(1−γ)` on random (MDP, policy, γ) triples.
pub fn laurent_identity(triples: u64) -> Result<CheckOutcome> {
    let gammas = [0.9, 0.99, 0.999];
    let mut worst: f64 = 0.0;
    for i in 0..triples {
        let mut rng = seeded(0x1a0e_0000 + i);
        let s = rng.random_range(2..=12);
        let a = rng.random_range(1..=4);
        let gamma = gammas[(i % 3) as usize];
        let mdp = generate_random_mdp(rng.random(), s, a, 1.0)?;
        let policy = TabularPolicy::random(rng.random(), s, a, 0.0);
        let sol = solve_exact(&mdp, &policy, gamma)?;
        let err = (sol.offset() - sol.reward_rate / (1.0 - gamma)).abs() * (1.0 - gamma);
        worst = worst.max(err);
    }
    Ok(CheckOutcome::new(
        "laurent identity",
        worst < 1e-6,
        format!("{triples} triples, max (1-γ)·|d·v - r/(1-γ)| = {worst:.3e} (limit 1e-6)"),
    ))
}

#[derive(Debug, Clone)]
pub struct Td0Settings {
    pub instances: u64,
    pub steps: u64,
    pub gamma: f64,
    pub eta: f64,
    pub alpha: f64,
    pub alpha_decay: f64,
    /// Error limit as a fraction of `span(v_π)`.
    pub tolerance: f64,
    pub required: u64,
}

impl Default for Td0Settings {
    fn default() -> Self {
        Self {
            instances: 20,
            steps: 500_000,
            gamma: 0.99,
            eta: 0.1,
            alpha: 0.5,
            alpha_decay: 1e4,
            tolerance: 0.05,
            required: 18,
        }
    }
}

/// Per-instance TD(0) error relative to `span(v_π)`.
pub fn td0_instance_error(index: u64, settings: &Td0Settings) -> Result<f64> {
    let states = 4 + (index % 7) as usize;
    let actions = 2 + (index % 2) as usize;
    let mdp = std::sync::Arc::new(generate_random_mdp(0x7d00 + index, states, actions, 1.0)?);
    let policy = TabularPolicy::random(0x7d80 + index, states, actions, 0.05);
    let exact = solve_exact(&mdp, &policy, settings.gamma)?;

    let mut config = AgentConfig::preset(Algorithm::Td0, Preset::Desk);
    config.gamma = settings.gamma;
    config.alpha = settings.alpha;
    config.alpha_decay = Some(settings.alpha_decay);
    config.behavior_policy = Some((0..states).map(|s| policy.row(s).to_vec()).collect());
    let centering = CenteringConfig::td_based(CenteringConfig::default().beta).with_eta(settings.eta);
    let mut agent = Td0Agent::new(config, RewardRateEstimator::new(&centering)?, states, actions)?;
    let mut env = TabularEnv::new(mdp, 0.0, rng::stream(index, Stream::EnvDynamics))?;
    let mut rng = rng::stream(index, Stream::Exploration);
    let mut obs = env.observation();
    for _ in 0..settings.steps {
        let action = Action::Discrete(sample_categorical(policy.row(obs.index().unwrap_or(0)), &mut rng));
        let step = env.step(&action)?;
        agent.observe(Transition {
            state: std::mem::replace(&mut obs, step.observation.clone()),
            action,
            reward: step.reward,
            next_state: step.observation,
        })?;
    }
    let total: f64 = exact.v_pi.iter().sum();
    let shift = settings.eta / (1.0 - settings.gamma + settings.eta * states as f64) * total;
    let err = agent
        .values()
        .iter()
        .zip(&exact.v_pi)
        .map(|(v, t)| (v - (t - shift)).abs())
        .fold(0.0, f64::max);
    let span = exact.v_pi.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - exact.v_pi.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(err / span)
}

/// Centered TD(0) reaches the shifted fixed point on random MDPs.
pub fn td0_convergence(settings: &Td0Settings) -> Result<CheckOutcome> {
    use rayon::prelude::*;
    let errors: Vec<f64> = (0..settings.instances)
        .into_par_iter()
        .map(|i| td0_instance_error(i, settings))
        .collect::<Result<_>>()?;
    let ok = errors.iter().filter(|e| **e < settings.tolerance).count() as u64;
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    Ok(CheckOutcome::new(
        "td0 centered convergence",
        ok >= settings.required,
        format!(
            "{ok}/{} instances within {}·span (need {}), worst {worst:.4}",
            settings.instances, settings.tolerance, settings.required
        ),
    ))
}

/// Max relative error `|a − n| / max(|a|, |n|, 1e−6)` between backprop and
/// central differences (h = 1e−5) of `<net(x), seed>`.
pub fn mlp_gradient_error(activation: Activation, draws: u64) -> Result<f64> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let mut rng = seeded(0x9d00 + i + 1000 * (activation == Activation::Tanh) as u64);
        let input_dim = rng.random_range(1..=6);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=8)).collect();
        let output_dim = rng.random_range(1..=4);
        let spec = MlpSpec::with_hidden(input_dim, &hidden, output_dim, activation)?;
        let params: Vec<f64> = (0..spec.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let seed: Vec<f64> = (0..output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &[f64]| -> Result<f64> { Ok(spec.forward(p, &x)?.iter().zip(&seed).map(|(o, s)| o * s).sum()) };
        let analytic = spec.gradient(&params, &seed, &x)?;
        let mut p = params.clone();
        for k in 0..params.len() {
            p[k] = params[k] + h;
            let up = loss(&p)?;
            p[k] = params[k] - h;
            let down = loss(&p)?;
            p[k] = params[k];
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

/// GAE at λ = 0 is the per-step TD error, bit for bit.
pub fn gae_lambda_zero() -> CheckOutcome {
    let mut rng = seeded(0x6ae);
    let mut exact = true;
    for n in 1..50 {
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        exact &= gae(&d, rng.random_range(0.0..1.0), 0.0) == d;
    }
    CheckOutcome::new("gae lambda=0", exact, "49 random sequences, exact equality".into())
}

/// With `π_old = π` the clipped surrogate gradient is the vanilla policy
/// gradient `−(1/n) Σ A_i ∇ log π(a_i|s_i)`, computed here by hand.
pub fn ppo_unit_ratio_error() -> Result<f64> {
    let mut rng = seeded(0x990);
    let mut worst: f64 = 0.0;
    for policy in [PpoPolicy::Categorical(3), PpoPolicy::Gaussian(2)] {
        let outputs = match policy {
            PpoPolicy::Categorical(k) | PpoPolicy::Gaussian(k) => k,
        };
        let gaussian = matches!(policy, PpoPolicy::Gaussian(_));
        let spec = MlpSpec::with_hidden(4, &[6], outputs, Activation::Tanh)?;
        let actor = Network::new(spec.clone(), 1e-3, &mut rng);
        let log_std: Vec<f64> = if gaussian { vec![-0.3, 0.2] } else { vec![] };
        let n = 8;
        let mut batch = PpoBatch::default();
        let mut manual = vec![0.0; spec.num_params()];
        let mut manual_ls = vec![0.0; log_std.len()];
        let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        for adv_i in &adv {
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = spec.forward(&actor.params, &s)?;
            let (action, log_prob, d_out, d_ls) = if gaussian {
                let x: Vec<f64> = (0..outputs).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut lp = 0.0;
                let mut d_out = Vec::new();
                let mut d_ls = Vec::new();
                for k in 0..outputs {
                    let sigma = log_std[k].exp();
                    let z = (x[k] - out[k]) / sigma;
                    lp += -0.5 * z * z - log_std[k] - 0.5 * (2.0 * std::f64::consts::PI).ln();
                    d_out.push(z / sigma);
                    d_ls.push(z * z - 1.0);
                }
                (Action::Continuous(x), lp, d_out, d_ls)
            } else {
                let a = rng.random_range(0..outputs);
                let p = softmax(&out);
                let mut d_out: Vec<f64> = p.iter().map(|v| -v).collect();
                d_out[a] += 1.0;
                (Action::Discrete(a), log_softmax(&out)[a], d_out, vec![])
            };
            let g = spec.gradient(&actor.params, &d_out, &s)?;
            for (m, gk) in manual.iter_mut().zip(g.iter()) {
                *m -= adv_i * gk / n as f64;
            }
            for (m, gk) in manual_ls.iter_mut().zip(&d_ls) {
                *m -= adv_i * gk / n as f64;
            }
            batch.states.push(s.clone());
            batch.next_states.push(s);
            batch.actions.push(action);
            batch.old_log_probs.push(log_prob);
            batch.rewards.push(0.0);
        }
        let idx: Vec<usize> = (0..n).collect();
        let (g, g_ls) = ppo_policy_gradient(&policy, &actor, &log_std, &batch, &idx, &adv, 0.2, 0.0)?;
        for (a, b) in g.iter().chain(&g_ls).zip(manual.iter().chain(&manual_ls)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// TD3 with two identical critics and zero smoothing noise computes the
/// same TD errors and critic step as DDPG with one critic.
pub fn twin_critic_identity() -> Result<bool> {
    let mut config = AgentConfig::preset(Algorithm::Td3, Preset::Desk);
    config.hidden = vec![8, 8];
    config.policy_noise = 0.0;
    let single = DeterministicNets::new(&config, 3, 2, false, &mut seeded(0x7317))?;
    let mut twin = single.clone();
    twin.critics.push(single.critics[0].clone());
    twin.critic_targets.push(single.critic_targets[0].clone());
    let mut rng = seeded(0x7318);
    let mut vec3 = || -> Vec<f64> { (0..3).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let batch: Vec<Transition> = (0..16)
        .map(|i| Transition {
            state: Observation::Vector(vec3()),
            action: Action::Continuous(vec![0.3 - 0.05 * i as f64, 0.1]),
            reward: i as f64 * 0.25 - 1.0,
            next_state: Observation::Vector(vec3()),
        })
        .collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let mut single = single;
    let mut est_a = RewardRateEstimator::new(&CenteringConfig::td_based(0.01))?;
    let mut est_b = est_a.clone();
    let a = ddpg_update(&mut single, &refs, &config, &mut est_a)?;
    let b = td3_update(&mut twin, &refs, &config, &mut est_b, true, &mut seeded(1))?;
    Ok(a.deltas() == b.deltas()
        && single.critics[0].params == twin.critics[0].params
        && twin.critics[0].params == twin.critics[1].params
        && est_a.rbar() == est_b.rbar())
}

/// Exact discrete-SAC expectation target against a Monte Carlo mean;
/// returns `|exact − mc|` in standard errors.
pub fn sac_discrete_mc_z(samples: usize) -> f64 {
    let logits = [0.7, -0.4, 1.1, -1.5];
    let p = softmax(&logits);
    let lp = log_softmax(&logits);
    let q = [0.9, -1.2, 2.0, 0.3];
    let (kappa, reward, gamma) = (0.3, 0.5, 0.99);
    let exact = sac_discrete_target(&p, &lp, &q, kappa, reward, gamma);
    let mut rng = seeded(0x5ac);
    let draws: Vec<f64> = (0..samples)
        .map(|_| {
            let a = sample_categorical(&p, &mut rng);
            reward + gamma * (q[a] - kappa * lp[a])
        })
        .collect();
    let n = samples as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean - exact).abs() / (var / n).sqrt()
}

pub fn gradient_checks() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for act in [Activation::Relu, Activation::Tanh] {
        let e = mlp_gradient_error(act, 20)?;
        out.push(CheckOutcome::new(
            &format!("mlp gradient ({act:?})"),
            e < 1e-4,
            format!("20 draws, max relative error {e:.3e} (limit 1e-4)"),
        ));
    }
    out.push(gae_lambda_zero());
    let e = ppo_unit_ratio_error()?;
    out.push(CheckOutcome::new(
        "ppo unit-ratio gradient",
        e < 1e-8,
        format!("max abs difference {e:.3e} (limit 1e-8)"),
    ));
    out.push(CheckOutcome::new(
        "identical twin critics",
        twin_critic_identity()?,
        "td3 twin step equals ddpg single step bit for bit".into(),
    ));
    let z = sac_discrete_mc_z(100_000);
    out.push(CheckOutcome::new(
        "sac-discrete expectation target",
        z < 3.0,
        format!("1e5 samples, {z:.3} standard errors (limit 3)"),
    ));
    Ok(out)
}

/// Number of resets injected by `random_reset_wrap(p)` in `steps` steps
/// on a tabular base that never resets by itself.
pub fn random_reset_count(p: f64, steps: u64, seed: u64) -> Result<u64> {
    let mdp = std::sync::Arc::new(generate_random_mdp(seed, 5, 2, 1.0)?);
    let base = TabularEnv::new(mdp, 0.0, rng::stream(seed, Stream::EnvDynamics))?;
    let mut env = random_reset_wrap(base, p, rng::wrapper_stream(seed, 0))?;
    let mut rng = rng::stream(seed, Stream::Exploration);
    let mut count = 0;
    for _ in 0..steps {
        let a = env.action_spec().sample(&mut rng);
        count += env.step(&a)?.reset_occurred as u64;
    }
    Ok(count)
}

pub fn wrapper_checks() -> Result<Vec<CheckOutcome>> {
    let (p, n) = (0.001, 1_000_000u64);
    let count = random_reset_count(p, n, 0x5e7)?;
    let expected = n as f64 * p;
    let bound = 3.0 * (n as f64 * p * (1.0 - p)).sqrt();
    let reset = CheckOutcome::new(
        "random reset count",
        (count as f64 - expected).abs() <= bound,
        format!("{count} resets in {n} steps, expected {expected} ± {bound:.1}"),
    );

    let spec = Space::new_box(vec![-2.0, 0.0], vec![2.0, 1.0])?;
    let mut rng = seeded(0x3a7);
    let draws = 1_000_000;
    let mut sum = 0.0;
    for _ in 0..draws {
        let a = warmup_action(&spec, true, &mut rng);
        sum += a.as_slice().and_then(|v| v.last().copied()).unwrap_or(f64::NAN);
    }
    let mean = sum / draws as f64;
    let h: f64 = (1..=1000).map(|k| 1.0 / k as f64).sum::<f64>() / 1000.0;
    let second: f64 = (1..=1000).map(|k| 1.0 / (k * k) as f64).sum::<f64>() / 1000.0;
    let sigma = ((second - h * h) / draws as f64).sqrt();
    let warm = CheckOutcome::new(
        "reset-biased warmup mean",
        (mean - h).abs() <= 3.0 * sigma,
        format!("mean {mean:.6} over {draws} draws, expected {h:.6} ± {:.6}", 3.0 * sigma),
    );
    Ok(vec![reset, warm])
}
