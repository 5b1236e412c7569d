//! Soft actor-critic for discrete actions. Targets and actor losses take
//! exact expectations over the categorical policy instead of sampling.

use super::{
    discrete, featurize, log_softmax, softmax, vector, Agent, AgentCheckpoint, AgentConfig, ActionMode, Algorithm,
    ReplayBuffer, Schedule, TDErrorBatch, Transition,
};
use crate::centering::{reference_state_value, CenteringMode, ReferenceSet, RewardRateEstimator};
use crate::env::{sample_categorical, Action, Observation, ObservationSpec};
use crate::error::{Error, Result};
use crate::mdp::argmax;
use crate::nn::{target_sync, AdamState, ForwardCache, MlpSpec, Network, ParamVector, SyncMode};
use crate::rng::Rng;
use rand::Rng as _;

/// `r − r̄ + γ Σ_a π(a|s') (min_j q̂_j(s', a) − κ log π(a|s'))`, where
/// `centered_reward` is already `r − r̄`. Actions with zero probability
/// contribute nothing.
pub fn sac_discrete_target(probs: &[f64], log_probs: &[f64], min_q: &[f64], kappa: f64, centered_reward: f64, gamma: f64) -> f64 {
    let soft_value: f64 = probs
        .iter()
        .zip(log_probs)
        .zip(min_q)
        .filter(|((p, _), _)| **p > 0.0)
        .map(|((p, lp), q)| p * (q - kappa * lp))
        .sum();
    centered_reward + gamma * soft_value
}

/// Gradient of `Σ_a π_a (κ log π_a − q_a)` with respect to the logits:
/// `π_b (g_b − Σ_a π_a g_a)` with `g_a = κ log π_a − q_a`.
pub fn sac_discrete_actor_logit_grad(probs: &[f64], log_probs: &[f64], min_q: &[f64], kappa: f64) -> Vec<f64> {
    let g: Vec<f64> = log_probs.iter().zip(min_q).map(|(lp, q)| kappa * lp - q).collect();
    let mean: f64 = probs.iter().zip(&g).map(|(p, gi)| p * gi).sum();
    probs.iter().zip(&g).map(|(p, gi)| p * (gi - mean)).collect()
}

#[derive(Debug, Clone)]
pub struct SacDiscreteNets {
    pub actor: Network,
    pub critics: Vec<Network>,
    pub critic_targets: Vec<ParamVector>,
    pub log_kappa: f64,
    pub kappa_adam: AdamState,
    pub target_entropy: f64,
}

impl SacDiscreteNets {
    pub fn new(config: &AgentConfig, obs_dim: usize, num_actions: usize, init: &mut Rng) -> Result<Self> {
        let spec = MlpSpec::with_hidden(obs_dim, &config.hidden, num_actions, config.activation)?;
        let actor = Network::new(spec.clone(), config.actor_lr, init);
        let critics: Vec<Network> = (0..2).map(|_| Network::new(spec.clone(), config.critic_lr, init)).collect();
        if config.entropy_coef <= 0.0 {
            return Err(Error::InvalidParameter(format!("entropy_coef must be positive, got {}", config.entropy_coef)));
        }
        Ok(Self {
            critic_targets: critics.iter().map(|c| c.params.clone()).collect(),
            actor,
            critics,
            log_kappa: config.entropy_coef.ln(),
            kappa_adam: AdamState::new(1, config.critic_lr),
            target_entropy: config
                .target_entropy
                .unwrap_or(0.89 * (num_actions as f64).ln()),
        })
    }

    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }

    pub fn policy(&self, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let logits = self.actor.forward(state)?;
        Ok((softmax(&logits), log_softmax(&logits)))
    }

    fn min_q(&self, params: [&[f64]; 2], state: &[f64]) -> Result<Vec<f64>> {
        let a = self.critics[0].spec.forward(params[0], state)?;
        let b = self.critics[1].spec.forward(params[1], state)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect())
    }

    fn reference_value(&self, set: &ReferenceSet) -> Result<f64> {
        let mut q = [Vec::with_capacity(set.len()), Vec::with_capacity(set.len())];
        for pair in set.pairs() {
            let a = pair
                .action
                .as_ref()
                .and_then(Action::index)
                .ok_or_else(|| Error::InvalidParameter("reference pairs need discrete actions".into()))?;
            for (j, v) in q.iter_mut().enumerate() {
                v.push(self.critics[j].forward(&pair.state)?[a]);
            }
        }
        reference_state_value(&q[0], Some(&q[1]))
    }
}

/// One discrete SAC step: twin critics regress to [`sac_discrete_target`],
/// the actor descends the expected soft loss, κ moves when `autotune`.
pub fn sac_discrete_update(
    nets: &mut SacDiscreteNets,
    batch: &[&Transition],
    config: &AgentConfig,
    estimator: &mut RewardRateEstimator,
) -> Result<TDErrorBatch> {
    let n = batch.len() as f64;
    let kappa = nets.kappa();
    let mut targets = Vec::with_capacity(batch.len());
    for t in batch {
        let next = vector(&t.next_state)?;
        let (p, lp) = nets.policy(next)?;
        let q = nets.min_q([&nets.critic_targets[0], &nets.critic_targets[1]], next)?;
        targets.push(sac_discrete_target(&p, &lp, &q, kappa, estimator.center_reward(t.reward), config.gamma));
    }
    let mut mean_delta = vec![0.0; batch.len()];
    let mut cache = ForwardCache::default();
    for critic in nets.critics.iter_mut() {
        let outputs = critic.spec.output_dim();
        let mut grad = critic.zero_grad();
        let mut seed = vec![0.0; outputs];
        for ((t, y), m) in batch.iter().zip(&targets).zip(mean_delta.iter_mut()) {
            critic.forward_cached(vector(&t.state)?, &mut cache)?;
            let a = discrete(&t.action)?;
            if a >= outputs {
                return Err(Error::IndexOutOfRange {
                    context: "discrete SAC action",
                    index: a,
                    size: outputs,
                });
            }
            let delta = y - cache.output()[a];
            seed.fill(0.0);
            seed[a] = -delta / n;
            critic.backward(&cache, &seed, &mut grad, None)?;
            *m += 0.5 * delta;
        }
        critic.apply_gradient(&mut grad, config.max_grad_norm)?;
    }
    let deltas = TDErrorBatch::new(mean_delta)?;
    if estimator.mode() == CenteringMode::TdBased {
        estimator.td_based_update(deltas.deltas())?;
    }

    let mut grad = nets.actor.zero_grad();
    let mut entropy_terms = Vec::with_capacity(batch.len());
    for t in batch {
        let s = vector(&t.state)?;
        nets.actor.forward_cached(s, &mut cache)?;
        let p = softmax(cache.output());
        let lp = log_softmax(cache.output());
        let q = nets.min_q([&nets.critics[0].params, &nets.critics[1].params], s)?;
        let seed: Vec<f64> = sac_discrete_actor_logit_grad(&p, &lp, &q, kappa).into_iter().map(|g| g / n).collect();
        nets.actor.backward(&cache, &seed, &mut grad, None)?;
        // Σ_a π_a log π_a, the per-state analogue of log π
        entropy_terms.push(p.iter().zip(&lp).map(|(pi, l)| pi * l).sum::<f64>());
    }
    nets.actor.apply_gradient(&mut grad, config.max_grad_norm)?;

    if config.autotune {
        let mut g = [super::sac_entropy_loss_grad(nets.log_kappa, &entropy_terms, nets.target_entropy)];
        let mut p = [nets.log_kappa];
        nets.kappa_adam.step(&mut p, &mut g, None)?;
        nets.log_kappa = p[0];
    }
    Ok(deltas)
}

#[derive(Debug, Clone)]
pub struct SacDiscreteAgent {
    config: AgentConfig,
    estimator: RewardRateEstimator,
    observation_spec: ObservationSpec,
    num_actions: usize,
    nets: SacDiscreteNets,
    replay: ReplayBuffer,
    rng: Rng,
    schedule: Schedule,
}

impl SacDiscreteAgent {
    pub fn new(
        config: AgentConfig,
        estimator: RewardRateEstimator,
        observation_spec: ObservationSpec,
        num_actions: usize,
        init: &mut Rng,
        replay_rng: Rng,
    ) -> Result<Self> {
        let nets = SacDiscreteNets::new(&config, observation_spec.flat_dim(), num_actions, init)?;
        let replay = ReplayBuffer::new(config.buffer_capacity)?;
        Ok(Self {
            config,
            estimator,
            observation_spec,
            num_actions,
            nets,
            replay,
            rng: replay_rng,
            schedule: Schedule::default(),
        })
    }

    pub fn nets(&self) -> &SacDiscreteNets {
        &self.nets
    }

    pub fn updates(&self) -> u64 {
        self.schedule.updates
    }

    fn learn(&mut self) -> Result<()> {
        let nets = &self.nets;
        super::dqn::refresh_reference(&mut self.estimator, &self.replay, self.config.batch_size, &mut self.rng, |set| {
            nets.reference_value(set)
        })?;
        let batch = self.replay.sample(self.config.batch_size, &mut self.rng)?;
        sac_discrete_update(&mut self.nets, &batch, &self.config, &mut self.estimator)?;
        self.schedule.updates += 1;
        Ok(())
    }
}

impl Agent for SacDiscreteAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::SacDiscrete
    }

    fn select_action(&self, observation: &Observation, mode: ActionMode, rng: &mut Rng) -> Result<Action> {
        if mode == ActionMode::Warmup {
            return Ok(Action::Discrete(rng.random_range(0..self.num_actions)));
        }
        let (p, _) = self.nets.policy(&observation.features(&self.observation_spec))?;
        Ok(Action::Discrete(match mode {
            ActionMode::Greedy => argmax(&p),
            _ => sample_categorical(&p, rng),
        }))
    }

    fn observe(&mut self, transition: Transition) -> Result<()> {
        if self.estimator.mode() == CenteringMode::MovingAverage {
            self.estimator.moving_average_update(transition.reward)?;
        }
        self.replay.push(featurize(transition, &self.observation_spec));
        if self.schedule.tick(&self.config, self.replay.len()) {
            self.learn()?;
        }
        if self.schedule.steps % self.config.target_update_interval == 0 {
            for (tp, c) in self.nets.critic_targets.iter_mut().zip(&self.nets.critics) {
                target_sync(tp, &c.params, SyncMode::Hard)?;
            }
        }
        Ok(())
    }

    fn rbar(&self) -> Option<f64> {
        self.estimator.value()
    }

    fn estimator(&self) -> &RewardRateEstimator {
        &self.estimator
    }

    fn steps(&self) -> u64 {
        self.schedule.steps
    }

    fn checkpoint(&self) -> AgentCheckpoint {
        let mut networks = std::collections::BTreeMap::new();
        networks.insert("actor".to_string(), self.nets.actor.clone());
        for (j, (c, tp)) in self.nets.critics.iter().zip(&self.nets.critic_targets).enumerate() {
            networks.insert(format!("critic{}", j + 1), c.clone());
            let mut t = c.clone();
            t.params = tp.clone();
            networks.insert(format!("critic{}_target", j + 1), t);
        }
        AgentCheckpoint {
            config: self.config.clone(),
            centering: self.estimator.config(),
            rbar: self.estimator.value(),
            steps: self.schedule.steps,
            networks,
            tables: Default::default(),
            scalars: [("log_kappa".to_string(), self.nets.log_kappa)].into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn one_hot_policy_reduces_to_single_action_value() {
        let p = [0.0, 1.0, 0.0];
        let lp = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        let y = sac_discrete_target(&p, &lp, &[5.0, 2.0, 7.0], 0.3, 1.0, 0.9);
        assert_eq!(y, 1.0 + 0.9 * 2.0);
    }

    #[test]
    fn uniform_policy_adds_log_action_count() {
        let p = [0.25; 4];
        let lp = [0.25f64.ln(); 4];
        let q = [1.0, 2.0, 3.0, 4.0];
        let y = sac_discrete_target(&p, &lp, &q, 0.5, 0.0, 1.0);
        assert!((y - (2.5 + 0.5 * 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn expectation_matches_monte_carlo() {
        let logits = [0.3, -1.0, 1.2];
        let p = softmax(&logits);
        let lp = log_softmax(&logits);
        let q = [1.0, -2.0, 0.5];
        let kappa = 0.4;
        let exact = sac_discrete_target(&p, &lp, &q, kappa, 0.0, 1.0);
        let mut rng = seeded(8);
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let a = sample_categorical(&p, &mut rng);
                q[a] - kappa * lp[a]
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - exact).abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let logits = [0.2, -0.4, 0.9, 0.0];
        let q = [0.5, 1.5, -0.3, 0.2];
        let kappa = 0.7;
        let loss = |z: &[f64]| -> f64 {
            let p = softmax(z);
            let lp = log_softmax(z);
            p.iter().zip(&lp).zip(&q).map(|((pi, l), qi)| pi * (kappa * l - qi)).sum()
        };
        let g = sac_discrete_actor_logit_grad(&softmax(&logits), &log_softmax(&logits), &q, kappa);
        let h = 1e-6;
        for i in 0..4 {
            let mut z = logits.to_vec();
            z[i] += h;
            let up = loss(&z);
            z[i] -= 2.0 * h;
            let fd = (up - loss(&z)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }
}
