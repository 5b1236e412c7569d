//! DDPG and TD3. Actors emit `tanh`-squashed actions in `[-1, 1]^d`;
//! critics read `[state, unit action]`. Replay stores unit actions.

use rand_distr::{Distribution, Normal, StandardNormal};

use super::{
    concat, continuous, featurize, vector, warmup_action, Agent, AgentCheckpoint, AgentConfig, ActionMode, ActionScaler,
    Algorithm, ReplayBuffer, Schedule, TDErrorBatch, Transition,
};
use crate::centering::{reference_state_value, CenteringMode, ReferenceSet, RewardRateEstimator};
use crate::env::{Action, ActionSpec, Observation, ObservationSpec};
use crate::error::{Error, Result};
use crate::nn::{target_sync, ForwardCache, MlpSpec, Network, ParamVector, SyncMode};
use crate::rng::Rng;

/// Gradient of `(1/2n) Σ (y_i − q(x_i))²` for a scalar critic with the
/// targets held fixed. Returns the gradient and `δ_i = y_i − q(x_i)`.
pub fn ddpg_critic_gradient(critic: &Network, inputs: &[Vec<f64>], targets: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if inputs.len() != targets.len() {
        return Err(Error::dims("critic targets", inputs.len(), targets.len()));
    }
    let n = inputs.len() as f64;
    let mut grad = critic.zero_grad();
    let mut cache = ForwardCache::default();
    let mut deltas = Vec::with_capacity(inputs.len());
    for (x, y) in inputs.iter().zip(targets) {
        critic.forward_cached(x, &mut cache)?;
        let delta = y - cache.output()[0];
        critic.backward(&cache, &[-delta / n], &mut grad, None)?;
        deltas.push(delta);
    }
    Ok((grad, deltas))
}

/// Gradient of `−(1/n) Σ q(s_i, μ(s_i))` with respect to the actor
/// parameters, where `μ = tanh(actor(s))` and `action_grad(s, a)` returns
/// `∂q/∂a` at unit action `a`.
pub fn ddpg_actor_gradient(
    actor: &Network,
    states: &[&[f64]],
    action_grad: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let n = states.len() as f64;
    let mut grad = actor.zero_grad();
    let mut cache = ForwardCache::default();
    for s in states {
        actor.forward_cached(s, &mut cache)?;
        let mu: Vec<f64> = cache.output().iter().map(|z| z.tanh()).collect();
        let g = action_grad(s, &mu)?;
        let seed: Vec<f64> = mu.iter().zip(&g).map(|(m, gk)| -gk * (1.0 - m * m) / n).collect();
        actor.backward(&cache, &seed, &mut grad, None)?;
    }
    Ok(grad)
}

/// TD3 target action `clip(μ'(s') + clip(ε, −c, c), −1, 1)` for a raw
/// noise draw `ε`.
pub fn td3_target_action(mu: &[f64], raw_noise: &[f64], noise_clip: f64) -> Vec<f64> {
    mu.iter()
        .zip(raw_noise)
        .map(|(m, e)| (m + e.clamp(-noise_clip, noise_clip)).clamp(-1.0, 1.0))
        .collect()
}

fn squash(actor_spec: &MlpSpec, params: &[f64], state: &[f64]) -> Result<Vec<f64>> {
    Ok(actor_spec.forward(params, state)?.into_iter().map(f64::tanh).collect())
}

/// Actor, one or two critics, and their targets.
#[derive(Debug, Clone)]
pub struct DeterministicNets {
    pub actor: Network,
    pub actor_target: ParamVector,
    pub critics: Vec<Network>,
    pub critic_targets: Vec<ParamVector>,
}

impl DeterministicNets {
    pub fn new(config: &AgentConfig, obs_dim: usize, act_dim: usize, twin: bool, init: &mut Rng) -> Result<Self> {
        let actor_spec = MlpSpec::with_hidden(obs_dim, &config.hidden, act_dim, config.activation)?;
        let critic_spec = MlpSpec::with_hidden(obs_dim + act_dim, &config.hidden, 1, config.activation)?;
        let actor = Network::new(actor_spec, config.actor_lr, init);
        let critics: Vec<Network> = (0..if twin { 2 } else { 1 })
            .map(|_| Network::new(critic_spec.clone(), config.critic_lr, init))
            .collect();
        Ok(Self {
            actor_target: actor.params.clone(),
            critic_targets: critics.iter().map(|c| c.params.clone()).collect(),
            actor,
            critics,
        })
    }

    /// Unit action `tanh(actor(s))`.
    pub fn mu(&self, state: &[f64]) -> Result<Vec<f64>> {
        squash(&self.actor.spec, &self.actor.params, state)
    }

    pub fn q(&self, critic: usize, state: &[f64], unit_action: &[f64]) -> Result<f64> {
        Ok(self.critics[critic].forward(&concat(state, unit_action))?[0])
    }

    fn polyak(&mut self, tau: f64) -> Result<()> {
        target_sync(&mut self.actor_target, &self.actor.params, SyncMode::Polyak(tau))?;
        for (t, c) in self.critic_targets.iter_mut().zip(&self.critics) {
            target_sync(t, &c.params, SyncMode::Polyak(tau))?;
        }
        Ok(())
    }

    /// Mean critic value over the reference set, averaging twin critics.
    fn reference_value(&self, set: &ReferenceSet) -> Result<f64> {
        let mut per_critic = vec![Vec::with_capacity(set.len()); self.critics.len()];
        for pair in set.pairs() {
            let a = pair
                .action
                .as_ref()
                .and_then(Action::as_slice)
                .ok_or_else(|| Error::InvalidParameter("reference pairs need continuous actions".into()))?;
            for (j, values) in per_critic.iter_mut().enumerate() {
                values.push(self.q(j, &pair.state, a)?);
            }
        }
        reference_state_value(&per_critic[0], per_critic.get(1).map(Vec::as_slice))
    }
}

/// Shared critic step. `target_action` maps `(s', μ'(s'))` to the action
/// fed to the target critics.
fn critic_step(
    nets: &mut DeterministicNets,
    batch: &[&Transition],
    gamma: f64,
    estimator: &mut RewardRateEstimator,
    clip: Option<f64>,
    mut target_action: impl FnMut(Vec<f64>) -> Vec<f64>,
) -> Result<TDErrorBatch> {
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for t in batch {
        let next = vector(&t.next_state)?;
        let a_next = target_action(squash(&nets.actor.spec, &nets.actor_target, next)?);
        let x_next = concat(next, &a_next);
        let mut best = f64::INFINITY;
        for (c, tp) in nets.critics.iter().zip(&nets.critic_targets) {
            best = best.min(c.spec.forward(tp, &x_next)?[0]);
        }
        targets.push(estimator.center_reward(t.reward) + gamma * best);
        inputs.push(concat(vector(&t.state)?, continuous(&t.action)?));
    }
    let mut all = vec![0.0; batch.len()];
    let k = nets.critics.len() as f64;
    for critic in nets.critics.iter_mut() {
        let (mut grad, deltas) = ddpg_critic_gradient(critic, &inputs, &targets)?;
        let deltas = TDErrorBatch::new(deltas)?;
        critic.apply_gradient(&mut grad, clip)?;
        for (acc, d) in all.iter_mut().zip(deltas.deltas()) {
            *acc += d / k;
        }
    }
    let deltas = TDErrorBatch::new(all)?;
    if estimator.mode() == CenteringMode::TdBased {
        estimator.td_based_update(deltas.deltas())?;
    }
    Ok(deltas)
}

fn actor_step(nets: &mut DeterministicNets, batch: &[&Transition], clip: Option<f64>) -> Result<()> {
    let states: Vec<&[f64]> = batch.iter().map(|t| vector(&t.state)).collect::<Result<_>>()?;
    let critic = &nets.critics[0];
    let obs_dim = states.first().map_or(0, |s| s.len());
    let mut grad = ddpg_actor_gradient(&nets.actor, &states, |s, a| {
        let g = critic.spec.input_gradient(&critic.params, &[1.0], &concat(s, a))?;
        Ok(g[obs_dim..].to_vec())
    })?;
    nets.actor.apply_gradient(&mut grad, clip)?;
    Ok(())
}

/// One DDPG step: critic regression to `r − r̄ + γ q̂(s', μ̂(s'))`, actor
/// ascent through the critic, Polyak targets.
pub fn ddpg_update(
    nets: &mut DeterministicNets,
    batch: &[&Transition],
    config: &AgentConfig,
    estimator: &mut RewardRateEstimator,
) -> Result<TDErrorBatch> {
    let deltas = critic_step(nets, batch, config.gamma, estimator, config.max_grad_norm, |a| a)?;
    actor_step(nets, batch, config.max_grad_norm)?;
    nets.polyak(config.tau)?;
    Ok(deltas)
}

/// One TD3 critic step with target smoothing and the twin minimum. The
/// actor and targets move only when `update_actor` is set.
pub fn td3_update(
    nets: &mut DeterministicNets,
    batch: &[&Transition],
    config: &AgentConfig,
    estimator: &mut RewardRateEstimator,
    update_actor: bool,
    rng: &mut Rng,
) -> Result<TDErrorBatch> {
    let noise = Normal::new(0.0, config.policy_noise.max(0.0))
        .map_err(|e| Error::InvalidParameter(format!("policy noise: {e}")))?;
    let clip = config.noise_clip;
    let deltas = critic_step(nets, batch, config.gamma, estimator, config.max_grad_norm, |mu| {
        let raw: Vec<f64> = mu.iter().map(|_| noise.sample(rng)).collect();
        td3_target_action(&mu, &raw, clip)
    })?;
    if update_actor {
        actor_step(nets, batch, config.max_grad_norm)?;
        nets.polyak(config.tau)?;
    }
    Ok(deltas)
}

/// DDPG (one critic) or TD3 (twin critics, delayed actor).
#[derive(Debug, Clone)]
pub struct DeterministicAgent {
    config: AgentConfig,
    estimator: RewardRateEstimator,
    observation_spec: ObservationSpec,
    action_spec: ActionSpec,
    scaler: ActionScaler,
    nets: DeterministicNets,
    replay: ReplayBuffer,
    rng: Rng,
    schedule: Schedule,
    actor_updates: u64,
}

impl DeterministicAgent {
    pub fn new(
        config: AgentConfig,
        estimator: RewardRateEstimator,
        observation_spec: ObservationSpec,
        action_spec: ActionSpec,
        init: &mut Rng,
        replay_rng: Rng,
    ) -> Result<Self> {
        let scaler = ActionScaler::new(&action_spec)?;
        let twin = config.algorithm == Algorithm::Td3;
        let nets = DeterministicNets::new(&config, observation_spec.flat_dim(), scaler.dims(), twin, init)?;
        let replay = ReplayBuffer::new(config.buffer_capacity)?;
        Ok(Self {
            config,
            estimator,
            observation_spec,
            action_spec,
            scaler,
            nets,
            replay,
            rng: replay_rng,
            schedule: Schedule::default(),
            actor_updates: 0,
        })
    }

    pub fn nets(&self) -> &DeterministicNets {
        &self.nets
    }

    pub fn critic_updates(&self) -> u64 {
        self.schedule.updates
    }

    pub fn actor_updates(&self) -> u64 {
        self.actor_updates
    }

    fn noise_std(&self, k: usize) -> f64 {
        let last = k + 1 == self.scaler.dims();
        match self.config.reset_exploration_std {
            Some(std) if last && self.config.reset_action => std,
            _ => self.config.exploration_std * self.scaler.half_range(k),
        }
    }

    fn learn(&mut self) -> Result<()> {
        let nets = &self.nets;
        super::dqn::refresh_reference(&mut self.estimator, &self.replay, self.config.batch_size, &mut self.rng, |set| {
            nets.reference_value(set)
        })?;
        let batch = self.replay.sample(self.config.batch_size, &mut self.rng)?;
        if self.config.algorithm == Algorithm::Td3 {
            let update_actor = (self.schedule.updates + 1) % self.config.policy_delay == 0;
            td3_update(&mut self.nets, &batch, &self.config, &mut self.estimator, update_actor, &mut self.rng)?;
            if update_actor {
                self.actor_updates += 1;
            }
        } else {
            ddpg_update(&mut self.nets, &batch, &self.config, &mut self.estimator)?;
            self.actor_updates += 1;
        }
        self.schedule.updates += 1;
        Ok(())
    }
}

impl Agent for DeterministicAgent {
    fn algorithm(&self) -> Algorithm {
        self.config.algorithm
    }

    fn select_action(&self, observation: &Observation, mode: ActionMode, rng: &mut Rng) -> Result<Action> {
        if mode == ActionMode::Warmup {
            return Ok(warmup_action(&self.action_spec, self.config.reset_action, rng));
        }
        let mu = self.nets.mu(&observation.features(&self.observation_spec))?;
        let mut env = self.scaler.to_env(&mu);
        if mode == ActionMode::Explore {
            for (k, a) in env.iter_mut().enumerate() {
                let std = self.noise_std(k);
                if std > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    *a += std * z;
                }
            }
            self.scaler.clip_env(&mut env);
        }
        Ok(Action::Continuous(env))
    }

    fn observe(&mut self, transition: Transition) -> Result<()> {
        if self.estimator.mode() == CenteringMode::MovingAverage {
            self.estimator.moving_average_update(transition.reward)?;
        }
        let mut t = featurize(transition, &self.observation_spec);
        let mut unit = self.scaler.to_unit(continuous(&t.action)?);
        unit.iter_mut().for_each(|u| *u = u.clamp(-1.0, 1.0));
        t.action = Action::Continuous(unit);
        self.replay.push(t);
        if self.schedule.tick(&self.config, self.replay.len()) {
            self.learn()?;
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
        let mut target = self.nets.actor.clone();
        target.params = self.nets.actor_target.clone();
        networks.insert("actor_target".to_string(), target);
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
            scalars: [("actor_updates".to_string(), self.actor_updates as f64)].into_iter().collect(),
        }
    }
}
