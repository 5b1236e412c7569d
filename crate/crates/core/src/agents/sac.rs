//! Soft actor-critic for box action spaces: a `tanh`-squashed Gaussian
//! actor, twin critics with Polyak targets and an optionally tuned
//! entropy coefficient κ.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use super::deterministic::ddpg_critic_gradient;
use super::{
    concat, continuous, featurize, vector, warmup_action, Agent, AgentCheckpoint, AgentConfig, ActionMode, ActionScaler,
    Algorithm, ReplayBuffer, Schedule, TDErrorBatch, Transition,
};
use crate::centering::{reference_state_value, CenteringMode, ReferenceSet, RewardRateEstimator};
use crate::env::{Action, ActionSpec, Observation, ObservationSpec};
use crate::error::{Error, Result};
use crate::nn::{target_sync, AdamState, ForwardCache, MlpSpec, Network, ParamVector, SyncMode};
use crate::rng::Rng;

const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;
const SQUASH_EPS: f64 = 1e-6;

/// One reparameterised draw `a = tanh(μ + σε)` from actor outputs `[μ, log σ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedSample {
    pub unit: Vec<f64>,
    /// Log density of the env-unit action (`scales` are the half ranges).
    pub log_prob: f64,
    eps: Vec<f64>,
    sigma: Vec<f64>,
    clamped: Vec<bool>,
}

pub fn squashed_sample(output: &[f64], eps: &[f64], scales: &[f64]) -> SquashedSample {
    let d = eps.len();
    let (mu, raw_log_std) = output.split_at(d);
    let mut unit = Vec::with_capacity(d);
    let mut sigma = Vec::with_capacity(d);
    let mut clamped = Vec::with_capacity(d);
    let mut log_prob = 0.0;
    for k in 0..d {
        let log_std = raw_log_std[k].clamp(LOG_STD_MIN, LOG_STD_MAX);
        clamped.push(log_std != raw_log_std[k]);
        let s = log_std.exp();
        let t = (mu[k] + s * eps[k]).tanh();
        log_prob += -0.5 * eps[k] * eps[k] - log_std - 0.5 * (2.0 * PI).ln() - (scales[k] * (1.0 - t * t) + SQUASH_EPS).ln();
        unit.push(t);
        sigma.push(s);
    }
    SquashedSample {
        unit,
        log_prob,
        eps: eps.to_vec(),
        sigma,
        clamped,
    }
}

/// Gradient of `κ log π(a|s) − q(s, a)` for one draw with respect to the
/// actor outputs `[μ, log σ]`, given `g = ∂q/∂a` in unit action space.
pub fn sac_actor_output_grad(sample: &SquashedSample, scales: &[f64], kappa: f64, g: &[f64]) -> Vec<f64> {
    let d = sample.unit.len();
    let mut out = vec![0.0; 2 * d];
    for k in 0..d {
        let t = sample.unit[k];
        let sech2 = 1.0 - t * t;
        let jac = scales[k] * 2.0 * t * sech2 / (scales[k] * sech2 + SQUASH_EPS);
        let se = sample.sigma[k] * sample.eps[k];
        out[k] = kappa * jac - g[k] * sech2;
        if !sample.clamped[k] {
            out[d + k] = kappa * (-1.0 + jac * se) - g[k] * sech2 * se;
        }
    }
    out
}

/// Gradient of `−κ · mean(log π + H̄)` with respect to `log κ`. Descending it
/// raises κ while the policy entropy is below the target `H̄`.
pub fn sac_entropy_loss_grad(log_kappa: f64, log_probs: &[f64], target_entropy: f64) -> f64 {
    let mean = log_probs.iter().map(|lp| lp + target_entropy).sum::<f64>() / log_probs.len().max(1) as f64;
    -log_kappa.exp() * mean
}

#[derive(Debug, Clone)]
pub struct SacNets {
    pub actor: Network,
    pub critics: Vec<Network>,
    pub critic_targets: Vec<ParamVector>,
    pub log_kappa: f64,
    pub kappa_adam: AdamState,
    /// Half range of each action dimension.
    pub scales: Vec<f64>,
    pub target_entropy: f64,
}

impl SacNets {
    pub fn new(config: &AgentConfig, obs_dim: usize, scaler: &ActionScaler, init: &mut Rng) -> Result<Self> {
        let d = scaler.dims();
        let actor = Network::new(MlpSpec::with_hidden(obs_dim, &config.hidden, 2 * d, config.activation)?, config.actor_lr, init);
        let critic_spec = MlpSpec::with_hidden(obs_dim + d, &config.hidden, 1, config.activation)?;
        let critics: Vec<Network> = (0..2).map(|_| Network::new(critic_spec.clone(), config.critic_lr, init)).collect();
        if config.entropy_coef <= 0.0 {
            return Err(Error::InvalidParameter(format!("entropy_coef must be positive, got {}", config.entropy_coef)));
        }
        Ok(Self {
            critic_targets: critics.iter().map(|c| c.params.clone()).collect(),
            actor,
            critics,
            log_kappa: config.entropy_coef.ln(),
            kappa_adam: AdamState::new(1, config.critic_lr),
            scales: (0..d).map(|k| scaler.half_range(k)).collect(),
            target_entropy: config.default_target_entropy(d),
        })
    }

    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }

    pub fn sample(&self, state: &[f64], rng: &mut Rng) -> Result<SquashedSample> {
        let out = self.actor.forward(state)?;
        let eps: Vec<f64> = self.scales.iter().map(|_| StandardNormal.sample(rng)).collect();
        Ok(squashed_sample(&out, &eps, &self.scales))
    }

    /// Deterministic unit action `tanh(μ(s))`.
    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        let out = self.actor.forward(state)?;
        Ok(out[..self.scales.len()].iter().map(|m| m.tanh()).collect())
    }

    fn reference_value(&self, set: &ReferenceSet) -> Result<f64> {
        let mut q = [Vec::with_capacity(set.len()), Vec::with_capacity(set.len())];
        for pair in set.pairs() {
            let a = pair
                .action
                .as_ref()
                .and_then(Action::as_slice)
                .ok_or_else(|| Error::InvalidParameter("reference pairs need continuous actions".into()))?;
            let x = concat(&pair.state, a);
            for (j, v) in q.iter_mut().enumerate() {
                v.push(self.critics[j].forward(&x)?[0]);
            }
        }
        reference_state_value(&q[0], Some(&q[1]))
    }
}

/// One SAC step: twin critic regression to
/// `r − r̄ + γ (min q̂(s', a') − κ log π(a'|s'))`, an actor step on
/// `κ log π − min q`, the κ step when `autotune`, and Polyak targets.
pub fn sac_continuous_update(
    nets: &mut SacNets,
    batch: &[&Transition],
    config: &AgentConfig,
    estimator: &mut RewardRateEstimator,
    rng: &mut Rng,
) -> Result<TDErrorBatch> {
    let kappa = nets.kappa();
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for t in batch {
        let next = vector(&t.next_state)?;
        let draw = nets.sample(next, rng)?;
        let x_next = concat(next, &draw.unit);
        let mut best = f64::INFINITY;
        for (c, tp) in nets.critics.iter().zip(&nets.critic_targets) {
            best = best.min(c.spec.forward(tp, &x_next)?[0]);
        }
        targets.push(estimator.center_reward(t.reward) + config.gamma * (best - kappa * draw.log_prob));
        inputs.push(concat(vector(&t.state)?, continuous(&t.action)?));
    }
    let mut mean_delta = vec![0.0; batch.len()];
    for critic in nets.critics.iter_mut() {
        let (mut grad, deltas) = ddpg_critic_gradient(critic, &inputs, &targets)?;
        let deltas = TDErrorBatch::new(deltas)?;
        critic.apply_gradient(&mut grad, config.max_grad_norm)?;
        for (m, d) in mean_delta.iter_mut().zip(deltas.deltas()) {
            *m += 0.5 * d;
        }
    }
    let deltas = TDErrorBatch::new(mean_delta)?;
    if estimator.mode() == CenteringMode::TdBased {
        estimator.td_based_update(deltas.deltas())?;
    }

    let n = batch.len() as f64;
    let mut grad = nets.actor.zero_grad();
    let mut cache = ForwardCache::default();
    let mut log_probs = Vec::with_capacity(batch.len());
    for t in batch {
        let s = vector(&t.state)?;
        nets.actor.forward_cached(s, &mut cache)?;
        let eps: Vec<f64> = nets.scales.iter().map(|_| StandardNormal.sample(rng)).collect();
        let draw = squashed_sample(cache.output(), &eps, &nets.scales);
        let x = concat(s, &draw.unit);
        let q: Vec<f64> = nets.critics.iter().map(|c| c.forward(&x).map(|o| o[0])).collect::<Result<_>>()?;
        let j = if q[1] < q[0] { 1 } else { 0 };
        let critic = &nets.critics[j];
        let g = critic.spec.input_gradient(&critic.params, &[1.0], &x)?[s.len()..].to_vec();
        let seed: Vec<f64> = sac_actor_output_grad(&draw, &nets.scales, kappa, &g).into_iter().map(|v| v / n).collect();
        nets.actor.backward(&cache, &seed, &mut grad, None)?;
        log_probs.push(draw.log_prob);
    }
    nets.actor.apply_gradient(&mut grad, config.max_grad_norm)?;

    if config.autotune {
        let mut g = [sac_entropy_loss_grad(nets.log_kappa, &log_probs, nets.target_entropy)];
        let mut p = [nets.log_kappa];
        nets.kappa_adam.step(&mut p, &mut g, None)?;
        nets.log_kappa = p[0];
    }
    for (tp, c) in nets.critic_targets.iter_mut().zip(&nets.critics) {
        target_sync(tp, &c.params, SyncMode::Polyak(config.tau))?;
    }
    Ok(deltas)
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    config: AgentConfig,
    estimator: RewardRateEstimator,
    observation_spec: ObservationSpec,
    action_spec: ActionSpec,
    scaler: ActionScaler,
    nets: SacNets,
    replay: ReplayBuffer,
    rng: Rng,
    schedule: Schedule,
}

impl SacAgent {
    pub fn new(
        config: AgentConfig,
        estimator: RewardRateEstimator,
        observation_spec: ObservationSpec,
        action_spec: ActionSpec,
        init: &mut Rng,
        replay_rng: Rng,
    ) -> Result<Self> {
        let scaler = ActionScaler::new(&action_spec)?;
        let nets = SacNets::new(&config, observation_spec.flat_dim(), &scaler, init)?;
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
        })
    }

    pub fn nets(&self) -> &SacNets {
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
        sac_continuous_update(&mut self.nets, &batch, &self.config, &mut self.estimator, &mut self.rng)?;
        self.schedule.updates += 1;
        Ok(())
    }
}

impl Agent for SacAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Sac
    }

    fn select_action(&self, observation: &Observation, mode: ActionMode, rng: &mut Rng) -> Result<Action> {
        let s = observation.features(&self.observation_spec);
        let unit = match mode {
            ActionMode::Warmup => return Ok(warmup_action(&self.action_spec, self.config.reset_action, rng)),
            ActionMode::Explore => self.nets.sample(&s, rng)?.unit,
            ActionMode::Greedy => self.nets.mean_action(&s)?,
        };
        let mut env = self.scaler.to_env(&unit);
        self.scaler.clip_env(&mut env);
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
            scalars: [
                ("log_kappa".to_string(), self.nets.log_kappa),
                ("target_entropy".to_string(), self.nets.target_entropy),
            ]
            .into_iter()
            .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::Preset;
    use crate::env::Space;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn loss(out: &[f64], eps: &[f64], scales: &[f64], kappa: f64) -> f64 {
        let s = squashed_sample(out, eps, scales);
        let q: f64 = -s.unit.iter().map(|a| (a - 0.3).powi(2)).sum::<f64>();
        kappa * s.log_prob - q
    }

    #[test]
    fn actor_output_gradient_matches_finite_differences() {
        let mut rng = seeded(3);
        for _ in 0..20 {
            let out: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eps: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let scales = [2.0, 0.5];
            let kappa = 0.3;
            let s = squashed_sample(&out, &eps, &scales);
            let g: Vec<f64> = s.unit.iter().map(|a| -2.0 * (a - 0.3)).collect();
            let analytic = sac_actor_output_grad(&s, &scales, kappa, &g);
            let h = 1e-6;
            for i in 0..4 {
                let mut p = out.clone();
                p[i] += h;
                let up = loss(&p, &eps, &scales, kappa);
                p[i] -= 2.0 * h;
                let fd = (up - loss(&p, &eps, &scales, kappa)) / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn clamped_log_std_gets_no_gradient() {
        let s = squashed_sample(&[0.1, 5.0], &[0.4], &[1.0]);
        let g = sac_actor_output_grad(&s, &[1.0], 0.2, &[1.0]);
        assert_eq!(g[1], 0.0);
        assert!(g[0] != 0.0);
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        // unsquashed density minus log |da/du| with unit scale
        let out = [0.2, -0.3];
        let eps = [0.7];
        let s = squashed_sample(&out, &eps, &[1.0]);
        let sigma = (-0.3f64).exp();
        let u = 0.2 + sigma * 0.7;
        let base = crate::agents::gaussian_log_prob(&[u], &[0.2], &[-0.3]);
        let expected = base - (1.0 - u.tanh().powi(2) + SQUASH_EPS).ln();
        assert!((s.log_prob - expected).abs() < 1e-12);
    }

    #[test]
    fn kappa_rises_when_entropy_is_below_target() {
        // log π = 1 means entropy ≈ -1, below a target of 0
        let g = sac_entropy_loss_grad(0.0, &[1.0, 1.0], 0.0);
        assert!(g < 0.0);
        let mut adam = AdamState::new(1, 0.01);
        let mut p = [0.0];
        adam.step(&mut p, &mut [g], None).unwrap();
        assert!(p[0] > 0.0);
        assert!(sac_entropy_loss_grad(0.0, &[-2.0], 1.0) > 0.0);
    }

    #[test]
    fn agent_trains_and_keeps_actions_in_bounds() {
        let mut config = AgentConfig::preset(Algorithm::Sac, Preset::Desk);
        config.hidden = vec![8];
        config.batch_size = 8;
        config.learning_starts = 20;
        config.warmup_steps = 20;
        let obs = Space::new_box(vec![-1.0; 2], vec![1.0; 2]).unwrap();
        let act = Space::new_box(vec![-2.0], vec![2.0]).unwrap();
        let mut agent =
            SacAgent::new(config, RewardRateEstimator::off(), obs, act, &mut seeded(0), seeded(1)).unwrap();
        let mut rng = seeded(2);
        let kappa0 = agent.nets().kappa();
        for step in 0..60 {
            let s = Observation::Vector(vec![rng.random_range(-1.0..1.0), 0.0]);
            let mode = if step < 20 { ActionMode::Warmup } else { ActionMode::Explore };
            let a = agent.select_action(&s, mode, &mut rng).unwrap();
            assert!((-2.0..=2.0).contains(&a.as_slice().unwrap()[0]));
            let r = -a.as_slice().unwrap()[0].powi(2);
            agent
                .observe(Transition {
                    state: s,
                    action: a,
                    reward: r,
                    next_state: Observation::Vector(vec![0.0, 0.0]),
                })
                .unwrap();
        }
        assert_eq!(agent.updates(), 41);
        assert_ne!(agent.nets().kappa(), kappa0);
    }
}
