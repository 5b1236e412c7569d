//! PPO with a clipped surrogate, GAE and a separate value network.
//! Continuing setting: every advantage bootstraps through `v(s')`.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::dist::gaussian_entropy;
use super::{
    featurize, gaussian_log_prob, log_softmax, softmax, vector, warmup_action, Agent, AgentCheckpoint, AgentConfig,
    ActionMode, ActionScaler, Algorithm, Schedule, Transition,
};
use crate::centering::{CenteringMode, ReferencePair, ReferenceSet, RewardRateEstimator};
use crate::env::{sample_categorical, Action, ActionSpec, Observation, ObservationSpec, Space};
use crate::error::{Error, Result};
use crate::mdp::argmax;
use crate::nn::{AdamState, ForwardCache, MlpSpec, Network, ParamVector};
use crate::rng::Rng;

/// Generalised advantage estimates `A_t = δ_t + γλ A_{t+1}` over a round,
/// with `A_T = δ_T` for the last step.
pub fn gae(deltas: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut out = vec![0.0; deltas.len()];
    let mut acc = 0.0;
    for t in (0..deltas.len()).rev() {
        acc = deltas[t] + gamma * lambda * acc;
        out[t] = acc;
    }
    out
}

/// `∂/∂ log π` of `−min(ρA, clip(ρ, 1−ε, 1+ε)A)`: `−ρA` while the
/// unclipped term is the minimum, zero once clipping binds.
pub fn clipped_surrogate_grad(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        -unclipped
    } else {
        0.0
    }
}

/// Action distribution family.
#[derive(Debug, Clone, PartialEq)]
pub enum PpoPolicy {
    Categorical(usize),
    /// Diagonal Gaussian in unit action space with a state-independent
    /// log standard deviation.
    Gaussian(usize),
}

impl PpoPolicy {
    fn outputs(&self) -> usize {
        match self {
            PpoPolicy::Categorical(n) | PpoPolicy::Gaussian(n) => *n,
        }
    }

    /// `log π(a)`, entropy, `∂ log π/∂out`, `∂H/∂out`, `∂ log π/∂ log σ`
    /// and `∂H/∂ log σ` for one actor output.
    fn terms(&self, out: &[f64], log_std: &[f64], action: &Action) -> Result<PolicyTerms> {
        match self {
            PpoPolicy::Categorical(_) => {
                let a = action
                    .index()
                    .ok_or_else(|| Error::InvalidAction("PPO categorical policy needs a discrete action".into()))?;
                let p = softmax(out);
                let lp = log_softmax(out);
                let entropy = -p.iter().zip(&lp).map(|(pi, l)| pi * l).sum::<f64>();
                let mut d_logp: Vec<f64> = p.iter().map(|pi| -pi).collect();
                d_logp[a] += 1.0;
                let d_entropy = p.iter().zip(&lp).map(|(pi, l)| -pi * (l + entropy)).collect();
                Ok(PolicyTerms {
                    log_prob: lp[a],
                    entropy,
                    d_logp,
                    d_entropy,
                    d_logp_log_std: Vec::new(),
                    d_entropy_log_std: Vec::new(),
                })
            }
            PpoPolicy::Gaussian(_) => {
                let x = action
                    .as_slice()
                    .ok_or_else(|| Error::InvalidAction("PPO Gaussian policy needs a continuous action".into()))?;
                let z: Vec<f64> = x.iter().zip(out).zip(log_std).map(|((x, m), ls)| (x - m) / ls.exp()).collect();
                Ok(PolicyTerms {
                    log_prob: gaussian_log_prob(x, out, log_std),
                    entropy: gaussian_entropy(log_std),
                    d_logp: z.iter().zip(log_std).map(|(z, ls)| z / ls.exp()).collect(),
                    d_entropy: vec![0.0; out.len()],
                    d_logp_log_std: z.iter().map(|z| z * z - 1.0).collect(),
                    d_entropy_log_std: vec![1.0; log_std.len()],
                })
            }
        }
    }
}

#[cfg_attr(not(test), allow(dead_code))]
struct PolicyTerms {
    log_prob: f64,
    entropy: f64,
    d_logp: Vec<f64>,
    d_entropy: Vec<f64>,
    d_logp_log_std: Vec<f64>,
    d_entropy_log_std: Vec<f64>,
}

/// One round of experience. Gaussian actions are stored in unit space.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PpoBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<Vec<f64>>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn clear(&mut self) {
        self.states.clear();
        self.actions.clear();
        self.old_log_probs.clear();
        self.rewards.clear();
        self.next_states.clear();
    }
}

/// Gradient of the mean clipped-surrogate loss minus `entropy_coef · H`
/// over `indices`, with respect to the actor parameters and `log σ`.
#[allow(clippy::too_many_arguments)]
pub fn ppo_policy_gradient(
    policy: &PpoPolicy,
    actor: &Network,
    log_std: &[f64],
    batch: &PpoBatch,
    indices: &[usize],
    advantages: &[f64],
    clip: f64,
    entropy_coef: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = indices.len() as f64;
    let mut grad = actor.zero_grad();
    let mut grad_log_std = vec![0.0; log_std.len()];
    let mut cache = ForwardCache::default();
    for (&i, adv) in indices.iter().zip(advantages) {
        actor.forward_cached(&batch.states[i], &mut cache)?;
        let terms = policy.terms(cache.output(), log_std, &batch.actions[i])?;
        let ratio = (terms.log_prob - batch.old_log_probs[i]).exp();
        let dl = clipped_surrogate_grad(ratio, *adv, clip);
        let seed: Vec<f64> = terms
            .d_logp
            .iter()
            .zip(&terms.d_entropy)
            .map(|(lp, h)| (dl * lp - entropy_coef * h) / m)
            .collect();
        actor.backward(&cache, &seed, &mut grad, None)?;
        for ((g, lp), h) in grad_log_std.iter_mut().zip(&terms.d_logp_log_std).zip(&terms.d_entropy_log_std) {
            *g += (dl * lp - entropy_coef * h) / m;
        }
    }
    Ok((grad, grad_log_std))
}

fn clip_jointly(a: &mut [f64], b: &mut [f64], limit: Option<f64>) {
    if let Some(limit) = limit {
        let norm = a.iter().chain(b.iter()).map(|g| g * g).sum::<f64>().sqrt();
        if norm > limit {
            let s = limit / norm;
            a.iter_mut().chain(b.iter_mut()).for_each(|g| *g *= s);
        }
    }
}

fn normalize(values: &mut [f64]) {
    if values.len() < 2 {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    values.iter_mut().for_each(|v| *v = (*v - mean) / (std + 1e-8));
}

#[derive(Debug, Clone)]
pub struct PpoAgent {
    config: AgentConfig,
    estimator: RewardRateEstimator,
    observation_spec: ObservationSpec,
    action_spec: ActionSpec,
    policy: PpoPolicy,
    scaler: Option<ActionScaler>,
    actor: Network,
    log_std: ParamVector,
    log_std_adam: AdamState,
    critic: Network,
    round: PpoBatch,
    rng: Rng,
    schedule: Schedule,
}

impl PpoAgent {
    pub fn new(
        config: AgentConfig,
        estimator: RewardRateEstimator,
        observation_spec: ObservationSpec,
        action_spec: ActionSpec,
        init: &mut Rng,
        replay_rng: Rng,
    ) -> Result<Self> {
        let (policy, scaler) = match &action_spec {
            Space::Discrete(n) => (PpoPolicy::Categorical(*n), None),
            Space::Box { low, .. } => (PpoPolicy::Gaussian(low.len()), Some(ActionScaler::new(&action_spec)?)),
        };
        let obs_dim = observation_spec.flat_dim();
        let actor_spec = MlpSpec::with_hidden(obs_dim, &config.hidden, policy.outputs(), config.activation)?;
        let actor = Network::with_output_scale(actor_spec, config.actor_lr, init, 0.01);
        let critic = Network::new(MlpSpec::with_hidden(obs_dim, &config.hidden, 1, config.activation)?, config.critic_lr, init);
        let d = if matches!(policy, PpoPolicy::Gaussian(_)) { policy.outputs() } else { 0 };
        Ok(Self {
            log_std: ParamVector(vec![0.0; d]),
            log_std_adam: AdamState::new(d, config.actor_lr),
            config,
            estimator,
            observation_spec,
            action_spec,
            policy,
            scaler,
            actor,
            critic,
            round: PpoBatch::default(),
            rng: replay_rng,
            schedule: Schedule::default(),
        })
    }

    pub fn actor(&self) -> &Network {
        &self.actor
    }

    pub fn critic(&self) -> &Network {
        &self.critic
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    /// Completed policy-improvement rounds.
    pub fn rounds(&self) -> u64 {
        self.schedule.updates
    }

    pub fn value(&self, observation: &Observation) -> Result<f64> {
        Ok(self.critic.forward(&observation.features(&self.observation_spec))?[0])
    }

    fn to_stored(&self, action: &Action) -> Result<Action> {
        match (&self.scaler, action) {
            (Some(s), Action::Continuous(v)) => Ok(Action::Continuous(s.to_unit(v))),
            (None, Action::Discrete(a)) => Ok(Action::Discrete(*a)),
            _ => Err(Error::InvalidAction("action does not match the PPO policy".into())),
        }
    }

    fn learn(&mut self) -> Result<()> {
        let n = self.round.len();
        let gamma = self.config.gamma;
        if self.estimator.mode() == CenteringMode::ReferenceStates && self.estimator.reference_set().is_none() {
            let pool: Vec<ReferencePair> = self
                .round
                .states
                .iter()
                .map(|s| ReferencePair {
                    state: s.clone(),
                    action: None,
                })
                .collect();
            let set = ReferenceSet::sample(&pool, self.config.minibatch_size, &mut self.rng)?;
            self.estimator.set_reference_set(set)?;
        }
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..self.config.epochs {
            let mut values = Vec::with_capacity(n);
            let mut raw = Vec::with_capacity(n);
            for i in 0..n {
                let v = self.critic.forward(&self.round.states[i])?[0];
                let v_next = self.critic.forward(&self.round.next_states[i])?[0];
                values.push(v);
                raw.push(self.round.rewards[i] + gamma * v_next - v);
            }
            let deltas = match self.estimator.mode() {
                CenteringMode::Off => raw,
                CenteringMode::TdBased => self.estimator.ppo_round_center(&raw)?,
                CenteringMode::MovingAverage => self.estimator.center_batch(&raw),
                CenteringMode::ReferenceStates => {
                    let set = self.estimator.reference_set().expect("set above");
                    let mut total = 0.0;
                    for pair in set.pairs() {
                        total += self.critic.forward(&pair.state)?[0];
                    }
                    let f = total / set.len() as f64;
                    self.estimator.set_reference_value(f)?;
                    self.estimator.center_batch(&raw)
                }
            };
            crate::error::ensure_finite(&deltas, "PPO TD error")?;
            let advantages = gae(&deltas, gamma, self.config.gae_lambda);
            let returns: Vec<f64> = advantages.iter().zip(&values).map(|(a, v)| a + v).collect();

            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.minibatch_size) {
                let mut adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
                if self.config.normalize_advantage {
                    normalize(&mut adv);
                }
                let (mut g_actor, mut g_log_std) = ppo_policy_gradient(
                    &self.policy,
                    &self.actor,
                    &self.log_std,
                    &self.round,
                    chunk,
                    &adv,
                    self.config.clip_range,
                    self.config.entropy_bonus,
                )?;
                clip_jointly(&mut g_actor, &mut g_log_std, self.config.max_grad_norm);
                self.actor.apply_gradient(&mut g_actor, None)?;
                if !g_log_std.is_empty() {
                    self.log_std_adam.step(&mut self.log_std, &mut g_log_std, None)?;
                }

                let m = chunk.len() as f64;
                let mut g_critic = self.critic.zero_grad();
                let mut cache = ForwardCache::default();
                for &i in chunk {
                    self.critic.forward_cached(&self.round.states[i], &mut cache)?;
                    let seed = (cache.output()[0] - returns[i]) / m;
                    self.critic.backward(&cache, &[seed], &mut g_critic, None)?;
                }
                self.critic.apply_gradient(&mut g_critic, self.config.max_grad_norm)?;
            }
        }
        self.round.clear();
        self.schedule.updates += 1;
        Ok(())
    }
}

impl Agent for PpoAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Ppo
    }

    fn select_action(&self, observation: &Observation, mode: ActionMode, rng: &mut Rng) -> Result<Action> {
        if mode == ActionMode::Warmup {
            return Ok(warmup_action(&self.action_spec, self.config.reset_action, rng));
        }
        let out = self.actor.forward(&observation.features(&self.observation_spec))?;
        match (&self.policy, &self.scaler) {
            (PpoPolicy::Categorical(_), _) => {
                let p = softmax(&out);
                Ok(Action::Discrete(if mode == ActionMode::Greedy {
                    argmax(&p)
                } else {
                    sample_categorical(&p, rng)
                }))
            }
            (PpoPolicy::Gaussian(_), Some(scaler)) => {
                let unit: Vec<f64> = if mode == ActionMode::Greedy {
                    out
                } else {
                    out.iter()
                        .zip(self.log_std.iter())
                        .map(|(m, ls)| {
                            let z: f64 = StandardNormal.sample(rng);
                            m + ls.exp() * z
                        })
                        .collect()
                };
                // The environment clips; the unclipped draw keeps log π exact.
                Ok(Action::Continuous(scaler.to_env(&unit)))
            }
            (PpoPolicy::Gaussian(_), None) => unreachable!("Gaussian policy always has a scaler"),
        }
    }

    fn observe(&mut self, transition: Transition) -> Result<()> {
        if self.estimator.mode() == CenteringMode::MovingAverage {
            self.estimator.moving_average_update(transition.reward)?;
        }
        let t = featurize(transition, &self.observation_spec);
        let stored = self.to_stored(&t.action)?;
        let state = vector(&t.state)?.to_vec();
        let out = self.actor.forward(&state)?;
        let log_prob = self.policy.terms(&out, &self.log_std, &stored)?.log_prob;
        self.round.states.push(state);
        self.round.actions.push(stored);
        self.round.old_log_probs.push(log_prob);
        self.round.rewards.push(t.reward);
        self.round.next_states.push(vector(&t.next_state)?.to_vec());
        self.schedule.steps += 1;
        if self.round.len() >= self.config.round_length {
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
        networks.insert("actor".to_string(), self.actor.clone());
        networks.insert("critic".to_string(), self.critic.clone());
        let mut tables = std::collections::BTreeMap::new();
        if !self.log_std.is_empty() {
            tables.insert("log_std".to_string(), vec![self.log_std.0.clone()]);
        }
        AgentCheckpoint {
            config: self.config.clone(),
            centering: self.estimator.config(),
            rbar: self.estimator.value(),
            steps: self.schedule.steps,
            networks,
            tables,
            scalars: Default::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::Preset;
    use crate::nn::Activation;
    use crate::rng::seeded;
    use rand::Rng as _;

    #[test]
    fn gae_lambda_zero_is_one_step() {
        let d = [1.0, -2.0, 0.5];
        assert_eq!(gae(&d, 0.9, 0.0), d.to_vec());
    }

    #[test]
    fn gae_lambda_one_gamma_one_sums_tail() {
        let d = [1.0, -2.0, 0.5];
        assert_eq!(gae(&d, 1.0, 1.0), vec![-0.5, -1.5, 0.5]);
    }

    #[test]
    fn surrogate_gradient_cases() {
        assert_eq!(clipped_surrogate_grad(1.0, 2.0, 0.2), -2.0);
        // positive advantage, ratio above 1 + ε: clipped
        assert_eq!(clipped_surrogate_grad(1.5, 2.0, 0.2), 0.0);
        // negative advantage, ratio above 1 + ε: unclipped term is the min
        assert_eq!(clipped_surrogate_grad(1.5, -2.0, 0.2), 3.0);
        // negative advantage, ratio below 1 − ε: clipped
        assert_eq!(clipped_surrogate_grad(0.5, -2.0, 0.2), 0.0);
    }

    fn random_round(rng: &mut Rng, n: usize, dim: usize, policy: &PpoPolicy) -> PpoBatch {
        let mut b = PpoBatch::default();
        for _ in 0..n {
            b.states.push((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            b.next_states.push((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            b.actions.push(match policy {
                PpoPolicy::Categorical(k) => Action::Discrete(rng.random_range(0..*k)),
                PpoPolicy::Gaussian(k) => Action::Continuous((0..*k).map(|_| rng.random_range(-1.0..1.0)).collect()),
            });
            b.rewards.push(rng.random_range(-1.0..1.0));
            b.old_log_probs.push(0.0);
        }
        b
    }

    #[test]
    fn unit_ratio_gives_vanilla_policy_gradient() {
        let mut rng = seeded(11);
        for policy in [PpoPolicy::Categorical(3), PpoPolicy::Gaussian(2)] {
            let spec = MlpSpec::with_hidden(4, &[6], policy.outputs(), Activation::Tanh).unwrap();
            let actor = Network::new(spec.clone(), 1e-3, &mut rng);
            let log_std = vec![-0.3; if matches!(policy, PpoPolicy::Gaussian(_)) { 2 } else { 0 }];
            let mut batch = random_round(&mut rng, 5, 4, &policy);
            for i in 0..5 {
                let out = actor.forward(&batch.states[i]).unwrap();
                batch.old_log_probs[i] = policy.terms(&out, &log_std, &batch.actions[i]).unwrap().log_prob;
            }
            let idx: Vec<usize> = (0..5).collect();
            let adv: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (g, g_ls) = ppo_policy_gradient(&policy, &actor, &log_std, &batch, &idx, &adv, 0.2, 0.0).unwrap();
            let mut manual = vec![0.0; g.len()];
            let mut manual_ls = vec![0.0; log_std.len()];
            for i in 0..5 {
                let out = actor.forward(&batch.states[i]).unwrap();
                let terms = policy.terms(&out, &log_std, &batch.actions[i]).unwrap();
                let pg = spec.gradient(&actor.params, &terms.d_logp, &batch.states[i]).unwrap();
                for (m, p) in manual.iter_mut().zip(pg.iter()) {
                    *m -= adv[i] * p / 5.0;
                }
                for (m, p) in manual_ls.iter_mut().zip(&terms.d_logp_log_std) {
                    *m -= adv[i] * p / 5.0;
                }
            }
            for (a, b) in g.iter().chain(&g_ls).zip(manual.iter().chain(&manual_ls)) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        let mut rng = seeded(12);
        for policy in [PpoPolicy::Categorical(3), PpoPolicy::Gaussian(2)] {
            let spec = MlpSpec::with_hidden(3, &[5], policy.outputs(), Activation::Tanh).unwrap();
            let actor = Network::new(spec.clone(), 1e-3, &mut rng);
            let log_std = vec![-0.2; if matches!(policy, PpoPolicy::Gaussian(_)) { 2 } else { 0 }];
            let mut batch = random_round(&mut rng, 6, 3, &policy);
            for lp in batch.old_log_probs.iter_mut() {
                *lp = rng.random_range(-2.5..-0.5);
            }
            let idx: Vec<usize> = (0..6).collect();
            let adv: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (clip, c_ent) = (0.2, 0.05);
            let loss = |p: &[f64]| -> f64 {
                idx.iter()
                    .map(|&i| {
                        let out = spec.forward(p, &batch.states[i]).unwrap();
                        let t = policy.terms(&out, &log_std, &batch.actions[i]).unwrap();
                        let r = (t.log_prob - batch.old_log_probs[i]).exp();
                        -(r * adv[i]).min(r.clamp(1.0 - clip, 1.0 + clip) * adv[i]) - c_ent * t.entropy
                    })
                    .sum::<f64>()
                    / 6.0
            };
            let (g, _) = ppo_policy_gradient(&policy, &actor, &log_std, &batch, &idx, &adv, clip, c_ent).unwrap();
            let h = 1e-6;
            for i in 0..g.len() {
                let mut p = actor.params.0.clone();
                p[i] += h;
                let up = loss(&p);
                p[i] -= 2.0 * h;
                let fd = (up - loss(&p)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6, "param {i}: {fd} vs {}", g[i]);
            }
        }
    }

    fn bandit_run(seed: u64) -> PpoAgent {
        let mut config = AgentConfig::preset(Algorithm::Ppo, Preset::Desk);
        config.hidden = vec![8];
        config.round_length = 64;
        config.minibatch_size = 16;
        config.epochs = 4;
        config.gamma = 0.0;
        config.actor_lr = 0.01;
        let obs = Space::new_box(vec![0.0], vec![1.0]).unwrap();
        let act = Space::discrete(2).unwrap();
        let mut agent = PpoAgent::new(config, RewardRateEstimator::off(), obs, act, &mut seeded(seed), seeded(seed + 1)).unwrap();
        let mut rng = seeded(seed + 2);
        let s = Observation::Vector(vec![1.0]);
        for _ in 0..64 * 15 {
            let a = agent.select_action(&s, ActionMode::Explore, &mut rng).unwrap();
            let r = if a == Action::Discrete(1) { 1.0 } else { 0.0 };
            agent
                .observe(Transition {
                    state: s.clone(),
                    action: a,
                    reward: r,
                    next_state: s.clone(),
                })
                .unwrap();
        }
        agent
    }

    #[test]
    fn bandit_prefers_the_paying_arm_and_is_reproducible() {
        let a = bandit_run(3);
        let b = bandit_run(3);
        assert_eq!(a.actor().params, b.actor().params);
        assert_eq!(a.critic().params, b.critic().params);
        assert_eq!(a.rounds(), 15);
        let p = softmax(&a.actor().forward(&[1.0]).unwrap());
        assert!(p[1] > 0.9, "{p:?}");
        assert!((a.critic().forward(&[1.0]).unwrap()[0] - p[1]).abs() < 0.2);
    }
}
