//! Learning agents. Every agent computes its TD errors through a
//! [`RewardRateEstimator`], so centering plugs in the same way everywhere.
//!
//! Agents never see a termination flag: every bootstrap target is
//! `γ · value(next state)`.

mod config;
mod dist;
mod dqn;
mod deterministic;
mod ppo;
mod replay;
mod sac;
mod sac_discrete;
mod tabular;

pub use config::{AgentConfig, AgentOverrides, Algorithm, Preset, RelativeF};
pub use dist::{gaussian_log_prob, log_softmax, softmax};
pub use dqn::{dqn_loss_gradient, dqn_update, DqnAgent};
pub use deterministic::{
    ddpg_actor_gradient, ddpg_critic_gradient, ddpg_update, td3_target_action, td3_update, DeterministicAgent,
    DeterministicNets,
};
pub use ppo::{clipped_surrogate_grad, gae, ppo_policy_gradient, PpoAgent, PpoBatch, PpoPolicy};
pub use replay::ReplayBuffer;
pub use sac::{
    sac_actor_output_grad, sac_continuous_update, sac_entropy_loss_grad, squashed_sample, SacAgent, SacNets, SquashedSample,
};
pub use sac_discrete::{sac_discrete_actor_logit_grad, sac_discrete_target, sac_discrete_update, SacDiscreteAgent, SacDiscreteNets};
pub use tabular::{relative_offset, relative_q_update, tabular_q_update, tabular_td0_update, QLearningAgent, RelativeQAgent, Td0Agent};

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::centering::{CenteringConfig, RewardRateEstimator};
use crate::env::{Action, ActionSpec, Observation, ObservationSpec, Space};
use crate::error::{ensure_finite, Error, Result};
use crate::nn::Network;
use crate::rng::{self, Rng, Stream};

/// One `(s, a, r, s')` record. There is deliberately no termination mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_state: Observation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// Uniform over the action space (reset-biased when configured).
    Warmup,
    Explore,
    Greedy,
}

/// Per-sample TD errors from one update.
#[derive(Debug, Clone, PartialEq)]
pub struct TDErrorBatch {
    deltas: Vec<f64>,
}

impl TDErrorBatch {
    pub fn new(deltas: Vec<f64>) -> Result<Self> {
        ensure_finite(&deltas, "TD error")?;
        Ok(Self { deltas })
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.deltas.is_empty() {
            0.0
        } else {
            self.deltas.iter().sum::<f64>() / self.deltas.len() as f64
        }
    }
}

/// Serialised agent state. Replay contents are not saved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub config: AgentConfig,
    pub centering: CenteringConfig,
    pub rbar: Option<f64>,
    pub steps: u64,
    #[serde(default)]
    pub networks: BTreeMap<String, Network>,
    #[serde(default)]
    pub tables: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
}

pub trait Agent: Send {
    fn algorithm(&self) -> Algorithm;

    /// `Warmup` and `Explore` may draw from `rng`; `Greedy` never does.
    fn select_action(&self, observation: &Observation, mode: ActionMode, rng: &mut Rng) -> Result<Action>;

    /// Consumes one environment transition and learns on the agent's own
    /// schedule.
    fn observe(&mut self, transition: Transition) -> Result<()>;

    /// Current `r̄`, if centering is on.
    fn rbar(&self) -> Option<f64>;

    fn estimator(&self) -> &RewardRateEstimator;

    /// Environment steps consumed so far.
    fn steps(&self) -> u64;

    fn checkpoint(&self) -> AgentCheckpoint;
}

/// Builds the agent named in `config` for the given spaces. Weights come
/// from the initialization stream of `seed`, minibatches from its replay
/// stream.
pub fn build_agent(
    config: &AgentConfig,
    centering: &CenteringConfig,
    observation_spec: &ObservationSpec,
    action_spec: &ActionSpec,
    seed: u64,
) -> Result<Box<dyn Agent>> {
    config.validate(centering)?;
    let estimator = RewardRateEstimator::new(centering)?;
    let mut init = rng::stream(seed, Stream::Initialization);
    let replay = rng::stream(seed, Stream::ReplaySampling);
    let need_discrete_actions = || {
        action_spec
            .is_discrete()
            .then(|| action_spec.size())
            .ok_or_else(|| Error::Config(format!("{} needs a discrete action space", config.algorithm.name())))
    };
    let need_discrete_states = || {
        observation_spec
            .is_discrete()
            .then(|| observation_spec.size())
            .ok_or_else(|| Error::Config(format!("{} needs a discrete observation space", config.algorithm.name())))
    };
    Ok(match config.algorithm {
        Algorithm::Td0 => Box::new(Td0Agent::new(config.clone(), estimator, need_discrete_states()?, need_discrete_actions()?)?),
        Algorithm::QLearning => Box::new(QLearningAgent::new(
            config.clone(),
            estimator,
            need_discrete_states()?,
            need_discrete_actions()?,
        )?),
        Algorithm::RelativeQ => Box::new(RelativeQAgent::new(config.clone(), need_discrete_states()?, need_discrete_actions()?)?),
        Algorithm::Dqn => Box::new(DqnAgent::new(
            config.clone(),
            estimator,
            observation_spec.clone(),
            need_discrete_actions()?,
            &mut init,
            replay,
        )?),
        Algorithm::Ddpg | Algorithm::Td3 => Box::new(DeterministicAgent::new(
            config.clone(),
            estimator,
            observation_spec.clone(),
            action_spec.clone(),
            &mut init,
            replay,
        )?),
        Algorithm::Sac => Box::new(SacAgent::new(
            config.clone(),
            estimator,
            observation_spec.clone(),
            action_spec.clone(),
            &mut init,
            replay,
        )?),
        Algorithm::SacDiscrete => Box::new(SacDiscreteAgent::new(
            config.clone(),
            estimator,
            observation_spec.clone(),
            need_discrete_actions()?,
            &mut init,
            replay,
        )?),
        Algorithm::Ppo => Box::new(PpoAgent::new(
            config.clone(),
            estimator,
            observation_spec.clone(),
            action_spec.clone(),
            &mut init,
            replay,
        )?),
    })
}

/// Reset probability drawn by the reset-biased warmup policy: `1/N` with
/// `N` uniform on `1..=1000`.
pub fn reset_biased_probability(rng: &mut Rng) -> f64 {
    1.0 / rng.random_range(1..=1000u32) as f64
}

/// Uniform action, with the trailing element replaced by
/// [`reset_biased_probability`] when `reset_action` is set.
pub fn warmup_action(spec: &ActionSpec, reset_action: bool, rng: &mut Rng) -> Action {
    let mut action = spec.sample(rng);
    if reset_action {
        if let Action::Continuous(v) = &mut action {
            if let Some(last) = v.last_mut() {
                *last = reset_biased_probability(rng);
            }
        }
    }
    action
}

/// Affine map between a box action space and `[-1, 1]^d`. Unbounded
/// dimensions pass through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionScaler {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl ActionScaler {
    pub fn new(spec: &ActionSpec) -> Result<Self> {
        match spec {
            Space::Box { low, high } => Ok(Self {
                low: low.clone(),
                high: high.clone(),
            }),
            Space::Discrete(_) => Err(Error::Config("continuous-action agent needs a box action space".into())),
        }
    }

    pub fn dims(&self) -> usize {
        self.low.len()
    }

    fn bounded(&self, k: usize) -> bool {
        self.low[k].is_finite() && self.high[k].is_finite()
    }

    /// Half the width of dimension `k` (1 when unbounded).
    pub fn half_range(&self, k: usize) -> f64 {
        if self.bounded(k) {
            0.5 * (self.high[k] - self.low[k])
        } else {
            1.0
        }
    }

    pub fn to_env(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .enumerate()
            .map(|(k, u)| {
                if self.bounded(k) {
                    self.low[k] + (u + 1.0) * self.half_range(k)
                } else {
                    *u
                }
            })
            .collect()
    }

    pub fn to_unit(&self, env: &[f64]) -> Vec<f64> {
        env.iter()
            .enumerate()
            .map(|(k, a)| {
                if self.bounded(k) {
                    (a - self.low[k]) / self.half_range(k) - 1.0
                } else {
                    *a
                }
            })
            .collect()
    }

    pub fn clip_env(&self, env: &mut [f64]) {
        for (k, a) in env.iter_mut().enumerate() {
            *a = a.clamp(self.low[k], self.high[k]);
        }
    }
}

pub(crate) fn vector(obs: &Observation) -> Result<&[f64]> {
    obs.as_vector()
        .ok_or_else(|| Error::InvalidParameter("expected a feature-vector observation".into()))
}

pub(crate) fn continuous(action: &Action) -> Result<&[f64]> {
    action
        .as_slice()
        .ok_or_else(|| Error::InvalidAction("expected a continuous action".into()))
}

pub(crate) fn discrete(action: &Action) -> Result<usize> {
    action
        .index()
        .ok_or_else(|| Error::InvalidAction("expected a discrete action".into()))
}

/// `[state, action]` critic input.
pub(crate) fn concat(state: &[f64], action: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(state.len() + action.len());
    x.extend_from_slice(state);
    x.extend_from_slice(action);
    x
}

/// Replaces the observations by their feature vectors so replay stores
/// network inputs directly.
pub(crate) fn featurize(transition: Transition, spec: &ObservationSpec) -> Transition {
    let to_vec = |o: Observation| match o {
        v @ Observation::Vector(_) => v,
        d => Observation::Vector(d.features(spec)),
    };
    Transition {
        state: to_vec(transition.state),
        action: transition.action,
        reward: transition.reward,
        next_state: to_vec(transition.next_state),
    }
}

/// Shared replay-based learning schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub(crate) struct Schedule {
    pub steps: u64,
    pub updates: u64,
}

impl Schedule {
    /// Counts a step and reports whether an update is due.
    pub fn tick(&mut self, config: &AgentConfig, buffered: usize) -> bool {
        self.steps += 1;
        self.steps >= config.learning_starts.max(1)
            && self.steps % config.train_every == 0
            && buffered >= config.batch_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn reset_biased_mean_matches_harmonic_number() {
        let mut rng = seeded(5);
        let n = 200_000;
        let h: f64 = (1..=1000).map(|k| 1.0 / k as f64).sum::<f64>() / 1000.0;
        let second: f64 = (1..=1000).map(|k| 1.0 / (k * k) as f64).sum::<f64>() / 1000.0;
        let sd = (second - h * h).sqrt();
        let mean = (0..n).map(|_| reset_biased_probability(&mut rng)).sum::<f64>() / n as f64;
        assert!((h - 0.007485).abs() < 1e-6);
        assert!((mean - h).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn warmup_only_biases_trailing_element() {
        let spec = Space::new_box(vec![-2.0, 0.0], vec![2.0, 1.0]).unwrap();
        let mut rng = seeded(1);
        for _ in 0..100 {
            let a = warmup_action(&spec, true, &mut rng);
            let v = a.as_slice().unwrap();
            assert!((-2.0..=2.0).contains(&v[0]));
            let n = 1.0 / v[1];
            assert!((n - n.round()).abs() < 1e-9 && (1.0..=1000.0).contains(&n));
        }
    }

    #[test]
    fn scaler_round_trip() {
        let spec = Space::new_box(vec![-2.0, 0.0], vec![2.0, 1.0]).unwrap();
        let s = ActionScaler::new(&spec).unwrap();
        assert_eq!(s.to_env(&[-1.0, 1.0]), vec![-2.0, 1.0]);
        assert_eq!(s.to_env(&[0.0, 0.0]), vec![0.0, 0.5]);
        let back = s.to_unit(&[1.0, 0.25]);
        assert!((back[0] - 0.5).abs() < 1e-15 && (back[1] + 0.5).abs() < 1e-15);
        assert!(ActionScaler::new(&Space::Discrete(3)).is_err());
    }

    #[test]
    fn td_error_batch_rejects_nan() {
        assert!(TDErrorBatch::new(vec![1.0, f64::NAN]).is_err());
        assert_eq!(TDErrorBatch::new(vec![1.0, 3.0]).unwrap().mean(), 2.0);
    }
}
