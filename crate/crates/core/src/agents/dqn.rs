use rand::Rng as _;

use super::{
    discrete, featurize, vector, Agent, AgentCheckpoint, AgentConfig, ActionMode, Algorithm, ReplayBuffer, Schedule,
    TDErrorBatch, Transition,
};
use crate::centering::{reference_state_value, CenteringMode, ReferencePair, ReferenceSet, RewardRateEstimator};
use crate::env::{Action, Observation, ObservationSpec};
use crate::error::{Error, Result};
use crate::mdp::argmax;
use crate::nn::{target_sync, ForwardCache, MlpSpec, Network, ParamVector, SyncMode};
use crate::rng::Rng;

/// Gradient of `(1/2n) Σ (y_i − q_w(s_i, a_i))²` with the targets
/// `y_i = r_i − r̄ + γ max_a q_ŵ(s'_i, a)` held fixed, together with the
/// centered TD errors `δ_i = y_i − q_w(s_i, a_i)`.
///
/// States in `batch` must already be feature vectors.
pub fn dqn_loss_gradient(
    online: &Network,
    target_params: &[f64],
    batch: &[&Transition],
    gamma: f64,
    estimator: &RewardRateEstimator,
) -> Result<(Vec<f64>, TDErrorBatch)> {
    let n = batch.len() as f64;
    let outputs = online.spec.output_dim();
    let mut grad = online.zero_grad();
    let mut cache = ForwardCache::default();
    let mut seed = vec![0.0; outputs];
    let mut deltas = Vec::with_capacity(batch.len());
    for t in batch {
        let next = online.spec.forward(target_params, vector(&t.next_state)?)?;
        let best = next.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        online.forward_cached(vector(&t.state)?, &mut cache)?;
        let a = discrete(&t.action)?;
        let q = *cache.output().get(a).ok_or(Error::IndexOutOfRange {
            context: "DQN action",
            index: a,
            size: outputs,
        })?;
        let delta = estimator.center_reward(t.reward) + gamma * best - q;
        seed.fill(0.0);
        seed[a] = -delta / n;
        online.backward(&cache, &seed, &mut grad, None)?;
        deltas.push(delta);
    }
    Ok((grad, TDErrorBatch::new(deltas)?))
}

/// One semi-gradient step through Adam, followed by the TD-based `r̄`
/// update from the same centered errors.
pub fn dqn_update(
    online: &mut Network,
    target_params: &[f64],
    batch: &[&Transition],
    gamma: f64,
    estimator: &mut RewardRateEstimator,
    clip_norm: Option<f64>,
) -> Result<TDErrorBatch> {
    let (mut grad, deltas) = dqn_loss_gradient(online, target_params, batch, gamma, estimator)?;
    online.apply_gradient(&mut grad, clip_norm)?;
    if estimator.mode() == CenteringMode::TdBased {
        estimator.td_based_update(deltas.deltas())?;
    }
    Ok(deltas)
}

/// Mean online `q(s, a)` over the reference set.
fn reference_value(online: &Network, set: &ReferenceSet) -> Result<f64> {
    let mut values = Vec::with_capacity(set.len());
    for pair in set.pairs() {
        let q = online.forward(&pair.state)?;
        let a = pair
            .action
            .as_ref()
            .and_then(Action::index)
            .ok_or_else(|| Error::InvalidParameter("DQN reference pairs need discrete actions".into()))?;
        values.push(q[a]);
    }
    reference_state_value(&values, None)
}

/// Draws the reference set from replay (once) and refreshes `f(q)`.
pub(crate) fn refresh_reference(
    estimator: &mut RewardRateEstimator,
    replay: &ReplayBuffer,
    size: usize,
    rng: &mut Rng,
    value: impl Fn(&ReferenceSet) -> Result<f64>,
) -> Result<()> {
    if estimator.mode() != CenteringMode::ReferenceStates {
        return Ok(());
    }
    if estimator.reference_set().is_none() {
        let pool: Vec<ReferencePair> = replay
            .iter()
            .map(|t| ReferencePair {
                state: t.state.as_vector().map(<[f64]>::to_vec).unwrap_or_default(),
                action: Some(t.action.clone()),
            })
            .collect();
        estimator.set_reference_set(ReferenceSet::sample(&pool, size, rng)?)?;
    }
    let f = value(estimator.reference_set().expect("set above"))?;
    estimator.set_reference_value(f)
}

/// DQN with experience replay, ε-greedy behaviour and a hard-synced target.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    config: AgentConfig,
    estimator: RewardRateEstimator,
    observation_spec: ObservationSpec,
    num_actions: usize,
    online: Network,
    target: ParamVector,
    replay: ReplayBuffer,
    rng: Rng,
    schedule: Schedule,
}

impl DqnAgent {
    pub fn new(
        config: AgentConfig,
        estimator: RewardRateEstimator,
        observation_spec: ObservationSpec,
        num_actions: usize,
        init: &mut Rng,
        replay_rng: Rng,
    ) -> Result<Self> {
        let spec = MlpSpec::with_hidden(observation_spec.flat_dim(), &config.hidden, num_actions, config.activation)?;
        let online = Network::new(spec, config.critic_lr, init);
        let target = online.params.clone();
        let replay = ReplayBuffer::new(config.buffer_capacity)?;
        Ok(Self {
            config,
            estimator,
            observation_spec,
            num_actions,
            online,
            target,
            replay,
            rng: replay_rng,
            schedule: Schedule::default(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.online
    }

    pub fn target_params(&self) -> &[f64] {
        &self.target
    }

    pub fn q_values(&self, observation: &Observation) -> Result<Vec<f64>> {
        self.online.forward(&observation.features(&self.observation_spec))
    }

    pub fn updates(&self) -> u64 {
        self.schedule.updates
    }

    fn learn(&mut self) -> Result<()> {
        let online = &self.online;
        refresh_reference(&mut self.estimator, &self.replay, self.config.batch_size, &mut self.rng, |set| {
            reference_value(online, set)
        })?;
        let batch = self.replay.sample(self.config.batch_size, &mut self.rng)?;
        dqn_update(
            &mut self.online,
            &self.target,
            &batch,
            self.config.gamma,
            &mut self.estimator,
            self.config.max_grad_norm,
        )?;
        self.schedule.updates += 1;
        Ok(())
    }
}

impl Agent for DqnAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Dqn
    }

    fn select_action(&self, observation: &Observation, mode: ActionMode, rng: &mut Rng) -> Result<Action> {
        let explore = match mode {
            ActionMode::Warmup => true,
            ActionMode::Explore => rng.random::<f64>() < self.config.epsilon(self.schedule.steps),
            ActionMode::Greedy => false,
        };
        if explore {
            return Ok(Action::Discrete(rng.random_range(0..self.num_actions)));
        }
        Ok(Action::Discrete(argmax(&self.q_values(observation)?)))
    }

    fn observe(&mut self, transition: Transition) -> Result<()> {
        if self.estimator.mode() == CenteringMode::MovingAverage {
            self.estimator.moving_average_update(transition.reward)?;
        }
        self.replay.push(featurize(transition, &self.observation_spec));
        if self.schedule.tick(&self.config, self.replay.len()) {
            self.learn().map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {}", self.schedule.steps)),
                other => other,
            })?;
        }
        if self.schedule.steps % self.config.target_update_interval == 0 {
            target_sync(&mut self.target, &self.online.params, SyncMode::Hard)?;
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
        let mut target = self.online.clone();
        target.params = self.target.clone();
        AgentCheckpoint {
            config: self.config.clone(),
            centering: self.estimator.config(),
            rbar: self.estimator.value(),
            steps: self.schedule.steps,
            networks: [("q".to_string(), self.online.clone()), ("q_target".to_string(), target)]
                .into_iter()
                .collect(),
            tables: Default::default(),
            scalars: Default::default(),
        }
    }
}
