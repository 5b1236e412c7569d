use rand::Rng as _;

use super::{discrete, Agent, AgentCheckpoint, AgentConfig, ActionMode, Algorithm, RelativeF, Transition};
use crate::centering::{CenteringMode, RewardRateEstimator};
use crate::env::{sample_categorical, Action, Observation};
use crate::error::{Error, Result};
use crate::mdp::{argmax, TabularPolicy};
use crate::rng::Rng;

fn state_index(obs: &Observation, size: usize) -> Result<usize> {
    let s = obs
        .index()
        .ok_or_else(|| Error::InvalidParameter("tabular agents need discrete observations".into()))?;
    if s >= size {
        return Err(Error::IndexOutOfRange {
            context: "state",
            index: s,
            size,
        });
    }
    Ok(s)
}

fn action_index(action: &Action, size: usize) -> Result<usize> {
    let a = discrete(action)?;
    if a >= size {
        return Err(Error::IndexOutOfRange {
            context: "action",
            index: a,
            size,
        });
    }
    Ok(a)
}

/// Feeds the centered TD error (or raw reward) to the estimator after a
/// tabular update.
fn tabular_centering_step(estimator: &mut RewardRateEstimator, alpha: f64, delta: f64, reward: f64) -> Result<()> {
    match estimator.mode() {
        CenteringMode::Off => Ok(()),
        CenteringMode::TdBased => estimator.td_step(estimator.eta() * alpha, delta),
        CenteringMode::MovingAverage => estimator.moving_average_update(reward),
        CenteringMode::ReferenceStates => Err(Error::Config(
            "tabular reference-state centering is relative Q-learning; use relative_q".into(),
        )),
    }
}

/// One TD(0) step: `δ = R − R̄ + γV(S') − V(S)`, `V(S) += αδ`, then
/// `R̄ += ηαδ` under TD-based centering. Returns `δ`.
pub fn tabular_td0_update(
    values: &mut [f64],
    transition: &Transition,
    alpha: f64,
    gamma: f64,
    estimator: &mut RewardRateEstimator,
) -> Result<f64> {
    let s = state_index(&transition.state, values.len())?;
    let next = state_index(&transition.next_state, values.len())?;
    let delta = estimator.center_reward(transition.reward) + gamma * values[next] - values[s];
    values[s] += alpha * delta;
    tabular_centering_step(estimator, alpha, delta, transition.reward)?;
    Ok(delta)
}

/// One Q-learning step with `δ = R − R̄ + γ max_a Q(S', a) − Q(S, A)`.
pub fn tabular_q_update(
    q: &mut [Vec<f64>],
    transition: &Transition,
    alpha: f64,
    gamma: f64,
    estimator: &mut RewardRateEstimator,
) -> Result<f64> {
    let s = state_index(&transition.state, q.len())?;
    let next = state_index(&transition.next_state, q.len())?;
    let a = action_index(&transition.action, q[s].len())?;
    let best_next = q[next].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let delta = estimator.center_reward(transition.reward) + gamma * best_next - q[s][a];
    q[s][a] += alpha * delta;
    tabular_centering_step(estimator, alpha, delta, transition.reward)?;
    Ok(delta)
}

/// `f(Q)` for relative Q-learning.
pub fn relative_offset(q: &[Vec<f64>], f: &RelativeF) -> Result<f64> {
    let all = || q.iter().flatten().cloned();
    let count = q.iter().map(|row| row.len()).sum::<usize>();
    if count == 0 {
        return Err(Error::InvalidParameter("empty Q table".into()));
    }
    Ok(match f {
        RelativeF::MeanAll => all().sum::<f64>() / count as f64,
        RelativeF::MaxAll => all().fold(f64::NEG_INFINITY, f64::max),
        RelativeF::MinAll => all().fold(f64::INFINITY, f64::min),
        RelativeF::ReferenceSet(pairs) => {
            if pairs.is_empty() {
                return Err(Error::EmptyReferenceSet);
            }
            let mut total = 0.0;
            for &(s, a) in pairs {
                let row = q.get(s).ok_or(Error::IndexOutOfRange {
                    context: "reference state",
                    index: s,
                    size: q.len(),
                })?;
                total += *row.get(a).ok_or(Error::IndexOutOfRange {
                    context: "reference action",
                    index: a,
                    size: row.len(),
                })?;
            }
            total / pairs.len() as f64
        }
    })
}

/// `Q(S,A) += α(R − f(Q) + γ max_a Q(S',a) − Q(S,A))`. Returns the TD error.
pub fn relative_q_update(q: &mut [Vec<f64>], transition: &Transition, alpha: f64, gamma: f64, f: &RelativeF) -> Result<f64> {
    let s = state_index(&transition.state, q.len())?;
    let next = state_index(&transition.next_state, q.len())?;
    let a = action_index(&transition.action, q[s].len())?;
    let offset = relative_offset(q, f)?;
    let best_next = q[next].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let delta = transition.reward - offset + gamma * best_next - q[s][a];
    q[s][a] += alpha * delta;
    Ok(delta)
}

fn epsilon_greedy(q_row: &[f64], epsilon: f64, rng: &mut Rng) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..q_row.len())
    } else {
        argmax(q_row)
    }
}

fn q_select(q: &[Vec<f64>], obs: &Observation, mode: ActionMode, epsilon: f64, rng: &mut Rng) -> Result<Action> {
    let s = state_index(obs, q.len())?;
    let a = match mode {
        ActionMode::Warmup => rng.random_range(0..q[s].len()),
        ActionMode::Explore => epsilon_greedy(&q[s], epsilon, rng),
        ActionMode::Greedy => argmax(&q[s]),
    };
    Ok(Action::Discrete(a))
}

fn checkpoint(
    config: &AgentConfig,
    estimator: &RewardRateEstimator,
    steps: u64,
    name: &str,
    table: Vec<Vec<f64>>,
) -> AgentCheckpoint {
    AgentCheckpoint {
        config: config.clone(),
        centering: estimator.config(),
        rbar: estimator.value(),
        steps,
        networks: Default::default(),
        tables: [(name.to_string(), table)].into_iter().collect(),
        scalars: Default::default(),
    }
}

/// TD(0) prediction of a fixed behaviour policy.
#[derive(Debug, Clone)]
pub struct Td0Agent {
    config: AgentConfig,
    estimator: RewardRateEstimator,
    policy: TabularPolicy,
    values: Vec<f64>,
    steps: u64,
}

impl Td0Agent {
    pub fn new(config: AgentConfig, estimator: RewardRateEstimator, num_states: usize, num_actions: usize) -> Result<Self> {
        let policy = match &config.behavior_policy {
            Some(rows) => TabularPolicy::new(rows.clone())?,
            None => TabularPolicy::uniform(num_states, num_actions),
        };
        if policy.num_states() != num_states || policy.num_actions() != num_actions {
            return Err(Error::dims("behaviour policy states", num_states, policy.num_states()));
        }
        Ok(Self {
            config,
            estimator,
            policy,
            values: vec![0.0; num_states],
            steps: 0,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl Agent for Td0Agent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Td0
    }

    fn select_action(&self, observation: &Observation, mode: ActionMode, rng: &mut Rng) -> Result<Action> {
        let s = state_index(observation, self.values.len())?;
        let row = self.policy.row(s);
        Ok(Action::Discrete(match mode {
            ActionMode::Greedy => argmax(row),
            _ => sample_categorical(row, rng),
        }))
    }

    fn observe(&mut self, transition: Transition) -> Result<()> {
        let alpha = self.config.alpha_at(self.steps);
        tabular_td0_update(&mut self.values, &transition, alpha, self.config.gamma, &mut self.estimator)?;
        self.steps += 1;
        Ok(())
    }

    fn rbar(&self) -> Option<f64> {
        self.estimator.value()
    }

    fn estimator(&self) -> &RewardRateEstimator {
        &self.estimator
    }

    fn steps(&self) -> u64 {
        self.steps
    }

    fn checkpoint(&self) -> AgentCheckpoint {
        checkpoint(&self.config, &self.estimator, self.steps, "v", vec![self.values.clone()])
    }
}

/// ε-greedy tabular Q-learning.
#[derive(Debug, Clone)]
pub struct QLearningAgent {
    config: AgentConfig,
    estimator: RewardRateEstimator,
    q: Vec<Vec<f64>>,
    steps: u64,
}

impl QLearningAgent {
    pub fn new(config: AgentConfig, estimator: RewardRateEstimator, num_states: usize, num_actions: usize) -> Result<Self> {
        if estimator.mode() == CenteringMode::ReferenceStates {
            return Err(Error::Config(
                "tabular reference-state centering is relative Q-learning; use relative_q".into(),
            ));
        }
        Ok(Self {
            config,
            estimator,
            q: vec![vec![0.0; num_actions]; num_states],
            steps: 0,
        })
    }

    pub fn q_table(&self) -> &[Vec<f64>] {
        &self.q
    }
}

impl Agent for QLearningAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::QLearning
    }

    fn select_action(&self, observation: &Observation, mode: ActionMode, rng: &mut Rng) -> Result<Action> {
        q_select(&self.q, observation, mode, self.config.epsilon(self.steps), rng)
    }

    fn observe(&mut self, transition: Transition) -> Result<()> {
        let alpha = self.config.alpha_at(self.steps);
        tabular_q_update(&mut self.q, &transition, alpha, self.config.gamma, &mut self.estimator)?;
        self.steps += 1;
        Ok(())
    }

    fn rbar(&self) -> Option<f64> {
        self.estimator.value()
    }

    fn estimator(&self) -> &RewardRateEstimator {
        &self.estimator
    }

    fn steps(&self) -> u64 {
        self.steps
    }

    fn checkpoint(&self) -> AgentCheckpoint {
        checkpoint(&self.config, &self.estimator, self.steps, "q", self.q.clone())
    }
}

/// Relative Q-learning with a fixed offset function `f`.
#[derive(Debug, Clone)]
pub struct RelativeQAgent {
    config: AgentConfig,
    estimator: RewardRateEstimator,
    q: Vec<Vec<f64>>,
    steps: u64,
}

impl RelativeQAgent {
    pub fn new(config: AgentConfig, num_states: usize, num_actions: usize) -> Result<Self> {
        let q = vec![vec![0.0; num_actions]; num_states];
        relative_offset(&q, &config.relative_f)?;
        Ok(Self {
            config,
            estimator: RewardRateEstimator::off(),
            q,
            steps: 0,
        })
    }

    pub fn q_table(&self) -> &[Vec<f64>] {
        &self.q
    }

    /// Current `f(Q)`.
    pub fn offset(&self) -> f64 {
        relative_offset(&self.q, &self.config.relative_f).unwrap_or(f64::NAN)
    }
}

impl Agent for RelativeQAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::RelativeQ
    }

    fn select_action(&self, observation: &Observation, mode: ActionMode, rng: &mut Rng) -> Result<Action> {
        q_select(&self.q, observation, mode, self.config.epsilon(self.steps), rng)
    }

    fn observe(&mut self, transition: Transition) -> Result<()> {
        let alpha = self.config.alpha_at(self.steps);
        relative_q_update(&mut self.q, &transition, alpha, self.config.gamma, &self.config.relative_f)?;
        self.steps += 1;
        Ok(())
    }

    /// Reports `f(Q)` in the `r̄` slot of logs.
    fn rbar(&self) -> Option<f64> {
        Some(self.offset())
    }

    fn estimator(&self) -> &RewardRateEstimator {
        &self.estimator
    }

    fn steps(&self) -> u64 {
        self.steps
    }

    fn checkpoint(&self) -> AgentCheckpoint {
        let mut c = checkpoint(&self.config, &self.estimator, self.steps, "q", self.q.clone());
        c.rbar = Some(self.offset());
        c
    }
}
