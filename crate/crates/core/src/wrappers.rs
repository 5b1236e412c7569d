//! Environment transformations for continuing-task scenarios.
//!
//! Wrappers compose outside-in: the outermost wrapper sees the rewards and
//! observations emitted by everything beneath it. Each wrapper that flips
//! coins or samples initial states owns its own rng stream, separate from
//! the base dynamics.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng as _;

use crate::env::{wrap_angle, Action, ActionSpec, EnvStep, Environment, Observation, ObservationSpec, Space};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Default penalty charged by a reset transition.
pub const DEFAULT_RESET_COST: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResetConfig {
    /// Subtracted from the reward of the resetting step.
    pub reset_cost: f64,
}

impl Default for ResetConfig {
    fn default() -> Self {
        Self {
            reset_cost: DEFAULT_RESET_COST,
        }
    }
}

impl ResetConfig {
    pub fn new(reset_cost: f64) -> Result<Self> {
        if !(reset_cost.is_finite() && reset_cost >= 0.0) {
            return Err(Error::InvalidParameter(format!("reset cost {reset_cost} must be finite and >= 0")));
        }
        Ok(Self { reset_cost })
    }
}

/// Marks states that trigger a reset.
#[derive(Clone)]
pub struct FailurePredicate(Arc<dyn Fn(&Observation) -> bool + Send + Sync>);

impl FailurePredicate {
    pub fn new(f: impl Fn(&Observation) -> bool + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    /// Tabular failure set.
    pub fn states(states: Vec<usize>) -> Self {
        Self::new(move |obs| obs.index().is_some_and(|s| states.contains(&s)))
    }

    /// Fails when the wrapped angle at `index` exceeds `limit` in magnitude.
    pub fn angle_beyond(index: usize, limit: f64) -> Self {
        Self::new(move |obs| {
            obs.as_vector()
                .and_then(|v| v.get(index))
                .is_some_and(|x| wrap_angle(*x).abs() > limit)
        })
    }

    pub fn never() -> Self {
        Self::new(|_| false)
    }

    pub fn holds(&self, obs: &Observation) -> bool {
        (self.0)(obs)
    }
}

impl std::fmt::Debug for FailurePredicate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FailurePredicate(..)")
    }
}

/// With probability `p` per step, the next state is replaced by an initial
/// state sample. No cost is charged.
#[derive(Debug)]
pub struct RandomReset<E> {
    inner: E,
    p: f64,
    rng: Rng,
}

pub fn random_reset_wrap<E: Environment>(inner: E, p: f64, rng: Rng) -> Result<RandomReset<E>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("reset probability {p} outside [0, 1]")));
    }
    Ok(RandomReset { inner, p, rng })
}

impl<E: Environment> Environment for RandomReset<E> {
    fn observation_spec(&self) -> ObservationSpec {
        self.inner.observation_spec()
    }

    fn action_spec(&self) -> ActionSpec {
        self.inner.action_spec()
    }

    fn observation(&self) -> Observation {
        self.inner.observation()
    }

    fn sample_initial(&mut self, rng: &mut Rng) -> Observation {
        self.inner.sample_initial(rng)
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let mut step = self.inner.step(action)?;
        if self.rng.random::<f64>() < self.p {
            step.observation = self.inner.sample_initial(&mut self.rng);
            step.reset_occurred = true;
        }
        Ok(step)
    }

    fn passive_action(&self) -> Action {
        self.inner.passive_action()
    }
}

/// Resets after any step that lands in a failure state, charging the reset
/// cost on that same step. The stored transition is an ordinary
/// `(s, a, r - cost, s0')` record.
#[derive(Debug)]
pub struct ResetAsTransition<E> {
    inner: E,
    failure: FailurePredicate,
    config: ResetConfig,
    rng: Rng,
}

pub fn reset_as_transition_wrap<E: Environment>(
    inner: E,
    failure: FailurePredicate,
    config: ResetConfig,
    rng: Rng,
) -> Result<ResetAsTransition<E>> {
    ResetConfig::new(config.reset_cost)?;
    Ok(ResetAsTransition {
        inner,
        failure,
        config,
        rng,
    })
}

impl<E: Environment> Environment for ResetAsTransition<E> {
    fn observation_spec(&self) -> ObservationSpec {
        self.inner.observation_spec()
    }

    fn action_spec(&self) -> ActionSpec {
        self.inner.action_spec()
    }

    fn observation(&self) -> Observation {
        self.inner.observation()
    }

    fn sample_initial(&mut self, rng: &mut Rng) -> Observation {
        self.inner.sample_initial(rng)
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let mut step = self.inner.step(action)?;
        if self.failure.holds(&step.observation) {
            step.observation = self.inner.sample_initial(&mut self.rng);
            step.reward -= self.config.reset_cost;
            step.reset_occurred = true;
        }
        Ok(step)
    }

    fn passive_action(&self) -> Action {
        self.inner.passive_action()
    }
}

/// Adds a trailing action dimension in `[0, 1]` read as the probability of
/// resetting on this step. A reset skips the base dynamics entirely and
/// pays `-reset_cost`.
#[derive(Debug)]
pub struct AgentControlledReset<E> {
    inner: E,
    config: ResetConfig,
    rng: Rng,
    base_dims: usize,
    clipped: u64,
}

pub fn agent_controlled_reset_wrap<E: Environment>(
    inner: E,
    config: ResetConfig,
    rng: Rng,
) -> Result<AgentControlledReset<E>> {
    ResetConfig::new(config.reset_cost)?;
    let base_dims = match inner.action_spec() {
        Space::Box { low, .. } => low.len(),
        Space::Discrete(_) => {
            return Err(Error::InvalidParameter(
                "agent-controlled resets need a box action space".into(),
            ))
        }
    };
    Ok(AgentControlledReset {
        inner,
        config,
        rng,
        base_dims,
        clipped: 0,
    })
}

impl<E> AgentControlledReset<E> {
    /// Number of steps whose reset probability had to be clipped.
    pub fn clipped_count(&self) -> u64 {
        self.clipped
    }
}

impl<E: Environment> Environment for AgentControlledReset<E> {
    fn observation_spec(&self) -> ObservationSpec {
        self.inner.observation_spec()
    }

    fn action_spec(&self) -> ActionSpec {
        match self.inner.action_spec() {
            Space::Box { mut low, mut high } => {
                low.push(0.0);
                high.push(1.0);
                Space::Box { low, high }
            }
            discrete => discrete,
        }
    }

    fn observation(&self) -> Observation {
        self.inner.observation()
    }

    fn sample_initial(&mut self, rng: &mut Rng) -> Observation {
        self.inner.sample_initial(rng)
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let values = match action {
            Action::Continuous(v) if v.len() == self.base_dims + 1 => v,
            _ => {
                return Err(Error::InvalidAction(format!(
                    "expected {} continuous action elements",
                    self.base_dims + 1
                )))
            }
        };
        let raw = values[self.base_dims];
        if !raw.is_finite() {
            return Err(Error::NonFinite("reset probability".into()));
        }
        let p = raw.clamp(0.0, 1.0);
        if p != raw {
            if self.clipped == 0 {
                log::warn!("reset probability {raw} clipped to [0, 1]");
            }
            self.clipped += 1;
        }
        if self.rng.random::<f64>() < p {
            let observation = self.inner.sample_initial(&mut self.rng);
            return Ok(EnvStep {
                observation,
                reward: -self.config.reset_cost,
                reset_occurred: true,
            });
        }
        self.inner.step(&Action::Continuous(values[..self.base_dims].to_vec()))
    }

    fn passive_action(&self) -> Action {
        match self.inner.passive_action() {
            Action::Continuous(mut v) => {
                v.push(0.0);
                Action::Continuous(v)
            }
            other => other,
        }
    }
}

/// Adds a constant `c` to every emitted reward.
#[derive(Debug)]
pub struct RewardOffset<E> {
    inner: E,
    offset: f64,
}

pub fn reward_offset_wrap<E: Environment>(inner: E, offset: f64) -> Result<RewardOffset<E>> {
    if !offset.is_finite() {
        return Err(Error::InvalidParameter("reward offset must be finite".into()));
    }
    Ok(RewardOffset { inner, offset })
}

impl<E: Environment> Environment for RewardOffset<E> {
    fn observation_spec(&self) -> ObservationSpec {
        self.inner.observation_spec()
    }

    fn action_spec(&self) -> ActionSpec {
        self.inner.action_spec()
    }

    fn observation(&self) -> Observation {
        self.inner.observation()
    }

    fn sample_initial(&mut self, rng: &mut Rng) -> Observation {
        self.inner.sample_initial(rng)
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let mut step = self.inner.step(action)?;
        step.reward += self.offset;
        Ok(step)
    }

    fn passive_action(&self) -> Action {
        self.inner.passive_action()
    }
}

/// How [`angle_wrap`] maps an angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleWrapMode {
    /// `x mod 2π − π`. Shifts the angle by π as well as wrapping it.
    #[default]
    Literal,
    /// `(x + π) mod 2π − π`. Wraps without shifting.
    Centered,
}

/// Applies the wrap to each flagged element. Results lie in `[-π, π)`.
pub fn angle_wrap(observation: &[f64], angle_indices: &[usize], mode: AngleWrapMode) -> Result<Vec<f64>> {
    let mut out = observation.to_vec();
    for &i in angle_indices {
        let x = *out.get(i).ok_or(Error::IndexOutOfRange {
            context: "angle index",
            index: i,
            size: observation.len(),
        })?;
        out[i] = match mode {
            AngleWrapMode::Literal => x.rem_euclid(2.0 * PI) - PI,
            AngleWrapMode::Centered => wrap_angle(x),
        };
    }
    Ok(out)
}

/// Observation wrapper applying [`angle_wrap`].
#[derive(Debug)]
pub struct AngleWrap<E> {
    inner: E,
    indices: Vec<usize>,
    mode: AngleWrapMode,
}

pub fn angle_wrap_env<E: Environment>(inner: E, indices: Vec<usize>, mode: AngleWrapMode) -> Result<AngleWrap<E>> {
    let dims = inner.observation_spec().size();
    if let Some(&bad) = indices.iter().find(|&&i| i >= dims) {
        return Err(Error::IndexOutOfRange {
            context: "angle index",
            index: bad,
            size: dims,
        });
    }
    if inner.observation_spec().is_discrete() {
        return Err(Error::InvalidParameter("angle wrapping needs vector observations".into()));
    }
    Ok(AngleWrap { inner, indices, mode })
}

impl<E: Environment> AngleWrap<E> {
    fn transform(&self, obs: Observation) -> Observation {
        match obs {
            Observation::Vector(v) => Observation::Vector(
                angle_wrap(&v, &self.indices, self.mode).expect("indices validated at construction"),
            ),
            other => other,
        }
    }
}

impl<E: Environment> Environment for AngleWrap<E> {
    fn observation_spec(&self) -> ObservationSpec {
        match self.inner.observation_spec() {
            Space::Box { mut low, mut high } => {
                for &i in &self.indices {
                    low[i] = -PI;
                    high[i] = PI;
                }
                Space::Box { low, high }
            }
            other => other,
        }
    }

    fn action_spec(&self) -> ActionSpec {
        self.inner.action_spec()
    }

    fn observation(&self) -> Observation {
        self.transform(self.inner.observation())
    }

    fn sample_initial(&mut self, rng: &mut Rng) -> Observation {
        let obs = self.inner.sample_initial(rng);
        self.transform(obs)
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let mut step = self.inner.step(action)?;
        step.observation = self.transform(step.observation);
        Ok(step)
    }

    fn passive_action(&self) -> Action {
        self.inner.passive_action()
    }
}
