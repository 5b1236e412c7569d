//! Continuing environments.
//!
//! There is no terminal flag anywhere in this interface. Environments that
//! re-initialize part of their state mark the step with `reset_occurred`.

mod catch;
mod pendulum;
mod tabular;

pub use catch::{catch_step, CatchAction, CatchEnv, CatchState, CATCH_COLS, CATCH_ROWS};
pub use pendulum::{pendulum_energy, pendulum_step, wrap_angle, PendulumEnv, PendulumState};
pub use tabular::{tabular_env_step, TabularEnv};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Observation or action space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Space {
    Discrete(usize),
    Box { low: Vec<f64>, high: Vec<f64> },
}

pub type ObservationSpec = Space;
pub type ActionSpec = Space;

impl Space {
    pub fn new_box(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() {
            return Err(Error::InvalidParameter("box bounds must be non-empty and equal length".into()));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l <= h)) {
            return Err(Error::InvalidParameter("box lower bound exceeds upper bound".into()));
        }
        Ok(Space::Box { low, high })
    }

    pub fn discrete(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("discrete space needs n >= 1".into()));
        }
        Ok(Space::Discrete(n))
    }

    /// Number of discrete elements or box dimensions.
    pub fn size(&self) -> usize {
        match self {
            Space::Discrete(n) => *n,
            Space::Box { low, .. } => low.len(),
        }
    }

    /// Length of the feature vector a network sees for this space.
    pub fn flat_dim(&self) -> usize {
        self.size()
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Space::Discrete(_))
    }

    /// Uniform draw from the space. Unbounded box dimensions fall back to
    /// a standard normal draw.
    pub fn sample(&self, rng: &mut Rng) -> Action {
        match self {
            Space::Discrete(n) => Action::Discrete(rng.random_range(0..*n)),
            Space::Box { low, high } => Action::Continuous(
                low.iter()
                    .zip(high)
                    .map(|(l, h)| {
                        if l.is_finite() && h.is_finite() {
                            l + (h - l) * rng.random::<f64>()
                        } else {
                            rng.sample(rand_distr::StandardNormal)
                        }
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    Discrete(usize),
    Vector(Vec<f64>),
}

impl Observation {
    /// Network input: one-hot for discrete observations.
    pub fn features(&self, spec: &ObservationSpec) -> Vec<f64> {
        match self {
            Observation::Vector(v) => v.clone(),
            Observation::Discrete(i) => {
                let mut x = vec![0.0; spec.size()];
                x[*i] = 1.0;
                x
            }
        }
    }

    pub fn index(&self) -> Option<usize> {
        match self {
            Observation::Discrete(i) => Some(*i),
            Observation::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Observation::Vector(v) => Some(v),
            Observation::Discrete(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }

    pub fn as_slice(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(v) => Some(v),
            Action::Discrete(_) => None,
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub observation: Observation,
    pub reward: f64,
    /// The environment jumped to an initial-distribution sample this step.
    pub reset_occurred: bool,
}

/// A continuing environment. Each instance owns its dynamics rng.
pub trait Environment: Send {
    fn observation_spec(&self) -> ObservationSpec;

    fn action_spec(&self) -> ActionSpec;

    /// Current observation.
    fn observation(&self) -> Observation;

    /// Moves to a fresh draw from the initial distribution using `rng`.
    fn sample_initial(&mut self, rng: &mut Rng) -> Observation;

    fn step(&mut self, action: &Action) -> Result<EnvStep>;

    /// A "do nothing" action, used where an action must be supplied but
    /// should not matter.
    fn passive_action(&self) -> Action {
        match self.action_spec() {
            Space::Discrete(_) => Action::Discrete(0),
            Space::Box { low, high } => Action::Continuous(
                low.iter()
                    .zip(&high)
                    .map(|(l, h)| 0.0f64.clamp(*l, *h))
                    .collect(),
            ),
        }
    }
}

impl Environment for Box<dyn Environment> {
    fn observation_spec(&self) -> ObservationSpec {
        (**self).observation_spec()
    }

    fn action_spec(&self) -> ActionSpec {
        (**self).action_spec()
    }

    fn observation(&self) -> Observation {
        (**self).observation()
    }

    fn sample_initial(&mut self, rng: &mut Rng) -> Observation {
        (**self).sample_initial(rng)
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        (**self).step(action)
    }

    fn passive_action(&self) -> Action {
        (**self).passive_action()
    }
}

/// Draws an index from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum: take the last supported entry.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_bounds_validated() {
        assert!(Space::new_box(vec![0.0], vec![-1.0]).is_err());
        assert!(Space::discrete(0).is_err());
        assert!(Space::new_box(vec![-1.0, 0.0], vec![1.0, 0.0]).is_ok());
    }

    #[test]
    fn one_hot_features() {
        let obs = Observation::Discrete(2);
        assert_eq!(obs.features(&Space::Discrete(4)), vec![0.0, 0.0, 1.0, 0.0]);
    }
}
