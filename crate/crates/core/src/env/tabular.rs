use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::{sample_categorical, Action, ActionSpec, EnvStep, Environment, Observation, ObservationSpec, Space};
use crate::error::{Error, Result};
use crate::mdp::DiscreteMDP;
use crate::rng::Rng;

/// Samples `s' ~ p[s][a][·]` and returns `r[s][a]`, plus Gaussian noise when
/// `noise_std > 0`.
pub fn tabular_env_step(
    mdp: &DiscreteMDP,
    state: usize,
    action: usize,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<(usize, EnvStep)> {
    if state >= mdp.num_states() {
        return Err(Error::IndexOutOfRange {
            context: "tabular state",
            index: state,
            size: mdp.num_states(),
        });
    }
    if action >= mdp.num_actions() {
        return Err(Error::IndexOutOfRange {
            context: "tabular action",
            index: action,
            size: mdp.num_actions(),
        });
    }
    let next = sample_categorical(mdp.transition_row(state, action), rng);
    let mut reward = mdp.reward(state, action);
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .sample(rng);
        reward += noise;
    }
    Ok((
        next,
        EnvStep {
            observation: Observation::Discrete(next),
            reward,
            reset_occurred: false,
        },
    ))
}

/// Sampling adapter over a [`DiscreteMDP`].
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: Arc<DiscreteMDP>,
    state: usize,
    noise_std: f64,
    rng: Rng,
}

impl TabularEnv {
    pub fn new(mdp: Arc<DiscreteMDP>, noise_std: f64, mut rng: Rng) -> Result<Self> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidParameter(format!("reward noise std {noise_std}")));
        }
        let state = sample_categorical(mdp.initial_dist(), &mut rng);
        Ok(Self {
            mdp,
            state,
            noise_std,
            rng,
        })
    }

    pub fn mdp(&self) -> &DiscreteMDP {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn set_state(&mut self, state: usize) -> Result<()> {
        if state >= self.mdp.num_states() {
            return Err(Error::IndexOutOfRange {
                context: "tabular state",
                index: state,
                size: self.mdp.num_states(),
            });
        }
        self.state = state;
        Ok(())
    }
}

impl Environment for TabularEnv {
    fn observation_spec(&self) -> ObservationSpec {
        Space::Discrete(self.mdp.num_states())
    }

    fn action_spec(&self) -> ActionSpec {
        Space::Discrete(self.mdp.num_actions())
    }

    fn observation(&self) -> Observation {
        Observation::Discrete(self.state)
    }

    fn sample_initial(&mut self, rng: &mut Rng) -> Observation {
        self.state = sample_categorical(self.mdp.initial_dist(), rng);
        self.observation()
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let a = action
            .index()
            .ok_or_else(|| Error::InvalidAction("tabular env expects a discrete action".into()))?;
        let (next, step) = tabular_env_step(&self.mdp, self.state, a, self.noise_std, &mut self.rng)?;
        self.state = next;
        Ok(step)
    }
}
