use std::f64::consts::PI;

use rand::Rng as _;

use super::{Action, ActionSpec, EnvStep, Environment, Observation, ObservationSpec, Space};
use crate::error::{Error, Result};
use crate::rng::Rng;

const GRAVITY: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
pub const MAX_SPEED: f64 = 8.0;
pub const MAX_TORQUE: f64 = 2.0;
pub const DT: f64 = 0.05;

/// Pole angle (0 = upright) and angular velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

/// Maps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Mechanical energy of a uniform rod pivoting at one end, with the upright
/// position at `θ = 0`.
pub fn pendulum_energy(state: PendulumState) -> f64 {
    let inertia = MASS * LENGTH * LENGTH / 3.0;
    0.5 * inertia * state.theta_dot * state.theta_dot + MASS * GRAVITY * (LENGTH / 2.0) * state.theta.cos()
}

/// Semi-implicit Euler step of the swing-up pendulum. The torque is clipped
/// to `[-2, 2]` before use.
pub fn pendulum_step(state: PendulumState, torque: f64, dt: f64) -> Result<(PendulumState, EnvStep)> {
    if !(state.theta.is_finite() && state.theta_dot.is_finite() && torque.is_finite() && dt.is_finite()) {
        return Err(Error::NonFinite("pendulum input".into()));
    }
    let u = torque.clamp(-MAX_TORQUE, MAX_TORQUE);
    let cost = wrap_angle(state.theta).powi(2) + 0.1 * state.theta_dot.powi(2) + 0.001 * u * u;
    let accel = 3.0 * GRAVITY / (2.0 * LENGTH) * state.theta.sin() + 3.0 * u / (MASS * LENGTH * LENGTH);
    let theta_dot = (state.theta_dot + accel * dt).clamp(-MAX_SPEED, MAX_SPEED);
    let theta = state.theta + theta_dot * dt;
    let next = PendulumState { theta, theta_dot };
    let step = EnvStep {
        observation: Observation::Vector(vec![theta, theta_dot]),
        reward: -cost,
        reset_occurred: false,
    };
    Ok((next, step))
}

/// Continuing pendulum observing the raw, unwrapped angle and its velocity.
#[derive(Debug, Clone)]
pub struct PendulumEnv {
    state: PendulumState,
    // The pendulum dynamics are deterministic; the rng only seeds the
    // initial state.
    _rng: Rng,
}

impl PendulumEnv {
    pub fn new(mut rng: Rng) -> Self {
        let state = Self::draw_initial(&mut rng);
        Self { state, _rng: rng }
    }

    fn draw_initial(rng: &mut Rng) -> PendulumState {
        PendulumState {
            theta: rng.random_range(-PI..PI),
            theta_dot: rng.random_range(-1.0..1.0),
        }
    }

    pub fn state(&self) -> PendulumState {
        self.state
    }

    pub fn set_state(&mut self, state: PendulumState) {
        self.state = state;
    }
}

impl Environment for PendulumEnv {
    fn observation_spec(&self) -> ObservationSpec {
        Space::Box {
            low: vec![f64::NEG_INFINITY, -MAX_SPEED],
            high: vec![f64::INFINITY, MAX_SPEED],
        }
    }

    fn action_spec(&self) -> ActionSpec {
        Space::Box {
            low: vec![-MAX_TORQUE],
            high: vec![MAX_TORQUE],
        }
    }

    fn observation(&self) -> Observation {
        Observation::Vector(vec![self.state.theta, self.state.theta_dot])
    }

    fn sample_initial(&mut self, rng: &mut Rng) -> Observation {
        self.state = Self::draw_initial(rng);
        self.observation()
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let torque = match action {
            Action::Continuous(v) if v.len() == 1 => v[0],
            _ => return Err(Error::InvalidAction("pendulum expects a 1-d continuous action".into())),
        };
        let (next, step) = pendulum_step(self.state, torque, DT)?;
        self.state = next;
        Ok(step)
    }
}
