use rand::Rng as _;

use super::{Action, ActionSpec, EnvStep, Environment, Observation, ObservationSpec, Space};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CATCH_ROWS: usize = 10;
pub const CATCH_COLS: usize = 5;

/// Paddle movement. Action indices are 0 = left, 1 = stay, 2 = right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CatchAction {
    Left,
    Stay,
    Right,
}

impl CatchAction {
    pub fn from_index(index: usize) -> Result<Self> {
        match index {
            0 => Ok(CatchAction::Left),
            1 => Ok(CatchAction::Stay),
            2 => Ok(CatchAction::Right),
            _ => Err(Error::InvalidAction(format!("catch action {index} not in 0..3"))),
        }
    }

    fn shift(self) -> isize {
        match self {
            CatchAction::Left => -1,
            CatchAction::Stay => 0,
            CatchAction::Right => 1,
        }
    }
}

/// Ball and paddle positions. The paddle sits on the bottom row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatchState {
    pub ball_row: usize,
    pub ball_col: usize,
    pub paddle_col: usize,
}

impl CatchState {
    pub fn spawn(rng: &mut Rng, paddle_col: usize) -> Self {
        Self {
            ball_row: 0,
            ball_col: rng.random_range(0..CATCH_COLS),
            paddle_col,
        }
    }

    /// Flattened row-major 10x5 grid with ones at the ball and paddle cells.
    pub fn observation(&self) -> Vec<f64> {
        let mut grid = vec![0.0; CATCH_ROWS * CATCH_COLS];
        grid[self.ball_row * CATCH_COLS + self.ball_col] = 1.0;
        grid[(CATCH_ROWS - 1) * CATCH_COLS + self.paddle_col] = 1.0;
        grid
    }

    fn is_valid(&self) -> bool {
        self.ball_row < CATCH_ROWS - 1 && self.ball_col < CATCH_COLS && self.paddle_col < CATCH_COLS
    }
}

/// One step of continuing Catch.
///
/// The ball falls one row per step. When it lands on the bottom row the step
/// pays +1 if the paddle is under it and -1 otherwise, and a new ball spawns
/// on row 0 in a uniformly random column.
pub fn catch_step(state: CatchState, action: usize, rng: &mut Rng) -> Result<(CatchState, EnvStep)> {
    let action = CatchAction::from_index(action)?;
    if !state.is_valid() {
        return Err(Error::InvalidParameter(format!("invalid catch state {state:?}")));
    }
    let paddle_col = (state.paddle_col as isize + action.shift()).clamp(0, CATCH_COLS as isize - 1) as usize;
    let ball_row = state.ball_row + 1;
    let (next, reward, reset_occurred) = if ball_row == CATCH_ROWS - 1 {
        let reward = if state.ball_col == paddle_col { 1.0 } else { -1.0 };
        (CatchState::spawn(rng, paddle_col), reward, true)
    } else {
        (
            CatchState {
                ball_row,
                ball_col: state.ball_col,
                paddle_col,
            },
            0.0,
            false,
        )
    };
    let step = EnvStep {
        observation: Observation::Vector(next.observation()),
        reward,
        reset_occurred,
    };
    Ok((next, step))
}

#[derive(Debug, Clone)]
pub struct CatchEnv {
    state: CatchState,
    rng: Rng,
}

impl CatchEnv {
    pub fn new(mut rng: Rng) -> Self {
        let state = CatchState::spawn(&mut rng, CATCH_COLS / 2);
        Self { state, rng }
    }

    pub fn state(&self) -> CatchState {
        self.state
    }

    pub fn set_state(&mut self, state: CatchState) {
        self.state = state;
    }
}

impl Environment for CatchEnv {
    fn observation_spec(&self) -> ObservationSpec {
        Space::Box {
            low: vec![0.0; CATCH_ROWS * CATCH_COLS],
            high: vec![1.0; CATCH_ROWS * CATCH_COLS],
        }
    }

    fn action_spec(&self) -> ActionSpec {
        Space::Discrete(3)
    }

    fn observation(&self) -> Observation {
        Observation::Vector(self.state.observation())
    }

    fn sample_initial(&mut self, rng: &mut Rng) -> Observation {
        self.state = CatchState::spawn(rng, CATCH_COLS / 2);
        self.observation()
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let index = action
            .index()
            .ok_or_else(|| Error::InvalidAction("catch expects a discrete action".into()))?;
        let (next, step) = catch_step(self.state, index, &mut self.rng)?;
        self.state = next;
        Ok(step)
    }

    fn passive_action(&self) -> Action {
        Action::Discrete(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn catch_at_bottom_pays_and_respawns() {
        let mut rng = seeded(0);
        let state = CatchState {
            ball_row: 8,
            ball_col: 2,
            paddle_col: 2,
        };
        let (next, step) = catch_step(state, 1, &mut rng).unwrap();
        assert_eq!(step.reward, 1.0);
        assert!(step.reset_occurred);
        assert_eq!(next.ball_row, 0);
        assert_eq!(next.paddle_col, 2);
    }

    #[test]
    fn miss_pays_minus_one() {
        let mut rng = seeded(0);
        let state = CatchState {
            ball_row: 8,
            ball_col: 0,
            paddle_col: 3,
        };
        let (_, step) = catch_step(state, 2, &mut rng).unwrap();
        assert_eq!(step.reward, -1.0);
    }

    #[test]
    fn ball_falls_one_row() {
        let mut rng = seeded(0);
        for action in 0..3 {
            let state = CatchState {
                ball_row: 3,
                ball_col: 1,
                paddle_col: 2,
            };
            let (next, step) = catch_step(state, action, &mut rng).unwrap();
            assert_eq!(step.reward, 0.0);
            assert!(!step.reset_occurred);
            assert_eq!(next.ball_row, 4);
        }
    }

    #[test]
    fn paddle_clipped_at_edges() {
        let mut rng = seeded(0);
        let state = CatchState {
            ball_row: 0,
            ball_col: 1,
            paddle_col: 0,
        };
        let (next, _) = catch_step(state, 0, &mut rng).unwrap();
        assert_eq!(next.paddle_col, 0);
        let state = CatchState {
            paddle_col: CATCH_COLS - 1,
            ..state
        };
        let (next, _) = catch_step(state, 2, &mut rng).unwrap();
        assert_eq!(next.paddle_col, CATCH_COLS - 1);
    }

    #[test]
    fn invalid_action_rejected() {
        let mut rng = seeded(0);
        let state = CatchState {
            ball_row: 0,
            ball_col: 0,
            paddle_col: 0,
        };
        assert!(matches!(catch_step(state, 3, &mut rng), Err(Error::InvalidAction(_))));
    }

    #[test]
    fn observation_marks_two_cells() {
        let state = CatchState {
            ball_row: 2,
            ball_col: 4,
            paddle_col: 1,
        };
        let obs = state.observation();
        assert_eq!(obs.len(), 50);
        assert_eq!(obs.iter().sum::<f64>(), 2.0);
        assert_eq!(obs[2 * 5 + 4], 1.0);
        assert_eq!(obs[9 * 5 + 1], 1.0);
    }
}
