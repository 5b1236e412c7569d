//! Reward-rate estimators used to center TD errors.
//!
//! Every estimator exposes the current offset `r̄` and a way to subtract it
//! from rewards or TD errors. Centering and the `r̄` update are separate
//! calls so each agent controls its own cadence: per batch for replay-based
//! agents, once per epoch for PPO, once per environment step for the moving
//! average.
//!
//! `r̄` is stored as a fixed anchor (its initial value) plus a learned drift.
//! Rewards are centered as `(r - anchor) - drift`. When a run's rewards and
//! initial estimate are both shifted by the same exactly representable
//! constant, the centered rewards, and therefore every downstream update,
//! are bit-identical to the unshifted run.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// TD-based step sizes swept by default.
pub const TD_BASED_BETAS: [f64; 5] = [3e-2, 1e-2, 3e-3, 1e-3, 3e-4];
/// Moving-average rates swept by default.
pub const MOVING_AVERAGE_BETAS: [f64; 3] = [0.99, 0.999, 0.9999];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenteringMode {
    #[default]
    Off,
    /// `r̄ += β·mean(δ^RC)` after every critic update.
    TdBased,
    /// `r̄ ← β·r̄ + (1−β)·R` every environment step.
    MovingAverage,
    /// `r̄ := mean critic value over a fixed reference set`.
    ReferenceStates,
}

impl CenteringMode {
    pub fn name(self) -> &'static str {
        match self {
            CenteringMode::Off => "off",
            CenteringMode::TdBased => "td_based",
            CenteringMode::MovingAverage => "moving_average",
            CenteringMode::ReferenceStates => "reference_states",
        }
    }

    pub fn default_beta(self) -> f64 {
        match self {
            CenteringMode::MovingAverage => 0.999,
            _ => 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CenteringConfig {
    pub mode: CenteringMode,
    /// Step size (TD-based, deep agents) or averaging rate (moving average).
    pub beta: f64,
    /// Tabular TD-based agents update `r̄` with step `η·α`.
    pub eta: f64,
    /// Initial `r̄`.
    pub initial: f64,
}

impl Default for CenteringConfig {
    fn default() -> Self {
        Self {
            mode: CenteringMode::Off,
            beta: 1e-2,
            eta: 0.1,
            initial: 0.0,
        }
    }
}

impl CenteringConfig {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn td_based(beta: f64) -> Self {
        Self {
            mode: CenteringMode::TdBased,
            beta,
            ..Self::default()
        }
    }

    pub fn moving_average(beta: f64) -> Self {
        Self {
            mode: CenteringMode::MovingAverage,
            beta,
            ..Self::default()
        }
    }

    pub fn reference_states() -> Self {
        Self {
            mode: CenteringMode::ReferenceStates,
            ..Self::default()
        }
    }

    pub fn with_initial(mut self, initial: f64) -> Self {
        self.initial = initial;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.initial.is_finite() {
            return Err(Error::InvalidParameter("initial r̄ must be finite".into()));
        }
        match self.mode {
            CenteringMode::TdBased if !(self.beta > 0.0 && self.beta.is_finite()) => {
                Err(Error::InvalidParameter(format!("td_based beta {} must be > 0", self.beta)))
            }
            CenteringMode::MovingAverage if !(0.0..=1.0).contains(&self.beta) => {
                Err(Error::InvalidParameter(format!("moving_average beta {} outside [0, 1]", self.beta)))
            }
            _ if !(self.eta > 0.0 && self.eta.is_finite()) => {
                Err(Error::InvalidParameter(format!("eta {} must be > 0", self.eta)))
            }
            _ => Ok(()),
        }
    }
}

/// One element of a reference set: a state's feature vector and, for
/// action-value critics, an action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePair {
    pub state: Vec<f64>,
    pub action: Option<Action>,
}

/// Fixed set of state-action pairs, drawn once before the first learning
/// update and never changed afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pairs: Vec<ReferencePair>,
}

impl ReferenceSet {
    pub fn new(pairs: Vec<ReferencePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyReferenceSet);
        }
        Ok(Self { pairs })
    }

    /// Draws `size` pairs from `pool`: without replacement when the pool is
    /// large enough, with replacement otherwise.
    pub fn sample(pool: &[ReferencePair], size: usize, rng: &mut Rng) -> Result<Self> {
        if pool.is_empty() || size == 0 {
            return Err(Error::EmptyReferenceSet);
        }
        let pairs = if pool.len() >= size {
            index::sample(rng, pool.len(), size)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect()
        } else {
            (0..size).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
        };
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[ReferencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Mean critic value over a reference set, averaging both critics when a
/// second one is given.
pub fn reference_state_value(critic_values: &[f64], second_critic: Option<&[f64]>) -> Result<f64> {
    if critic_values.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    let n = critic_values.len() as f64;
    match second_critic {
        None => Ok(critic_values.iter().sum::<f64>() / n),
        Some(other) => {
            if other.len() != critic_values.len() {
                return Err(Error::dims("twin reference values", critic_values.len(), other.len()));
            }
            let total: f64 = critic_values.iter().zip(other).map(|(a, b)| a + b).sum();
            Ok(total / (2.0 * n))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRateEstimator {
    mode: CenteringMode,
    beta: f64,
    eta: f64,
    anchor: f64,
    drift: f64,
    reference: Option<ReferenceSet>,
}

impl RewardRateEstimator {
    pub fn new(config: &CenteringConfig) -> Result<Self> {
        config.validate()?;
        // Reference-state values are recomputed at each use, so no anchor.
        let anchor = if config.mode == CenteringMode::ReferenceStates {
            0.0
        } else {
            config.initial
        };
        Ok(Self {
            mode: config.mode,
            beta: config.beta,
            eta: config.eta,
            anchor,
            drift: 0.0,
            reference: None,
        })
    }

    pub fn off() -> Self {
        Self::new(&CenteringConfig::off()).expect("default config is valid")
    }

    pub fn mode(&self) -> CenteringMode {
        self.mode
    }

    /// The configuration this estimator was built from.
    pub fn config(&self) -> CenteringConfig {
        CenteringConfig {
            mode: self.mode,
            beta: self.beta,
            eta: self.eta,
            initial: self.anchor,
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn is_enabled(&self) -> bool {
        self.mode != CenteringMode::Off
    }

    /// Current `r̄`; `None` when centering is off.
    pub fn value(&self) -> Option<f64> {
        self.is_enabled().then(|| self.anchor + self.drift)
    }

    /// Current `r̄`, zero when centering is off.
    pub fn rbar(&self) -> f64 {
        if self.is_enabled() {
            self.anchor + self.drift
        } else {
            0.0
        }
    }

    /// `r - r̄`, evaluated as `(r - anchor) - drift`.
    #[inline]
    pub fn center_reward(&self, reward: f64) -> f64 {
        if self.is_enabled() {
            (reward - self.anchor) - self.drift
        } else {
            reward
        }
    }

    /// `δ_i - r̄` for every element. Does not touch `r̄`.
    pub fn center_batch(&self, raw_deltas: &[f64]) -> Vec<f64> {
        let rbar = self.rbar();
        raw_deltas.iter().map(|d| d - rbar).collect()
    }

    fn require(&self, expected: CenteringMode) -> Result<()> {
        if self.mode == expected {
            Ok(())
        } else {
            Err(Error::ModeMismatch {
                expected: expected.name(),
                actual: self.mode.name(),
            })
        }
    }

    /// `r̄ += β·mean(δ^RC)`.
    pub fn td_based_update(&mut self, centered_deltas: &[f64]) -> Result<()> {
        self.require(CenteringMode::TdBased)?;
        if centered_deltas.is_empty() {
            return Ok(());
        }
        let mean = centered_deltas.iter().sum::<f64>() / centered_deltas.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("centered TD errors".into()));
        }
        self.drift += self.beta * mean;
        Ok(())
    }

    /// `r̄ += step·δ^RC` for a single transition; tabular agents pass
    /// `step = η·α`.
    pub fn td_step(&mut self, step: f64, centered_delta: f64) -> Result<()> {
        self.require(CenteringMode::TdBased)?;
        self.drift += step * centered_delta;
        Ok(())
    }

    /// `r̄ ← β·r̄ + (1−β)·R`.
    pub fn moving_average_update(&mut self, reward: f64) -> Result<()> {
        self.require(CenteringMode::MovingAverage)?;
        self.drift = self.beta * self.drift + (1.0 - self.beta) * (reward - self.anchor);
        Ok(())
    }

    /// Centers a whole PPO round with the `r̄` in force at the start of the
    /// epoch, then updates `r̄` once from the round mean.
    pub fn ppo_round_center(&mut self, round_deltas: &[f64]) -> Result<Vec<f64>> {
        self.require(CenteringMode::TdBased)?;
        let centered = self.center_batch(round_deltas);
        self.td_based_update(&centered)?;
        Ok(centered)
    }

    pub fn reference_set(&self) -> Option<&ReferenceSet> {
        self.reference.as_ref()
    }

    /// Installs the reference set. It can be set only once.
    pub fn set_reference_set(&mut self, set: ReferenceSet) -> Result<()> {
        self.require(CenteringMode::ReferenceStates)?;
        if self.reference.is_some() {
            return Err(Error::InvalidParameter("reference set already fixed".into()));
        }
        self.reference = Some(set);
        Ok(())
    }

    /// Records the freshly computed `f(q)` as the offset for this update.
    pub fn set_reference_value(&mut self, value: f64) -> Result<()> {
        self.require(CenteringMode::ReferenceStates)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("reference-state value".into()));
        }
        self.drift = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn td(beta: f64, initial: f64) -> RewardRateEstimator {
        RewardRateEstimator::new(&CenteringConfig::td_based(beta).with_initial(initial)).unwrap()
    }

    #[test]
    fn center_batch_examples() {
        assert_eq!(td(0.1, 0.0).center_batch(&[3.0, 1.0]), vec![3.0, 1.0]);
        assert_eq!(td(0.1, 2.0).center_batch(&[3.0, 1.0]), vec![1.0, -1.0]);
        assert_eq!(RewardRateEstimator::off().center_batch(&[3.0]), vec![3.0]);
    }

    #[test]
    fn td_update_examples() {
        let mut est = td(0.1, 0.0);
        est.td_based_update(&[1.0, -1.0]).unwrap();
        assert_eq!(est.rbar(), 0.0);
        est.td_based_update(&[1.0, 1.0]).unwrap();
        assert!((est.rbar() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn td_update_converges_geometrically_to_mean_delta() {
        // Frozen raw δ with mean m: r̄_k = m (1 - (1-β)^k).
        let m = 2.5;
        let beta = 0.05;
        let mut est = td(beta, 0.0);
        for k in 1..=200 {
            let centered = est.center_batch(&[m - 1.0, m + 1.0]);
            est.td_based_update(&centered).unwrap();
            let expected = m * (1.0 - (1.0 - beta).powi(k));
            assert!((est.rbar() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_mismatch_reported() {
        let mut est = RewardRateEstimator::new(&CenteringConfig::moving_average(0.9)).unwrap();
        assert!(matches!(est.td_based_update(&[1.0]), Err(Error::ModeMismatch { .. })));
        let mut est = td(0.1, 0.0);
        assert!(matches!(est.moving_average_update(1.0), Err(Error::ModeMismatch { .. })));
        assert!(est.ppo_round_center(&[1.0]).is_ok());
    }

    #[test]
    fn moving_average_examples() {
        let mut est = RewardRateEstimator::new(&CenteringConfig::moving_average(0.0)).unwrap();
        est.moving_average_update(4.0).unwrap();
        est.moving_average_update(-2.0).unwrap();
        assert_eq!(est.rbar(), -2.0);

        let mut est = RewardRateEstimator::new(&CenteringConfig::moving_average(0.9)).unwrap();
        for _ in 0..400 {
            est.moving_average_update(3.0).unwrap();
        }
        assert!((est.rbar() - 3.0).abs() < 1e-12);

        // Alternating 0, 2: the two-phase steady state is 1 ∓ (1-β)/(1+β).
        let mut est = RewardRateEstimator::new(&CenteringConfig::moving_average(0.999)).unwrap();
        for t in 0..50_000 {
            est.moving_average_update(if t % 2 == 0 { 0.0 } else { 2.0 }).unwrap();
        }
        assert!((est.rbar() - 1.0).abs() < 0.01);
    }

    #[test]
    fn ppo_epochs_follow_closed_form() {
        let m = 1.7;
        let beta = 0.01;
        let raw = [m - 0.5, m, m + 0.5];
        let mut est = td(beta, 0.0);
        for _ in 0..10 {
            let before = est.rbar();
            let centered = est.ppo_round_center(&raw).unwrap();
            for (c, r) in centered.iter().zip(&raw) {
                assert_eq!(*c, r - before);
            }
        }
        assert!((est.rbar() - m * (1.0 - (1.0 - beta).powi(10))).abs() < 1e-12);
        let mut zero = td(beta, 0.0);
        zero.ppo_round_center(&[1.0, -1.0]).unwrap();
        assert_eq!(zero.rbar(), 0.0);
    }

    #[test]
    fn reference_values() {
        assert_eq!(reference_state_value(&[4.0, 4.0, 4.0], None).unwrap(), 4.0);
        assert_eq!(reference_state_value(&[1.0, 3.0], None).unwrap(), 2.0);
        let v = [1.0, 5.0, -2.0];
        let w: Vec<f64> = v.iter().map(|x| x + 2.0).collect();
        let mean = v.iter().sum::<f64>() / 3.0;
        assert!((reference_state_value(&v, Some(&w)).unwrap() - (mean + 1.0)).abs() < 1e-12);
        assert!(matches!(reference_state_value(&[], None), Err(Error::EmptyReferenceSet)));
    }

    #[test]
    fn reference_set_fixed_once() {
        let pool = vec![
            ReferencePair { state: vec![0.0], action: None },
            ReferencePair { state: vec![1.0], action: None },
        ];
        let mut rng = crate::rng::seeded(0);
        let small = ReferenceSet::sample(&pool, 5, &mut rng).unwrap();
        assert_eq!(small.len(), 5);
        let exact = ReferenceSet::sample(&pool, 2, &mut rng).unwrap();
        assert_eq!(exact.len(), 2);
        assert_ne!(exact.pairs()[0], exact.pairs()[1]);
        let mut est = RewardRateEstimator::new(&CenteringConfig::reference_states()).unwrap();
        est.set_reference_set(small.clone()).unwrap();
        assert!(est.set_reference_set(small).is_err());
        assert!(ReferenceSet::sample(&[], 3, &mut rng).is_err());
    }

    #[test]
    fn shifted_anchor_gives_identical_centered_rewards() {
        let base = td(0.01, 0.0);
        let shifted = td(0.01, 100.0);
        for r in [-1.0, 0.0, 1.0, 0.25] {
            assert_eq!(base.center_reward(r), shifted.center_reward(r + 100.0));
        }
    }

    proptest! {
        #[test]
        fn centering_shifts_the_mean(deltas in prop::collection::vec(-50.0f64..50.0, 1..40), rbar in -10.0f64..10.0) {
            let est = td(0.1, rbar);
            let out = est.center_batch(&deltas);
            let mean_in = deltas.iter().sum::<f64>() / deltas.len() as f64;
            let mean_out = out.iter().sum::<f64>() / out.len() as f64;
            prop_assert!((mean_out - (mean_in - rbar)).abs() < 1e-9);
        }

        #[test]
        fn reference_value_permutation_invariant(mut values in prop::collection::vec(-20.0f64..20.0, 1..30), seed in 0u64..1000) {
            let before = reference_state_value(&values, None).unwrap();
            let mut rng = crate::rng::seeded(seed);
            use rand::seq::SliceRandom;
            values.shuffle(&mut rng);
            let after = reference_state_value(&values, None).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
