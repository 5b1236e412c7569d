use serde::{Deserialize, Serialize};

use crate::centering::{CenteringConfig, CenteringMode};
use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Td0,
    QLearning,
    RelativeQ,
    Dqn,
    Ddpg,
    Td3,
    Sac,
    SacDiscrete,
    Ppo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Td0 => "td0",
            Algorithm::QLearning => "q_learning",
            Algorithm::RelativeQ => "relative_q",
            Algorithm::Dqn => "dqn",
            Algorithm::Ddpg => "ddpg",
            Algorithm::Td3 => "td3",
            Algorithm::Sac => "sac",
            Algorithm::SacDiscrete => "sac_discrete",
            Algorithm::Ppo => "ppo",
        }
    }

    pub fn is_tabular(self) -> bool {
        matches!(self, Algorithm::Td0 | Algorithm::QLearning | Algorithm::RelativeQ)
    }

    /// Needs a box action space.
    pub fn is_continuous(self) -> bool {
        matches!(self, Algorithm::Ddpg | Algorithm::Td3 | Algorithm::Sac)
    }
}

/// Named hyperparameter bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small networks and buffers sized for single-core runs of ~10⁵ steps.
    #[default]
    Desk,
    FullMujoco,
    FullAtari,
}

/// Offset `f(Q)` used by relative Q-learning.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeF {
    #[default]
    MeanAll,
    MaxAll,
    MinAll,
    /// Mean of `Q(s, a)` over fixed `(s, a)` pairs.
    ReferenceSet(Vec<(usize, usize)>),
}

macro_rules! agent_config {
    ($($(#[$doc:meta])* $field:ident: $ty:ty,)*) => {
        /// Every hyperparameter an agent reads. Fields irrelevant to the
        /// chosen algorithm are carried but ignored.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct AgentConfig {
            $($(#[$doc])* pub $field: $ty,)*
        }

        /// Partial [`AgentConfig`]; set fields replace the preset's values.
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct AgentOverrides {
            $(#[serde(default, skip_serializing_if = "Option::is_none")] pub $field: Option<$ty>,)*
        }

        impl AgentOverrides {
            pub fn apply_to(&self, config: &mut AgentConfig) {
                $(if let Some(v) = &self.$field { config.$field = v.clone(); })*
            }
        }
    };
}

agent_config! {
    algorithm: Algorithm,
    gamma: f64,

    /// Tabular step size.
    alpha: f64,
    /// When set, the tabular step size at step `t` is `alpha / (1 + t / alpha_decay)`.
    alpha_decay: Option<f64>,
    /// Behaviour (and evaluated) policy for TD(0); uniform when absent.
    behavior_policy: Option<Vec<Vec<f64>>>,
    relative_f: RelativeF,

    epsilon_start: f64,
    epsilon_end: f64,
    /// Linear decay length in agent steps; 0 holds `epsilon_end` throughout.
    epsilon_decay_steps: u64,

    hidden: Vec<usize>,
    activation: Activation,
    actor_lr: f64,
    critic_lr: f64,
    batch_size: usize,
    buffer_capacity: usize,
    /// Steps of uniform random actions before the learned policy acts.
    warmup_steps: u64,
    /// First step at which gradient updates may happen.
    learning_starts: u64,
    /// One update every `train_every` environment steps.
    train_every: u64,
    /// Hard target sync period in environment steps (DQN, discrete SAC).
    target_update_interval: u64,
    /// Polyak coefficient (DDPG, TD3, continuous SAC).
    tau: f64,
    max_grad_norm: Option<f64>,

    /// Behaviour noise std in half-range units of each base action dimension.
    exploration_std: f64,
    /// Behaviour noise std for an agent-controlled reset dimension, in
    /// probability units.
    reset_exploration_std: Option<f64>,
    /// The trailing action element is an agent-controlled reset
    /// probability. Warmup then draws it as `1/N`, `N ~ U{1..1000}`.
    reset_action: bool,
    policy_noise: f64,
    noise_clip: f64,
    policy_delay: u64,

    /// Entropy coefficient κ (initial value when autotuned).
    entropy_coef: f64,
    autotune: bool,
    /// Overrides the default target entropy `-|A| + target_entropy_offset`.
    target_entropy: Option<f64>,
    target_entropy_offset: f64,

    clip_range: f64,
    gae_lambda: f64,
    round_length: usize,
    epochs: usize,
    minibatch_size: usize,
    normalize_advantage: bool,
    entropy_bonus: f64,
}

impl AgentConfig {
    pub fn preset(algorithm: Algorithm, preset: Preset) -> Self {
        let mut c = Self::desk(algorithm);
        match (preset, algorithm) {
            (Preset::Desk, _) => {}
            (Preset::FullMujoco, Algorithm::Ddpg | Algorithm::Td3) => {
                c.hidden = vec![256, 256];
                c.actor_lr = 3e-4;
                c.critic_lr = 3e-4;
                c.batch_size = 256;
                c.buffer_capacity = 1_000_000;
                c.warmup_steps = 25_000;
                c.learning_starts = 25_000;
            }
            (Preset::FullMujoco, Algorithm::Sac) => {
                c.hidden = vec![256, 256];
                c.batch_size = 256;
                c.buffer_capacity = 1_000_000;
                c.warmup_steps = 5_000;
                c.learning_starts = 5_000;
            }
            (Preset::FullMujoco, Algorithm::Ppo) => {}
            (Preset::FullAtari, Algorithm::Dqn) => {
                c.hidden = vec![512];
                c.critic_lr = 1e-4;
                c.buffer_capacity = 800_000;
                c.train_every = 4;
                c.target_update_interval = 1000;
                c.epsilon_decay_steps = 1_000_000;
                c.warmup_steps = 80_000;
                c.learning_starts = 80_000;
                c.max_grad_norm = Some(0.5);
            }
            (Preset::FullAtari, Algorithm::SacDiscrete) => {
                c.hidden = vec![512];
                c.buffer_capacity = 800_000;
                c.train_every = 4;
                c.warmup_steps = 20_000;
                c.learning_starts = 20_000;
            }
            (Preset::FullAtari, Algorithm::Ppo) => {
                c.hidden = vec![512];
                c.activation = Activation::Relu;
                c.clip_range = 0.1;
                c.round_length = 1024;
                c.minibatch_size = 256;
                c.epochs = 8;
                c.entropy_bonus = 0.01;
            }
            // Presets with no full-scale counterpart fall back to desk values.
            _ => {}
        }
        c
    }

    fn desk(algorithm: Algorithm) -> Self {
        let mut c = Self {
            algorithm,
            gamma: 0.99,
            alpha: 0.1,
            alpha_decay: None,
            behavior_policy: None,
            relative_f: RelativeF::MeanAll,
            epsilon_start: 0.1,
            epsilon_end: 0.1,
            epsilon_decay_steps: 0,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            batch_size: 64,
            buffer_capacity: 100_000,
            warmup_steps: 1000,
            learning_starts: 1000,
            train_every: 1,
            target_update_interval: 1000,
            tau: 0.005,
            max_grad_norm: None,
            exploration_std: 0.1,
            reset_exploration_std: None,
            reset_action: false,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            entropy_coef: 0.2,
            autotune: true,
            target_entropy: None,
            target_entropy_offset: 0.0,
            clip_range: 0.2,
            gae_lambda: 0.95,
            round_length: 2048,
            epochs: 10,
            minibatch_size: 64,
            normalize_advantage: true,
            entropy_bonus: 0.0,
        };
        match algorithm {
            Algorithm::Td0 | Algorithm::QLearning | Algorithm::RelativeQ => {
                c.warmup_steps = 0;
                c.learning_starts = 0;
            }
            Algorithm::Dqn => {
                c.epsilon_start = 1.0;
                c.epsilon_end = 0.01;
                c.epsilon_decay_steps = 100_000;
            }
            Algorithm::Ddpg | Algorithm::Td3 => {
                c.actor_lr = 1e-3;
            }
            Algorithm::Sac => {}
            Algorithm::SacDiscrete => {
                c.critic_lr = 3e-4;
                c.autotune = false;
                c.target_update_interval = 2000;
            }
            Algorithm::Ppo => {
                c.activation = Activation::Tanh;
                c.critic_lr = 3e-4;
                c.warmup_steps = 0;
                c.learning_starts = 0;
                c.max_grad_norm = Some(0.5);
            }
        }
        c
    }

    /// Checks ranges; `gamma = 1` is accepted only with centering on.
    pub fn validate(&self, centering: &CenteringConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidDiscount(self.gamma));
        }
        if self.gamma == 1.0 && centering.mode == CenteringMode::Off {
            return bad("gamma = 1 requires reward centering".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if let Some(d) = self.alpha_decay {
            if !(d > 0.0) {
                return bad(format!("alpha_decay must be > 0, got {d}"));
            }
        }
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.batch_size == 0 || self.minibatch_size == 0 || self.round_length == 0 {
            return bad("batch, minibatch and round sizes must be positive".into());
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity smaller than batch_size".into());
        }
        if self.train_every == 0 || self.target_update_interval == 0 || self.policy_delay == 0 {
            return bad("train_every, target_update_interval and policy_delay must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda {} outside [0, 1]", self.gae_lambda));
        }
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return bad(format!("clip_range {} outside (0, 1)", self.clip_range));
        }
        if self.exploration_std < 0.0 || self.policy_noise < 0.0 || self.noise_clip < 0.0 {
            return bad("noise scales must be >= 0".into());
        }
        if let Some(std) = self.reset_exploration_std {
            if std < 0.0 {
                return bad("reset_exploration_std must be >= 0".into());
            }
        }
        if !self.autotune && self.entropy_coef <= 0.0 && matches!(self.algorithm, Algorithm::Sac) {
            return bad("entropy_coef must be > 0 when autotune is off".into());
        }
        if self.entropy_coef < 0.0 {
            return bad("entropy_coef must be >= 0".into());
        }
        if let Some(clip) = self.max_grad_norm {
            if !(clip > 0.0) {
                return bad("max_grad_norm must be > 0".into());
            }
        }
        if self.algorithm == Algorithm::RelativeQ && centering.mode != CenteringMode::Off {
            return bad("relative_q carries its own offset; set centering mode off".into());
        }
        if let RelativeF::ReferenceSet(pairs) = &self.relative_f {
            if pairs.is_empty() {
                return Err(Error::EmptyReferenceSet);
            }
        }
        Ok(())
    }

    /// Exploration rate after `step` agent steps.
    pub fn epsilon(&self, step: u64) -> f64 {
        if step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = (step as f64 / self.epsilon_decay_steps as f64).min(1.0);
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }

    /// Tabular step size after `step` updates.
    pub fn alpha_at(&self, step: u64) -> f64 {
        match self.alpha_decay {
            Some(d) => self.alpha / (1.0 + step as f64 / d),
            None => self.alpha,
        }
    }

    pub fn default_target_entropy(&self, action_dims: usize) -> f64 {
        self.target_entropy
            .unwrap_or(-(action_dims as f64) + self.target_entropy_offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_presets() {
        let c = AgentConfig::preset(Algorithm::Ddpg, Preset::FullMujoco);
        assert_eq!(c.gamma, 0.99);
        assert_eq!((c.actor_lr, c.critic_lr), (3e-4, 3e-4));
        assert_eq!((c.tau, c.batch_size, c.buffer_capacity), (0.005, 256, 1_000_000));
        assert_eq!(c.exploration_std, 0.1);
        let c = AgentConfig::preset(Algorithm::Ppo, Preset::FullMujoco);
        assert_eq!((c.clip_range, c.gae_lambda, c.round_length, c.epochs, c.minibatch_size), (0.2, 0.95, 2048, 10, 64));
        let c = AgentConfig::preset(Algorithm::Dqn, Preset::FullAtari);
        assert_eq!((c.critic_lr, c.train_every, c.target_update_interval), (1e-4, 4, 1000));
        let c = AgentConfig::preset(Algorithm::SacDiscrete, Preset::FullAtari);
        assert_eq!((c.entropy_coef, c.autotune, c.target_update_interval), (0.2, false, 2000));
    }

    #[test]
    fn epsilon_schedule() {
        let c = AgentConfig::preset(Algorithm::Dqn, Preset::Desk);
        assert_eq!(c.epsilon(0), 1.0);
        assert!((c.epsilon(50_000) - 0.505).abs() < 1e-12);
        assert_eq!(c.epsilon(1_000_000), 0.01);
    }

    #[test]
    fn validation() {
        let off = CenteringConfig::off();
        let mut c = AgentConfig::preset(Algorithm::QLearning, Preset::Desk);
        assert!(c.validate(&off).is_ok());
        c.gamma = 1.0;
        assert!(c.validate(&off).is_err());
        assert!(c.validate(&CenteringConfig::td_based(0.01)).is_ok());
        c.alpha = 0.0;
        assert!(c.validate(&CenteringConfig::td_based(0.01)).is_err());
    }

    #[test]
    fn target_entropy_defaults() {
        let mut c = AgentConfig::preset(Algorithm::Sac, Preset::Desk);
        assert_eq!(c.default_target_entropy(1), -1.0);
        c.target_entropy_offset = -3.0;
        assert_eq!(c.default_target_entropy(2), -5.0);
    }

    #[test]
    fn overrides_apply() {
        let mut c = AgentConfig::preset(Algorithm::Dqn, Preset::Desk);
        let o: AgentOverrides = serde_json::from_str(r#"{"gamma": 0.5, "hidden": [8]}"#).unwrap();
        o.apply_to(&mut c);
        assert_eq!((c.gamma, c.hidden.clone()), (0.5, vec![8]));
        assert!(serde_json::from_str::<AgentOverrides>(r#"{"gama": 0.5}"#).is_err());
    }
}
