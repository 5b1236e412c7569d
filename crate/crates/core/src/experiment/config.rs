use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{AgentConfig, AgentOverrides, Preset};
use crate::centering::CenteringConfig;
use crate::env::{CatchEnv, Environment, PendulumEnv, TabularEnv};
use crate::error::{Error, Result};
use crate::mdp::{generate_random_mdp, DiscreteMDP};
use crate::rng::{self, Stream};
use crate::wrappers::{
    agent_controlled_reset_wrap, angle_wrap_env, random_reset_wrap, reset_as_transition_wrap, reward_offset_wrap,
    AngleWrapMode, FailurePredicate, ResetConfig, DEFAULT_RESET_COST,
};

fn default_window() -> u64 {
    10_000
}

fn default_one() -> u64 {
    1
}

fn default_curve_stride() -> u64 {
    1_000
}

fn default_reset_cost() -> f64 {
    DEFAULT_RESET_COST
}

fn default_eval_steps() -> u64 {
    10_000
}

fn default_reward_span() -> f64 {
    1.0
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

/// A sweep: every arm is run once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub total_steps: u64,
    pub seeds: Vec<u64>,
    /// Reward-rate window for final rates and curves.
    #[serde(default = "default_window")]
    pub window: u64,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub logging: LoggingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    pub env: EnvConfig,
    /// Must name `algorithm`; everything else overrides the preset.
    pub agent: AgentOverrides,
    #[serde(default)]
    pub centering: CenteringConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arms: Vec<ArmConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub compare: Vec<CompareSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingConfig {
    /// Steps per log record; records hold the mean reward of their span.
    #[serde(default = "default_one")]
    pub stride: u64,
    /// Spacing of points on the learning curves.
    #[serde(default = "default_curve_stride")]
    pub curve_stride: u64,
    /// Also record the observation at every record.
    #[serde(default)]
    pub trace: bool,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            curve_stride: default_curve_stride(),
            trace: false,
        }
    }
}

/// Greedy deployment of the final policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_steps")]
    pub steps: u64,
    /// Deployment seeds per training run.
    #[serde(default = "default_one")]
    pub seeds_per_run: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub base: BaseEnv,
    /// Applied in order: the first entry wraps the base environment.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wrappers: Vec<WrapperSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseEnv {
    Catch,
    Pendulum,
    Tabular {
        mdp: MdpSource,
        #[serde(default, skip_serializing_if = "is_default")]
        reward_noise: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSource {
    Random {
        seed: u64,
        states: usize,
        actions: usize,
        #[serde(default = "default_reward_span")]
        reward_span: f64,
    },
    /// JSON file, relative paths resolved against the config's directory.
    File(PathBuf),
    Inline(DiscreteMDP),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WrapperSpec {
    RandomReset {
        p: f64,
    },
    ResetAsTransition {
        failure: FailureSpec,
        #[serde(default = "default_reset_cost")]
        reset_cost: f64,
    },
    AgentControlledReset {
        #[serde(default = "default_reset_cost")]
        reset_cost: f64,
    },
    RewardOffset {
        offset: f64,
    },
    AngleWrap {
        indices: Vec<usize>,
        #[serde(default)]
        mode: AngleWrapMode,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FailureSpec {
    Never,
    States(Vec<usize>),
    AngleBeyond { index: usize, limit: f64 },
}

impl FailureSpec {
    fn predicate(&self) -> FailurePredicate {
        match self {
            FailureSpec::Never => FailurePredicate::never(),
            FailureSpec::States(s) => FailurePredicate::states(s.clone()),
            FailureSpec::AngleBeyond { index, limit } => FailurePredicate::angle_beyond(*index, *limit),
        }
    }
}

/// One variation of the base settings. Unset fields inherit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub agent: AgentOverrides,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centering: Option<CenteringConfig>,
    /// Replaces the base wrapper stack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrappers: Option<Vec<WrapperSpec>>,
}

/// `candidate` against `reference`, improvement measured over `baseline`.
/// The baseline may be an arm or `"random"` (uniform policy on the
/// candidate's environment).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    pub candidate: String,
    pub reference: String,
    pub baseline: String,
    #[serde(default, skip_serializing_if = "is_default")]
    pub metric: Metric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Final windowed training reward rate.
    #[default]
    Final,
    /// Reward rate of the greedy deployment.
    Eval,
}

impl CompareSpec {
    /// Parses `candidate,reference,baseline[,metric]`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        let metric = match parts.get(3) {
            None | Some(&"final") => Metric::Final,
            Some(&"eval") => Metric::Eval,
            Some(other) => return Err(Error::Config(format!("unknown comparison metric `{other}`"))),
        };
        if !(3..=4).contains(&parts.len()) || parts[..3].iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!(
                "comparison `{text}` must read candidate,reference,baseline[,metric]"
            )));
        }
        Ok(Self {
            candidate: parts[0].into(),
            reference: parts[1].into(),
            baseline: parts[2].into(),
            metric,
        })
    }

    /// Semicolon-separated list of [`CompareSpec::parse`] items.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.split(';').filter(|s| !s.trim().is_empty()).map(Self::parse).collect()
    }
}

/// Fully resolved settings of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmPlan {
    pub name: String,
    pub total_steps: u64,
    pub window: u64,
    pub logging: LoggingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub centering: CenteringConfig,
}

impl ExperimentConfig {
    /// Reads and validates a TOML config.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        config.validate()?;
        Ok(config)
    }

    /// Parses without touching the file system. Diagnostics carry line and
    /// column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let BaseEnv::Tabular {
            mdp: MdpSource::File(p),
            ..
        } = &mut self.env.base
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serialises").to_string();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.agent.algorithm.is_none() {
            return bad("[agent] must set `algorithm`".into());
        }
        if self.seeds.is_empty() {
            return bad("`seeds` is empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("`seeds` contains duplicates".into());
        }
        if self.window == 0 || self.logging.stride == 0 || self.logging.curve_stride == 0 {
            return bad("window and logging strides must be positive".into());
        }
        if self.window > self.total_steps {
            return bad(format!("window {} exceeds total_steps {}", self.window, self.total_steps));
        }
        if self.workers == Some(0) {
            return bad("`workers` must be at least 1".into());
        }
        let mut names = BTreeSet::new();
        for arm in &self.arms {
            if arm.name.is_empty() || arm.name == "random" || arm.name.contains(['/', '\\', ',', ';']) {
                return bad(format!("invalid arm name `{}`", arm.name));
            }
            if !names.insert(arm.name.as_str()) {
                return bad(format!("duplicate arm `{}`", arm.name));
            }
        }
        let plans = self.plans()?;
        for spec in &self.compare {
            for name in [&spec.candidate, &spec.reference, &spec.baseline] {
                if !(plans.iter().any(|p| &p.name == name) || (name == "random" && name == &spec.baseline)) {
                    return bad(format!("comparison names unknown arm `{name}`"));
                }
            }
        }
        Ok(())
    }

    /// Resolved arms; a config without `[[arms]]` has the single arm `default`.
    pub fn plans(&self) -> Result<Vec<ArmPlan>> {
        let default_arm = [ArmConfig {
            name: "default".into(),
            ..ArmConfig::default()
        }];
        let arms = if self.arms.is_empty() { &default_arm[..] } else { &self.arms[..] };
        arms.iter().map(|arm| self.plan(arm)).collect()
    }

    fn plan(&self, arm: &ArmConfig) -> Result<ArmPlan> {
        let algorithm = arm
            .agent
            .algorithm
            .or(self.agent.algorithm)
            .ok_or_else(|| Error::Config("[agent] must set `algorithm`".into()))?;
        let mut agent = AgentConfig::preset(algorithm, arm.preset.unwrap_or(self.preset));
        self.agent.apply_to(&mut agent);
        arm.agent.apply_to(&mut agent);
        agent.algorithm = algorithm;
        let mut env = self.env.clone();
        if let Some(w) = &arm.wrappers {
            env.wrappers = w.clone();
        }
        if env.wrappers.iter().any(|w| matches!(w, WrapperSpec::AgentControlledReset { .. })) {
            agent.reset_action = true;
        }
        let centering = arm.centering.clone().unwrap_or_else(|| self.centering.clone());
        centering.validate()?;
        agent
            .validate(&centering)
            .map_err(|e| Error::Config(format!("arm `{}`: {e}", arm.name)))?;
        if self.total_steps < agent.warmup_steps {
            return Err(Error::Config(format!(
                "arm `{}`: total_steps {} below warmup {}",
                arm.name, self.total_steps, agent.warmup_steps
            )));
        }
        Ok(ArmPlan {
            name: arm.name.clone(),
            total_steps: self.total_steps,
            window: self.window,
            logging: self.logging.clone(),
            eval: self.eval.clone(),
            env,
            agent,
            centering,
        })
    }
}

impl ArmPlan {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("arm plan serialises")
    }
}

impl EnvConfig {
    /// Builds the environment for `seed`: base dynamics on the env stream,
    /// the `i`-th wrapper on [`rng::wrapper_stream`]`(seed, i)`.
    pub fn build(&self, seed: u64) -> Result<Box<dyn Environment>> {
        let dynamics = rng::stream(seed, Stream::EnvDynamics);
        let mut env: Box<dyn Environment> = match &self.base {
            BaseEnv::Catch => Box::new(CatchEnv::new(dynamics)),
            BaseEnv::Pendulum => Box::new(PendulumEnv::new(dynamics)),
            BaseEnv::Tabular { mdp, reward_noise } => {
                let mdp = match mdp {
                    MdpSource::Random {
                        seed,
                        states,
                        actions,
                        reward_span,
                    } => generate_random_mdp(*seed, *states, *actions, *reward_span)?,
                    MdpSource::File(path) => DiscreteMDP::from_json(
                        &std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
                    )?,
                    MdpSource::Inline(m) => m.clone(),
                };
                Box::new(TabularEnv::new(Arc::new(mdp), *reward_noise, dynamics)?)
            }
        };
        for (i, w) in self.wrappers.iter().enumerate() {
            let coin = rng::wrapper_stream(seed, i);
            env = match w {
                WrapperSpec::RandomReset { p } => Box::new(random_reset_wrap(env, *p, coin)?),
                WrapperSpec::ResetAsTransition { failure, reset_cost } => Box::new(reset_as_transition_wrap(
                    env,
                    failure.predicate(),
                    ResetConfig::new(*reset_cost)?,
                    coin,
                )?),
                WrapperSpec::AgentControlledReset { reset_cost } => {
                    Box::new(agent_controlled_reset_wrap(env, ResetConfig::new(*reset_cost)?, coin)?)
                }
                WrapperSpec::RewardOffset { offset } => Box::new(reward_offset_wrap(env, *offset)?),
                WrapperSpec::AngleWrap { indices, mode } => Box::new(angle_wrap_env(env, indices.clone(), *mode)?),
            };
        }
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::Algorithm;
    use crate::centering::CenteringMode;

    const MINIMAL: &str = r#"
name = "mini"
total_steps = 2000
window = 500
seeds = [1, 2]

[env.base]
kind = "catch"

[agent]
algorithm = "dqn"
"#;

    #[test]
    fn minimal_config_fills_preset_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let plans = c.plans().unwrap();
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].name, "default");
        assert_eq!(plans[0].agent, AgentConfig::preset(Algorithm::Dqn, Preset::Desk));
        assert_eq!(plans[0].centering.mode, CenteringMode::Off);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace("algorithm = \"dqn\"", "algorithm = \"dqn\"\ngama = 0.9");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("gama"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn full_preset_for_ddpg() {
        let text = r#"
name = "p"
total_steps = 30000
seeds = [0]
preset = "full_mujoco"
[env.base]
kind = "pendulum"
[agent]
algorithm = "ddpg"
"#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.window, 10_000);
        let a = c.plans().unwrap().remove(0).agent;
        assert_eq!((a.gamma, a.actor_lr, a.critic_lr, a.tau), (0.99, 3e-4, 3e-4, 0.005));
        assert_eq!((a.batch_size, a.buffer_capacity, a.exploration_std), (256, 1_000_000, 0.1));
    }

    #[test]
    fn arms_inherit_and_override() {
        let text = format!(
            "{MINIMAL}\n[[env.wrappers]]\nkind = \"reward_offset\"\noffset = 100.0\n\n\
             [[arms]]\nname = \"plain\"\n\n\
             [[arms]]\nname = \"rc\"\ncentering = {{ mode = \"td_based\" }}\nagent = {{ gamma = 0.999 }}\nwrappers = []\n"
        );
        let plans = ExperimentConfig::from_toml(&text).unwrap().plans().unwrap();
        assert_eq!(plans[0].env.wrappers.len(), 1);
        assert_eq!(plans[0].agent.gamma, 0.99);
        assert!(plans[1].env.wrappers.is_empty());
        assert_eq!(plans[1].agent.gamma, 0.999);
        assert_eq!(plans[1].centering.mode, CenteringMode::TdBased);
        assert_eq!(plans[1].centering.beta, CenteringConfig::default().beta);
    }

    #[test]
    fn agent_controlled_wrapper_sets_reset_action() {
        let text = r#"
name = "acr"
total_steps = 5000
window = 1000
seeds = [0]
[env.base]
kind = "pendulum"
[[env.wrappers]]
kind = "agent_controlled_reset"
[agent]
algorithm = "sac"
"#;
        let plan = ExperimentConfig::from_toml(text).unwrap().plans().unwrap().remove(0);
        assert!(plan.agent.reset_action);
        let env = plan.env.build(3).unwrap();
        assert_eq!(env.action_spec().flat_dim(), 2);
    }

    #[test]
    fn emit_round_trip() {
        let text = format!(
            "{MINIMAL}\n[eval]\nsteps = 500\n\n[[env.wrappers]]\nkind = \"random_reset\"\np = 0.01\n\n\
             [[env.wrappers]]\nkind = \"reset_as_transition\"\nfailure = {{ states = [3] }}\n\n\
             [[arms]]\nname = \"a\"\n\n[[arms]]\nname = \"b\"\ncentering = {{ mode = \"moving_average\", beta = 0.999 }}\n\n\
             [[compare]]\ncandidate = \"b\"\nreference = \"a\"\nbaseline = \"random\"\n"
        );
        let c = ExperimentConfig::from_toml(&text).unwrap();
        let again = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        for plan in c.plans().unwrap() {
            let back: ArmPlan = toml::from_str(&plan.to_toml()).unwrap();
            assert_eq!(back, plan);
        }
    }

    #[test]
    fn validation_errors() {
        let dup = MINIMAL.replace("[1, 2]", "[1, 1]");
        assert!(ExperimentConfig::from_toml(&dup).is_err());
        let no_algo = MINIMAL.replace("algorithm = \"dqn\"", "");
        assert!(ExperimentConfig::from_toml(&no_algo).is_err());
        let gamma_one = format!("{MINIMAL}gamma = 1.0\n");
        assert!(ExperimentConfig::from_toml(&gamma_one).is_err());
        let short = MINIMAL.replace("2000", "10");
        assert!(ExperimentConfig::from_toml(&short).is_err());
        let bad_compare = format!("{MINIMAL}\n[[compare]]\ncandidate = \"x\"\nreference = \"default\"\nbaseline = \"random\"\n");
        assert!(ExperimentConfig::from_toml(&bad_compare).is_err());
    }

    #[test]
    fn compare_spec_parsing() {
        let s = CompareSpec::parse_list("rc, plain, random; a,b,c,eval").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].candidate, "rc");
        assert_eq!(s[1].metric, Metric::Eval);
        assert!(CompareSpec::parse("a,b").is_err());
    }
}
