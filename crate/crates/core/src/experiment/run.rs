use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{ArmPlan, CompareSpec, ExperimentConfig, Metric};
use crate::agents::{build_agent, ActionMode, Agent, Transition};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::eval::{
    compare, deploy_and_count, mean_stderr, random_policy_baseline, reward_rate_curve, windowed_reward_rate, ArmStats,
    ComparisonReport, DeployStats, LogRecord, RunLog,
};
use crate::rng::{self, Stream};

/// Where and why a run stopped early. The run's log up to `step` is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub step: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rate_mean: f64,
    pub rate_stderr: f64,
    pub resets_mean: f64,
    pub resets_stderr: f64,
}

impl From<&DeployStats> for EvalSummary {
    fn from(d: &DeployStats) -> Self {
        Self {
            rate_mean: d.rate_mean,
            rate_stderr: d.rate_stderr,
            resets_mean: d.resets_mean,
            resets_stderr: d.resets_stderr,
        }
    }
}

/// One `(arm, seed)` training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub arm: String,
    pub seed: u64,
    pub log: RunLog,
    pub failure: Option<RunFailure>,
    pub eval: Option<EvalSummary>,
}

/// Seeds of the greedy deployments following training run `seed`.
pub fn eval_seeds(seed: u64, per_run: u64) -> Vec<u64> {
    (0..per_run).map(|k| seed.wrapping_add((k + 1) << 32)).collect()
}

fn greedy_eval(plan: &ArmPlan, agent: &dyn Agent, seed: u64) -> Result<Option<EvalSummary>> {
    let Some(eval) = &plan.eval else { return Ok(None) };
    let stats = deploy_and_count(
        |s| plan.env.build(s),
        |obs, rng| agent.select_action(obs, ActionMode::Greedy, rng),
        eval.steps,
        &eval_seeds(seed, eval.seeds_per_run),
    )?;
    Ok(Some(EvalSummary::from(&stats)))
}

/// Block accumulator for downsampled logging.
struct Block {
    reward: f64,
    resets: u32,
    len: u64,
}

/// Trains one arm on one seed. Errors raised mid-run end the run and are
/// reported in [`RunOutcome::failure`]; only setup errors are returned.
pub fn run_single(plan: &ArmPlan, seed: u64, config_hash: &str) -> Result<RunOutcome> {
    let mut env = plan.env.build(seed)?;
    let obs_spec = env.observation_spec();
    let mut agent = build_agent(&plan.agent, &plan.centering, &obs_spec, &env.action_spec(), seed)?;
    let mut rng = rng::stream(seed, Stream::Exploration);
    let mut log = RunLog::new(seed, config_hash);
    let mut obs = env.observation();
    let stride = plan.logging.stride;
    let mut block = Block {
        reward: 0.0,
        resets: 0,
        len: 0,
    };
    let mut failure = None;
    for t in 1..=plan.total_steps {
        let result = (|| -> Result<()> {
            let mode = if agent.steps() < plan.agent.warmup_steps {
                ActionMode::Warmup
            } else {
                ActionMode::Explore
            };
            let action = agent.select_action(&obs, mode, &mut rng)?;
            let step = env.step(&action)?;
            if !step.reward.is_finite() {
                return Err(Error::NonFinite(format!("reward {}", step.reward)));
            }
            agent.observe(Transition {
                state: std::mem::replace(&mut obs, step.observation.clone()),
                action,
                reward: step.reward,
                next_state: step.observation,
            })?;
            block.reward += step.reward;
            block.resets += step.reset_occurred as u32;
            block.len += 1;
            if block.len == stride || t == plan.total_steps {
                log.push(LogRecord {
                    step: t,
                    reward: block.reward / block.len as f64,
                    resets: block.resets,
                    rbar: agent.rbar(),
                    trace: plan.logging.trace.then(|| obs.features(&obs_spec)),
                })?;
                block = Block {
                    reward: 0.0,
                    resets: 0,
                    len: 0,
                };
            }
            Ok(())
        })();
        if let Err(e) = result {
            log::warn!("{} seed {seed} failed at step {t}: {e}", plan.name);
            failure = Some(RunFailure {
                step: t,
                message: e.to_string(),
            });
            break;
        }
    }
    log.finish();
    let eval = if failure.is_none() {
        match greedy_eval(plan, agent.as_ref(), seed) {
            Ok(e) => e,
            Err(e) => {
                failure = Some(RunFailure {
                    step: plan.total_steps,
                    message: format!("evaluation: {e}"),
                });
                None
            }
        }
    } else {
        None
    };
    Ok(RunOutcome {
        arm: plan.name.clone(),
        seed,
        log,
        failure,
        eval,
    })
}

/// Runs every arm on every seed on a pool of `workers` threads. Results
/// do not depend on `workers`.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<Vec<RunOutcome>> {
    use rayon::prelude::*;
    let plans = config.plans()?;
    let hash = config.hash();
    let jobs: Vec<(&ArmPlan, u64)> = plans.iter().flat_map(|p| config.seeds.iter().map(move |s| (p, *s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(plan, seed)| {
                log::info!("start {} seed {seed}", plan.name);
                let out = run_single(plan, *seed, &hash);
                log::info!("done {} seed {seed}", plan.name);
                out
            })
            .collect()
    })
}

/// Point of an aggregate learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    /// Final windowed reward rate of each completed run, in seed order.
    pub finals: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSummary>,
    /// Per-seed mean greedy reward rate, when evaluated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval_rates: Vec<f64>,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub spec: CompareSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ComparisonReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub arm: String,
    pub seed: u64,
    #[serde(rename = "final")]
    pub final_rate: Option<f64>,
    pub failure: Option<RunFailure>,
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub config_hash: String,
    pub code_version: String,
    pub window: u64,
    pub arms: Vec<ArmSummary>,
    pub comparisons: Vec<ComparisonEntry>,
    /// Arm with the highest mean final rate.
    pub best_arm: Option<String>,
    pub runs: Vec<RunEntry>,
}

impl Summary {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn comparison(&self, candidate: &str, reference: &str) -> Option<&ComparisonEntry> {
        self.comparisons
            .iter()
            .find(|c| c.spec.candidate == candidate && c.spec.reference == reference)
    }
}

fn final_rate(run: &RunOutcome, window: u64) -> Option<f64> {
    if run.failure.is_some() {
        return None;
    }
    windowed_reward_rate(&run.log, window).ok()
}

fn aggregate_curve(runs: &[&RunOutcome], window: u64, stride: u64) -> Vec<CurvePoint> {
    let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for run in runs {
        if let Ok(curve) = reward_rate_curve(&run.log, window, stride) {
            for (s, v) in curve {
                by_step.entry(s).or_default().push(v);
            }
        }
    }
    by_step
        .into_iter()
        .map(|(step, v)| {
            let (mean, stderr) = mean_stderr(&v);
            CurvePoint {
                step,
                mean,
                stderr,
                n: v.len(),
            }
        })
        .collect()
}

/// Per-arm statistics, comparisons and the best arm. `compare_specs`
/// replaces the config's own `[[compare]]` list when given.
pub fn aggregate(config: &ExperimentConfig, runs: &[RunOutcome], compare_specs: Option<&[CompareSpec]>) -> Result<Summary> {
    let plans = config.plans()?;
    let mut arms = Vec::with_capacity(plans.len());
    let mut entries = Vec::new();
    for plan in &plans {
        let mut mine: Vec<&RunOutcome> = runs.iter().filter(|r| r.arm == plan.name).collect();
        mine.sort_by_key(|r| r.seed);
        let mut finals = Vec::new();
        let mut eval_rates = Vec::new();
        let mut eval_resets = Vec::new();
        for run in &mine {
            let f = final_rate(run, config.window);
            finals.extend(f);
            if let Some(e) = &run.eval {
                eval_rates.push(e.rate_mean);
                eval_resets.push(e.resets_mean);
            }
            entries.push(RunEntry {
                arm: run.arm.clone(),
                seed: run.seed,
                final_rate: f,
                failure: run.failure.clone(),
                eval: run.eval.clone(),
            });
        }
        let (mean, stderr) = mean_stderr(&finals);
        let eval = (!eval_rates.is_empty()).then(|| {
            let (rate_mean, rate_stderr) = mean_stderr(&eval_rates);
            let (resets_mean, resets_stderr) = mean_stderr(&eval_resets);
            EvalSummary {
                rate_mean,
                rate_stderr,
                resets_mean,
                resets_stderr,
            }
        });
        arms.push(ArmSummary {
            name: plan.name.clone(),
            mean,
            stderr,
            failures: mine.iter().filter(|r| r.failure.is_some()).count(),
            curve: aggregate_curve(&mine, config.window, config.logging.curve_stride),
            finals,
            eval,
            eval_rates,
        });
    }
    let specs = compare_specs.unwrap_or(&config.compare);
    let mut random_cache: BTreeMap<(String, Metric), Result<Vec<f64>>> = BTreeMap::new();
    let comparisons = specs
        .iter()
        .map(|spec| {
            let result = comparison(config, &plans, &arms, spec, &mut random_cache);
            match result {
                Ok(report) => ComparisonEntry {
                    spec: spec.clone(),
                    report: Some(report),
                    error: None,
                },
                Err(e) => ComparisonEntry {
                    spec: spec.clone(),
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let best_arm = arms
        .iter()
        .filter(|a| a.mean.is_finite())
        .max_by(|a, b| a.mean.total_cmp(&b.mean))
        .map(|a| a.name.clone());
    Ok(Summary {
        name: config.name.clone(),
        config_hash: config.hash(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        window: config.window,
        arms,
        comparisons,
        best_arm,
        runs: entries,
    })
}

fn arm_samples(arms: &[ArmSummary], name: &str, metric: Metric) -> Result<Vec<f64>> {
    let arm = arms
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::Config(format!("unknown arm `{name}`")))?;
    Ok(match metric {
        Metric::Final => arm.finals.clone(),
        Metric::Eval => {
            if arm.eval_rates.is_empty() {
                return Err(Error::InsufficientData(format!("arm `{name}` was not evaluated")));
            }
            arm.eval_rates.clone()
        }
    })
}

fn comparison(
    config: &ExperimentConfig,
    plans: &[ArmPlan],
    arms: &[ArmSummary],
    spec: &CompareSpec,
    random_cache: &mut BTreeMap<(String, Metric), Result<Vec<f64>>>,
) -> Result<ComparisonReport> {
    let cand = ArmStats::new(&spec.candidate, arm_samples(arms, &spec.candidate, spec.metric)?);
    let reference = ArmStats::new(&spec.reference, arm_samples(arms, &spec.reference, spec.metric)?);
    let base = if spec.baseline == "random" {
        let key = (spec.candidate.clone(), spec.metric);
        let samples = random_cache
            .entry(key)
            .or_insert_with(|| {
                let plan = plans
                    .iter()
                    .find(|p| p.name == spec.candidate)
                    .ok_or_else(|| Error::Config(format!("unknown arm `{}`", spec.candidate)))?;
                let steps = match (spec.metric, &plan.eval) {
                    (Metric::Eval, Some(e)) => e.steps,
                    _ => config.window,
                };
                let seeds: Vec<u64> = config.seeds.iter().map(|s| s.wrapping_add(u64::MAX / 2)).collect();
                Ok(random_policy_baseline(|s| plan.env.build(s), steps, &seeds)?.rates)
            })
            .as_ref()
            .map_err(|e| Error::Config(e.to_string()))?;
        ArmStats::new("random", samples.clone())
    } else {
        ArmStats::new(&spec.baseline, arm_samples(arms, &spec.baseline, spec.metric)?)
    };
    compare(&cand, &reference, &base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABULAR: &str = r#"
name = "tab"
total_steps = 3000
window = 1000
seeds = [1, 2, 3]
[logging]
stride = 7
curve_stride = 500
[eval]
steps = 400
seeds_per_run = 2
[env.base]
kind = "tabular"
mdp = { random = { seed = 4, states = 5, actions = 2 } }
[agent]
algorithm = "q_learning"
[[arms]]
name = "plain"
[[arms]]
name = "rc"
centering = { mode = "td_based", eta = 0.5 }
[[compare]]
candidate = "rc"
reference = "plain"
baseline = "random"
"#;

    #[test]
    fn worker_count_does_not_change_results() {
        let c = ExperimentConfig::from_toml(TABULAR).unwrap();
        let a = run_experiment(&c, 1).unwrap();
        let b = run_experiment(&c, 4).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((&x.arm, x.seed), (&y.arm, y.seed));
            assert_eq!(x.log, y.log);
            assert_eq!(x.eval, y.eval);
        }
    }

    #[test]
    fn downsampled_log_keeps_totals() {
        let c = ExperimentConfig::from_toml(TABULAR).unwrap();
        let per_step = ExperimentConfig::from_toml(&TABULAR.replace("stride = 7", "stride = 1")).unwrap();
        let plan = &c.plans().unwrap()[1];
        let fine_plan = &per_step.plans().unwrap()[1];
        let coarse = run_single(plan, 2, "h").unwrap();
        let fine = run_single(fine_plan, 2, "h").unwrap();
        assert_eq!(coarse.log.records().len(), 3000usize.div_ceil(7));
        assert_eq!(fine.log.records().len(), 3000);
        assert!((coarse.log.total_reward() - fine.log.total_reward()).abs() < 1e-9);
        assert_eq!(coarse.log.total_resets(), fine.log.total_resets());
        assert!(coarse.log.records().iter().all(|r| r.rbar.is_some()));
    }

    #[test]
    fn summary_has_every_arm_and_comparison() {
        let c = ExperimentConfig::from_toml(TABULAR).unwrap();
        let runs = run_experiment(&c, 2).unwrap();
        let s = aggregate(&c, &runs, None).unwrap();
        assert_eq!(s.arms.len(), 2);
        assert!(s.arms.iter().all(|a| a.finals.len() == 3 && a.failures == 0));
        assert!(s.arms.iter().all(|a| a.eval.is_some() && a.eval_rates.len() == 3));
        assert_eq!(s.runs.len(), 6);
        let entry = s.comparison("rc", "plain").unwrap();
        assert!(entry.error.is_none(), "{:?}", entry.error);
        let rep = entry.report.as_ref().unwrap();
        assert_eq!(rep.arms, vec!["rc", "plain", "random"]);
        let best = s.best_arm.clone().unwrap();
        assert!(s.arms.iter().all(|a| a.mean <= s.arm(&best).unwrap().mean));
        let curve = &s.arms[0].curve;
        assert_eq!(curve.iter().map(|p| p.step).collect::<Vec<_>>(), vec![1000, 1500, 2000, 2500, 3000]);
        assert!(curve.iter().all(|p| p.n == 3));
    }

    #[test]
    fn failure_is_recorded_not_fatal() {
        // Two huge offsets overflow the reward to infinity on the first step.
        let text = TABULAR.replace(
            "[[arms]]\nname = \"plain\"",
            "[[arms]]\nname = \"plain\"\nwrappers = [{ kind = \"reward_offset\", offset = 1e308 }, { kind = \"reward_offset\", offset = 1e308 }]",
        );
        let c = ExperimentConfig::from_toml(&text).unwrap();
        let runs = run_experiment(&c, 2).unwrap();
        let plain: Vec<_> = runs.iter().filter(|r| r.arm == "plain").collect();
        assert!(plain.iter().all(|r| r.failure.as_ref().is_some_and(|f| f.step == 1)));
        let s = aggregate(&c, &runs, None).unwrap();
        assert_eq!(s.arm("plain").unwrap().failures, 3);
        assert_eq!(s.arm("rc").unwrap().failures, 0);
        assert!(s.comparison("rc", "plain").unwrap().error.is_some());
        assert_eq!(s.best_arm.as_deref(), Some("rc"));
    }
}
