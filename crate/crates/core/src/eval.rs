//! Measurement: windowed reward rates, frozen-policy deployment with reset
//! counting, improvement percentages and Welch's t-test.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Environment, Observation, CATCH_COLS, CATCH_ROWS};
use crate::error::{Error, Result};
use crate::mdp::stationary_of_matrix;
use crate::rng::{self, Rng, Stream};

/// One log line. With downsampled logging a record covers every step since
/// the previous record: `reward` is the mean over that span and `resets`
/// the count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub reward: f64,
    pub resets: u32,
    pub rbar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

/// Append-only record stream of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub config_hash: String,
    records: Vec<LogRecord>,
    finished: bool,
}

impl RunLog {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            seed,
            config_hash: config_hash.into(),
            records: Vec::new(),
            finished: false,
        }
    }

    /// Appends a record; steps must increase strictly, starting at 1 or later.
    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if self.finished {
            return Err(Error::InvalidParameter("run log is closed".into()));
        }
        let last = self.last_step();
        if record.step <= last {
            return Err(Error::InvalidParameter(format!("log step {} after {}", record.step, last)));
        }
        self.records.push(record);
        Ok(())
    }

    /// Single-step convenience for per-step logging.
    pub fn push_step(&mut self, step: u64, reward: f64, reset: bool, rbar: Option<f64>) -> Result<()> {
        self.push(LogRecord {
            step,
            reward,
            resets: reset as u32,
            rbar,
            trace: None,
        })
    }

    pub fn finish(&mut self) {
        self.finished = true;
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn last_step(&self) -> u64 {
        self.records.last().map_or(0, |r| r.step)
    }

    pub fn total_reward(&self) -> f64 {
        self.spans().map(|(r, span)| r.reward * span as f64).sum()
    }

    pub fn total_resets(&self) -> u64 {
        self.records.iter().map(|r| r.resets as u64).sum()
    }

    /// Each record with the number of steps it covers.
    fn spans(&self) -> impl Iterator<Item = (&LogRecord, u64)> {
        let mut prev = 0;
        self.records.iter().map(move |r| {
            let span = r.step - prev;
            prev = r.step;
            (r, span)
        })
    }

    /// Cumulative reward at each record boundary, starting with `(0, 0.0)`.
    fn prefix(&self) -> Vec<(u64, f64)> {
        let mut out = Vec::with_capacity(self.records.len() + 1);
        out.push((0, 0.0));
        let mut acc = 0.0;
        for (r, span) in self.spans() {
            acc += r.reward * span as f64;
            out.push((r.step, acc));
        }
        out
    }
}

/// Cumulative reward up to `step`, interpolating inside a downsampled record.
fn cumulative_at(prefix: &[(u64, f64)], step: u64) -> f64 {
    let i = prefix.partition_point(|(s, _)| *s < step);
    if i < prefix.len() && prefix[i].0 == step {
        return prefix[i].1;
    }
    let (s0, c0) = prefix[i - 1];
    let (s1, c1) = prefix[i];
    c0 + (c1 - c0) * (step - s0) as f64 / (s1 - s0) as f64
}

/// Mean reward over the last `window` steps. Exact when the logging stride
/// divides `window`; otherwise the one straddling record is split evenly,
/// which moves the result by at most `stride · span(r) / window`.
pub fn windowed_reward_rate(log: &RunLog, window: u64) -> Result<f64> {
    let end = log.last_step();
    if window == 0 || end < window {
        return Err(Error::InsufficientData(format!("log has {end} steps, window needs {window}")));
    }
    let prefix = log.prefix();
    Ok((cumulative_at(&prefix, end) - cumulative_at(&prefix, end - window)) / window as f64)
}

/// Windowed reward rate at every multiple of `stride` from `window` on.
pub fn reward_rate_curve(log: &RunLog, window: u64, stride: u64) -> Result<Vec<(u64, f64)>> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidParameter("window and stride must be positive".into()));
    }
    let prefix = log.prefix();
    let end = log.last_step();
    let first = window.div_ceil(stride) * stride;
    Ok((first..=end)
        .step_by(stride as usize)
        .map(|s| (s, (cumulative_at(&prefix, s) - cumulative_at(&prefix, s - window)) / window as f64))
        .collect())
}

/// Sample mean and standard error `std / √n` (zero for a single sample).
pub fn mean_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployStats {
    pub rate_mean: f64,
    pub rate_stderr: f64,
    pub resets_mean: f64,
    pub resets_stderr: f64,
    pub rates: Vec<f64>,
    pub resets: Vec<u64>,
}

/// Runs a frozen policy for `steps` steps on a fresh environment per seed.
/// The policy draws from the seed's evaluation stream.
pub fn deploy_and_count<E, F, P>(make_env: F, policy: P, steps: u64, seeds: &[u64]) -> Result<DeployStats>
where
    E: Environment,
    F: Fn(u64) -> Result<E>,
    P: Fn(&Observation, &mut Rng) -> Result<Action>,
{
    if steps == 0 || seeds.is_empty() {
        return Err(Error::InvalidParameter("deployment needs steps and seeds".into()));
    }
    let mut rates = Vec::with_capacity(seeds.len());
    let mut resets = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut env = make_env(seed)?;
        let mut rng = rng::stream(seed, Stream::Evaluation);
        let mut obs = env.observation();
        let mut total = 0.0;
        let mut count = 0u64;
        for _ in 0..steps {
            let a = policy(&obs, &mut rng)?;
            let step = env.step(&a)?;
            total += step.reward;
            count += step.reset_occurred as u64;
            obs = step.observation;
        }
        rates.push(total / steps as f64);
        resets.push(count);
    }
    let (rate_mean, rate_stderr) = mean_stderr(&rates);
    let (resets_mean, resets_stderr) = mean_stderr(&resets.iter().map(|c| *c as f64).collect::<Vec<_>>());
    Ok(DeployStats {
        rate_mean,
        rate_stderr,
        resets_mean,
        resets_stderr,
        rates,
        resets,
    })
}

/// Uniformly random policy deployed through [`deploy_and_count`].
pub fn random_policy_baseline<E, F>(make_env: F, steps: u64, seeds: &[u64]) -> Result<DeployStats>
where
    E: Environment,
    F: Fn(u64) -> Result<E>,
{
    let probe = make_env(seeds.first().copied().unwrap_or(0))?;
    let spec = probe.action_spec();
    deploy_and_count(make_env, |_, rng| Ok(spec.sample(rng)), steps, seeds)
}

/// Reward rate of the uniformly random paddle on continuing Catch, from the
/// stationary distribution of the exact `(row, ball column, paddle)` chain.
pub fn catch_random_policy_rate() -> Result<f64> {
    let rows = CATCH_ROWS - 1;
    let idx = |r: usize, b: usize, p: usize| (r * CATCH_COLS + b) * CATCH_COLS + p;
    let n = rows * CATCH_COLS * CATCH_COLS;
    let mut kernel = DMatrix::zeros(n, n);
    let mut reward = vec![0.0; n];
    for r in 0..rows {
        for b in 0..CATCH_COLS {
            for p in 0..CATCH_COLS {
                let from = idx(r, b, p);
                for shift in [-1isize, 0, 1] {
                    let np = (p as isize + shift).clamp(0, CATCH_COLS as isize - 1) as usize;
                    if r + 1 == rows {
                        reward[from] += if np == b { 1.0 } else { -1.0 } / 3.0;
                        for nb in 0..CATCH_COLS {
                            kernel[(from, idx(0, nb, np))] += 1.0 / (3.0 * CATCH_COLS as f64);
                        }
                    } else {
                        kernel[(from, idx(r + 1, b, np))] += 1.0 / 3.0;
                    }
                }
            }
        }
    }
    let d = stationary_of_matrix(&kernel)?;
    Ok(d.iter().zip(&reward).map(|(d, r)| d * r).sum())
}

/// `(candidate − baseline)/(reference − baseline) − 1`, flagged not
/// applicable when the candidate falls below the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub value: f64,
    pub not_applicable: bool,
}

impl Improvement {
    /// The value, or `None` when flagged.
    pub fn reported(&self) -> Option<f64> {
        (!self.not_applicable).then_some(self.value)
    }
}

pub fn percent_improvement(candidate: f64, reference: f64, baseline: f64) -> Result<Improvement> {
    let denom = reference - baseline;
    if denom == 0.0 {
        return Err(Error::DivisionByZero(format!("reference equals baseline ({reference})")));
    }
    Ok(Improvement {
        value: (candidate - baseline) / denom - 1.0,
        not_applicable: candidate < baseline,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn sample_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (mean, x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sided Welch t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData("Welch test needs at least two samples per arm".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = sample_var(a);
    let (mb, vb) = sample_var(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let df = na + nb - 2.0;
        if ma == mb {
            return Ok(WelchResult { t: 0.0, df, p: 1.0 });
        }
        log::warn!("Welch test on zero-variance samples with different means");
        let t = if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
        return Ok(WelchResult { t, df, p: 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchResult {
        t,
        df,
        p: student_t_two_sided(t, df),
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / (df + t * t), 0.5 * df, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms), accurate to ~1e-15 for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)` by Lentz's continued fraction, converged to 1e-15 relative.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + even * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + even / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        h *= d * c;
        let odd = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + odd * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + odd / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Per-arm summary inside a [`ComparisonReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub name: String,
    pub finals: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

impl ArmStats {
    pub fn new(name: impl Into<String>, finals: Vec<f64>) -> Self {
        let (mean, stderr) = mean_stderr(&finals);
        Self {
            name: name.into(),
            finals,
            mean,
            stderr,
        }
    }
}

/// Candidate against reference (Welch) with the improvement percentage
/// relative to a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub arms: Vec<String>,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// `None` when not applicable (candidate below baseline).
    pub pct_improvement: Option<f64>,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub significant: bool,
}

pub fn compare(candidate: &ArmStats, reference: &ArmStats, baseline: &ArmStats) -> Result<ComparisonReport> {
    let imp = percent_improvement(candidate.mean, reference.mean, baseline.mean)?;
    let w = welch_t_test(&candidate.finals, &reference.finals)?;
    let arms = [candidate, reference, baseline];
    Ok(ComparisonReport {
        arms: arms.iter().map(|a| a.name.clone()).collect(),
        means: arms.iter().map(|a| a.mean).collect(),
        stderrs: arms.iter().map(|a| a.stderr).collect(),
        pct_improvement: imp.reported(),
        t: w.t,
        df: w.df,
        p_value: w.p,
        significant: w.p < 0.05,
    })
}
