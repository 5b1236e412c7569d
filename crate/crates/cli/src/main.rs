use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use contrl::experiment::{aggregate, emit_outputs, report, run_experiment, CompareSpec, ExperimentConfig, Summary};
use contrl::oracle::Check;

#[derive(Parser)]
#[command(name = "contrl", version, about = "Continuing-task RL experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every arm of a sweep on every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Parallel runs. Defaults to the config's `workers`, then the CPU count.
        #[arg(long, env = "CONTRL_WORKERS")]
        workers: Option<usize>,
        /// Output directory. Defaults to the config's `out_dir`, then `runs/<name>`.
        #[arg(long, env = "CONTRL_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Recompute statistics of a finished sweep from its logs.
    Report {
        #[arg(long)]
        sweep: PathBuf,
        /// `candidate,reference,baseline[,final|eval]`, several separated by `;`.
        /// Without it the sweep's own comparisons are used.
        #[arg(long)]
        compare: Option<String>,
    },
    /// Run self-checks against independent oracles.
    Oracle {
        #[arg(long = "check", value_enum, required = true)]
        checks: Vec<CheckArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
    Laurent,
    #[value(name = "td0-convergence")]
    Td0Convergence,
    Gradients,
    Wrappers,
    All,
}

impl CheckArg {
    fn expand(self) -> Vec<Check> {
        match self {
            CheckArg::Laurent => vec![Check::Laurent],
            CheckArg::Td0Convergence => vec![Check::Td0Convergence],
            CheckArg::Gradients => vec![Check::Gradients],
            CheckArg::Wrappers => vec![Check::Wrappers],
            CheckArg::All => Check::ALL.to_vec(),
        }
    }
}

fn print_summary(summary: &Summary) {
    println!("{} (window {})", summary.name, summary.window);
    println!("{:<20} {:>12} {:>10} {:>6} {:>9}", "arm", "mean", "stderr", "runs", "failures");
    for arm in &summary.arms {
        println!(
            "{:<20} {:>12.5} {:>10.5} {:>6} {:>9}",
            arm.name,
            arm.mean,
            arm.stderr,
            arm.finals.len(),
            arm.failures
        );
        if let Some(e) = &arm.eval {
            println!(
                "{:<20} greedy rate {:.5} ± {:.5}, resets {:.2} ± {:.2}",
                "", e.rate_mean, e.rate_stderr, e.resets_mean, e.resets_stderr
            );
        }
    }
    for c in &summary.comparisons {
        let s = &c.spec;
        match (&c.report, &c.error) {
            (Some(r), _) => println!(
                "{} vs {} (baseline {}): improvement {}, t = {:.3}, df = {:.2}, p = {:.4}{}",
                s.candidate,
                s.reference,
                s.baseline,
                r.pct_improvement.map_or("n/a".into(), |v| format!("{:.1}%", 100.0 * v)),
                r.t,
                r.df,
                r.p_value,
                if r.significant { " *" } else { "" }
            ),
            (None, e) => println!(
                "{} vs {}: {}",
                s.candidate,
                s.reference,
                e.as_deref().unwrap_or("no result")
            ),
        }
    }
    if let Some(best) = &summary.best_arm {
        println!("best arm: {best}");
    }
}

fn run(config_path: &Path, workers: Option<usize>, out: Option<PathBuf>) -> Result<ExitCode> {
    let config = ExperimentConfig::from_path(config_path)?;
    let workers = workers
        .or(config.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    let out = out
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&config.name));
    log::info!("{} runs on {workers} workers into {}", config.plans()?.len() * config.seeds.len(), out.display());
    let runs = run_experiment(&config, workers)?;
    let summary = aggregate(&config, &runs, None)?;
    emit_outputs(&out, &config, &runs, &summary).with_context(|| format!("writing {}", out.display()))?;
    print_summary(&summary);
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn report_cmd(sweep: &Path, compare: Option<&str>) -> Result<ExitCode> {
    let specs = compare.map(CompareSpec::parse_list).transpose()?;
    let summary = report(sweep, specs.as_deref())?;
    print_summary(&summary);
    Ok(ExitCode::SUCCESS)
}

fn oracle(checks: &[CheckArg]) -> Result<ExitCode> {
    let mut all_passed = true;
    for check in checks.iter().flat_map(|c| c.expand()) {
        for outcome in check.run()? {
            println!("[{}] {outcome}", check.name());
            all_passed &= outcome.passed;
        }
    }
    Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, workers, out } => run(&config, workers, out),
        Command::Report { sweep, compare } => report_cmd(&sweep, compare.as_deref()),
        Command::Oracle { checks } => oracle(&checks),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
