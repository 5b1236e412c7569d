use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{CompareSpec, ExperimentConfig};
use super::run::{aggregate, ArmSummary, RunOutcome, Summary};
use crate::error::{Error, Result};
use crate::eval::{LogRecord, RunLog};

fn io(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io(path, e))
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    step: u64,
    reward: f64,
    reset: u32,
    rbar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trace: Option<String>,
}

pub fn seed_csv_path(dir: &Path, arm: &str, seed: u64) -> PathBuf {
    dir.join("arms").join(arm).join(format!("seed_{seed}.csv"))
}

fn write_log(path: &Path, log: &RunLog, trace: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let mut header = vec!["step", "reward", "reset", "rbar"];
    if trace {
        header.push("trace");
    }
    w.write_record(&header).map_err(|e| io(path, e))?;
    for r in log.records() {
        w.serialize(CsvRow {
            step: r.step,
            reward: r.reward,
            reset: r.resets,
            rbar: r.rbar,
            trace: trace.then(|| {
                r.trace
                    .as_deref()
                    .unwrap_or_default()
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(" ")
            }),
        })
        .map_err(|e| io(path, e))?;
    }
    write(path, w.into_inner().map_err(|e| io(path, e))?)
}

fn read_log(path: &Path, seed: u64, hash: &str) -> Result<RunLog> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io(path, e))?;
    let mut log = RunLog::new(seed, hash);
    for row in reader.deserialize::<CsvRow>() {
        let row = row.map_err(|e| io(path, e))?;
        let trace = match row.trace {
            Some(t) => Some(
                t.split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| io(path, e)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        log.push(LogRecord {
            step: row.step,
            reward: row.reward,
            resets: row.reset,
            rbar: row.rbar,
            trace,
        })?;
    }
    log.finish();
    Ok(log)
}

fn curve_csv(arm: &ArmSummary) -> String {
    let mut s = String::from("step,mean,stderr,n\n");
    for p in &arm.curve {
        let _ = writeln!(s, "{},{},{},{}", p.step, p.mean, p.stderr, p.n);
    }
    s
}

/// Writes the sweep directory:
///
/// ```text
/// config.toml
/// arms/<arm>/resolved.toml
/// arms/<arm>/seed_<s>.csv     step,reward,reset,rbar[,trace]
/// curves/<arm>.csv            step,mean,stderr,n
/// summary.json
/// plot.svg                    omitted when there is nothing to draw
/// ```
pub fn emit_outputs(dir: &Path, config: &ExperimentConfig, runs: &[RunOutcome], summary: &Summary) -> Result<()> {
    write(&dir.join("config.toml"), config.to_toml())?;
    for plan in config.plans()? {
        write(&dir.join("arms").join(&plan.name).join("resolved.toml"), plan.to_toml())?;
    }
    for run in runs {
        write_log(&seed_csv_path(dir, &run.arm, run.seed), &run.log, config.logging.trace)?;
    }
    for arm in &summary.arms {
        write(&dir.join("curves").join(format!("{}.csv", arm.name)), curve_csv(arm))?;
    }
    let json = serde_json::to_string_pretty(summary)?;
    write(&dir.join("summary.json"), json)?;
    let plot = dir.join("plot.svg");
    match render_svg(&summary.name, &summary.arms) {
        Some(svg) => write(&plot, svg)?,
        None => {
            let _ = fs::remove_file(&plot);
        }
    }
    Ok(())
}

/// A sweep directory read back from disk.
pub struct Sweep {
    pub config: ExperimentConfig,
    pub runs: Vec<RunOutcome>,
    pub summary: Summary,
}

/// Reloads the per-seed logs of a sweep directory. Failures and
/// deployment results come from its `summary.json`.
pub fn load_sweep(dir: &Path) -> Result<Sweep> {
    let config = ExperimentConfig::from_path(&dir.join("config.toml"))?;
    let summary_path = dir.join("summary.json");
    let text = fs::read_to_string(&summary_path).map_err(|e| io(&summary_path, e))?;
    let summary: Summary = serde_json::from_str(&text)?;
    if summary.config_hash != config.hash() {
        return Err(Error::Config(format!(
            "{}: summary was produced by a different config",
            dir.display()
        )));
    }
    let mut runs = Vec::with_capacity(summary.runs.len());
    for entry in &summary.runs {
        let log = read_log(&seed_csv_path(dir, &entry.arm, entry.seed), entry.seed, &summary.config_hash)?;
        runs.push(RunOutcome {
            arm: entry.arm.clone(),
            seed: entry.seed,
            log,
            failure: entry.failure.clone(),
            eval: entry.eval.clone(),
        });
    }
    Ok(Sweep { config, runs, summary })
}

/// Recomputes the aggregate of a stored sweep, optionally against a new
/// comparison list.
pub fn report(dir: &Path, compare: Option<&[CompareSpec]>) -> Result<Summary> {
    let sweep = load_sweep(dir)?;
    aggregate(&sweep.config, &sweep.runs, compare)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Mean curves with ±1 standard-error bands. `None` when no arm has a curve.
pub fn render_svg(title: &str, arms: &[ArmSummary]) -> Option<String> {
    let points: Vec<_> = arms.iter().flat_map(|a| &a.curve).filter(|p| p.mean.is_finite()).collect();
    if points.is_empty() {
        return None;
    }
    let (w, h, ml, mr, mt, mb) = (800.0, 480.0, 70.0, 160.0, 40.0, 50.0);
    let x0 = points.iter().map(|p| p.step).min()? as f64;
    let mut x1 = points.iter().map(|p| p.step).max()? as f64;
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    let lo = points.iter().map(|p| p.mean - p.stderr).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.mean + p.stderr).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(1e-9);
    let (y0, y1) = (lo - pad, hi + pad);
    let sx = |s: f64| ml + (s - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |v: f64| mt + (y1 - v) / (y1 - y0) * (h - mt - mb);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - ml - mr,
        h - mt - mb
    );
    for k in 0..=4 {
        let v = y0 + (y1 - y0) * k as f64 / 4.0;
        let s = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, ml - 6.0, sy(v) + 4.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{s:.0}</text>"#, sx(s), h - mb + 18.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, (ml + w - mr) / 2.0, h - 8.0);
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16,{}) rotate(-90)" text-anchor="middle">reward rate</text>"#,
        (mt + h - mb) / 2.0
    );
    for (i, arm) in arms.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let curve: Vec<_> = arm.curve.iter().filter(|p| p.mean.is_finite()).collect();
        if curve.is_empty() {
            continue;
        }
        let upper = curve.iter().map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean + p.stderr)));
        let lower = curve.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean - p.stderr)));
        let band: Vec<_> = upper.chain(lower).collect();
        let _ = writeln!(svg, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.join(" "));
        let line: Vec<_> = curve.iter().map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, line.join(" "));
        let ly = mt + 16.0 + 18.0 * i as f64;
        let lx = w - mr + 12.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, lx + 20.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&arm.name));
    }
    svg.push_str("</svg>\n");
    Some(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
