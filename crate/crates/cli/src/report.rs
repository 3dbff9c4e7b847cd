//! Output files for one run.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use fisherflow::quadrature::ParticleSet;
use serde_json::{json, Map, Value};

use crate::config::Resolved;
use crate::experiments::{MetricRow, RunOutput};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn metrics_csv(rows: &[MetricRow], summary: &[(String, f64)], t_final: f64) -> String {
    let mut s = String::from("t,metric,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", fmt_f64(r.t), r.metric, fmt_f64(r.value));
    }
    for (k, v) in summary {
        let _ = writeln!(s, "{},{},{}", fmt_f64(t_final), k, fmt_f64(*v));
    }
    s
}

pub fn particles_csv(ps: &ParticleSet) -> String {
    let n = ps.dim();
    let mut s = String::from("weight");
    for i in 1..=n {
        let _ = write!(s, ",x{i}");
    }
    s.push('\n');
    for j in 0..ps.len() {
        s.push_str(&fmt_f64(ps.weights()[j]));
        for v in ps.positions().column(j).iter() {
            s.push(',');
            s.push_str(&fmt_f64(*v));
        }
        s.push('\n');
    }
    s
}

/// Paths written by [`write_run`], relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub report: PathBuf,
    pub metrics: PathBuf,
    pub particles: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// The report without its wall-clock field; every value here is a function
/// of the config alone.
pub fn report_value(resolved: &Resolved, out: &RunOutput, checkpoint_names: &[String]) -> Value {
    let hash = resolved.config_hash();
    let seed = resolved.config.seed;
    let records: Vec<Value> = out
        .summary
        .iter()
        .map(|(k, v)| json!({"metric": k, "value": v, "config_hash": hash, "seed": seed}))
        .collect();
    let mut series = Map::new();
    for r in &out.series {
        let entry = series.entry(r.metric.clone()).or_insert_with(|| Value::Array(Vec::new()));
        if let Value::Array(a) = entry {
            a.push(json!([r.t, r.value]));
        }
    }
    json!({
        "experiment": resolved.config.experiment.name(),
        "config": resolved.echo(),
        "config_hash": hash,
        "seed": seed,
        "metrics": records,
        "series": series,
        "final_parameters": out.final_parameters,
        "files": {
            "metrics": "metrics.csv",
            "particles": "particles_final.csv",
            "checkpoints": checkpoint_names,
        },
    })
}

/// Writes `report.json`, `metrics.csv`, `particles_final.csv` and
/// `checkpoints/*.json` under the configured output directory.
pub fn write_run(resolved: &Resolved, out: &RunOutput, wall_clock: f64) -> io::Result<RunFiles> {
    let dir = Path::new(&resolved.config.output_dir).to_path_buf();
    fs::create_dir_all(&dir)?;
    let ck_dir = dir.join("checkpoints");
    if ck_dir.exists() {
        fs::remove_dir_all(&ck_dir)?;
    }
    let mut names = Vec::new();
    let mut checkpoints = Vec::new();
    if !out.checkpoints.is_empty() {
        fs::create_dir_all(&ck_dir)?;
        for (i, (_, v)) in out.checkpoints.iter().enumerate() {
            let name = format!("checkpoints/checkpoint_{i:04}.json");
            fs::write(dir.join(&name), serde_json::to_string(v)? + "\n")?;
            checkpoints.push(dir.join(&name));
            names.push(name);
        }
    }
    let summary: Vec<(String, f64)> = out.summary.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let t_final = out.series.last().map(|r| r.t).unwrap_or(resolved.config.horizon);
    let metrics = dir.join("metrics.csv");
    fs::write(&metrics, metrics_csv(&out.series, &summary, t_final))?;
    let particles = dir.join("particles_final.csv");
    fs::write(&particles, particles_csv(&out.particles))?;

    let mut report = report_value(resolved, out, &names);
    report["wall_clock_seconds"] = json!(wall_clock);
    let report_path = dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(RunFiles {
        dir,
        report: report_path,
        metrics,
        particles,
        checkpoints,
    })
}
