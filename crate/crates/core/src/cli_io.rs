//! Config parsing, experiment dispatch and result files.
//!
//! Seeding: a master seed `s` expands through `seed::derive(s, label, index)` (SHA-256 of
//! the triple) into independent streams, e.g. `("replicate", r)` for matrices,
//! `("se", 0)` for state-evolution noise, `("z0" | "mu0" | "xi" | "masks", ·)` for fixed
//! problem data. Results depend only on the config and the master seed.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{dispatch, ComparisonReport, ExperimentConfig, ExperimentOutput, PlotPoint};

/// Shortest float format that round-trips: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and validates a JSON config, filling defaults and rejecting unknown keys.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// JSON with defaults filled in and keys sorted.
pub fn canonical_json(cfg: &ExperimentConfig) -> String {
    let v: Value = serde_json::to_value(cfg).expect("config serializes");
    serde_json::to_string(&v).expect("value serializes")
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    format!("{:x}", Sha256::digest(canonical_json(cfg).as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub versions: Value,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub dry_run: bool,
    pub outputs: Vec<String>,
    /// `"pass"`, `"fail"`, `"error"` or `"not_run"`.
    pub status: String,
    pub error: Option<String>,
    /// Some outputs were written before an error.
    pub partial: bool,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// One row per statistic.
pub fn write_report_csv(report: &ComparisonReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "statistic", "t", "coordinate", "psi", "estimate_a", "se_a", "estimate_b", "se_b", "gap", "combined_se",
        "tolerance", "pass",
    ])?;
    for s in &report.statistics {
        w.write_record([
            s.name.clone(),
            s.t.to_string(),
            s.coordinate.map(|k| k.to_string()).unwrap_or_default(),
            s.psi.clone(),
            fmt_f64(s.estimate_a),
            fmt_f64(s.se_a),
            fmt_f64(s.estimate_b),
            fmt_f64(s.se_b),
            fmt_f64(s.gap),
            fmt_f64(s.combined_se),
            fmt_f64(s.tolerance),
            s.pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plot data with columns `(series, x, y, y_err)`.
pub fn emit_plot_data(points: &[PlotPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series", "x", "y", "y_err"])?;
    for p in points {
        w.write_record([p.series.clone(), fmt_f64(p.x), fmt_f64(p.y), fmt_f64(p.y_err)])?;
    }
    w.flush()?;
    Ok(())
}

fn write_table(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn summary(cfg: &ExperimentConfig, out: &ExperimentOutput) -> Value {
    let report = |r: &ComparisonReport| {
        json!({
            "replicates": r.replicates,
            "divergent_a": r.divergent_a,
            "divergent_b": r.divergent_b,
            "statistics": r.statistics.len(),
            "failed": r.statistics.iter().filter(|s| !s.pass).count(),
        })
    };
    let body = match out {
        ExperimentOutput::Comparison(r) => report(r),
        ExperimentOutput::Sweep(v) => json!(v.iter().map(|(n, r)| json!({"n": n, "report": report(r)})).collect::<Vec<_>>()),
        ExperimentOutput::Decay(d) => json!({
            "fit": d.fit, "converged": d.converged, "iterations": d.iterations,
            "residual": d.residual, "sparsity": d.sparsity, "r2_min": d.r2_min,
        }),
        ExperimentOutput::Delocalization(d) => json!({ "replicates": d.replicates, "rows": d.rows }),
    };
    json!({ "experiment": cfg.experiment, "passed": out.passed(), "result": body })
}

/// Writes the files for `out` into `dir`; returns their names.
pub fn write_outputs(cfg: &ExperimentConfig, out: &ExperimentOutput, dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    match out {
        ExperimentOutput::Comparison(r) => {
            write_report_csv(r, &dir.join("report.csv"))?;
            names.push("report.csv".to_string());
        }
        ExperimentOutput::Sweep(v) => {
            for (n, r) in v {
                let name = format!("report_n{n}.csv");
                write_report_csv(r, &dir.join(&name))?;
                names.push(name);
            }
        }
        ExperimentOutput::Decay(d) => {
            let rows = d.rows.iter().map(|r| vec![r.t.to_string(), fmt_f64(r.l2_over_sqrt_n), fmt_f64(r.linf)]).collect();
            write_table(&dir.join("decay.csv"), &["t", "l2_over_sqrt_n", "linf"], rows)?;
            names.push("decay.csv".to_string());
        }
        ExperimentOutput::Delocalization(d) => {
            let rows = d
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.t.to_string(),
                        fmt_f64(r.linf),
                        fmt_f64(r.rms),
                        fmt_f64(r.ratio),
                        fmt_f64(r.bound),
                        opt_f64(r.loo_gap),
                        r.flagged.to_string(),
                    ]
                })
                .collect();
            write_table(&dir.join("delocalization.csv"), &["t", "linf", "rms", "ratio", "bound", "loo_gap", "flagged"], rows)?;
            names.push("delocalization.csv".to_string());
        }
    }
    emit_plot_data(&out.plot_points(), &dir.join("plot.csv"))?;
    names.push("plot.csv".to_string());
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary(cfg, out))? + "\n")?;
    names.push("summary.json".to_string());
    Ok(names)
}

fn write_manifest(m: &RunManifest, dir: &Path) -> Result<()> {
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

/// Runs `cfg`, writing `config.json`, the result files and `manifest.json` into `out_dir`.
/// With `dry_run` only the config and manifest are written. On error the manifest records
/// the message (and whether outputs were partially written) before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, dry_run: bool) -> Result<(RunManifest, Option<ExperimentOutput>)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), canonical_json(cfg) + "\n")?;
    let mut manifest = RunManifest {
        experiment: cfg.experiment.clone(),
        config_hash: config_hash(cfg),
        master_seed: cfg.seed,
        versions: json!({ env!("CARGO_PKG_NAME"): env!("CARGO_PKG_VERSION") }),
        started_unix: now(),
        finished_unix: 0.0,
        dry_run,
        outputs: vec!["config.json".into()],
        status: "not_run".into(),
        error: None,
        partial: false,
    };
    if dry_run {
        manifest.finished_unix = now();
        write_manifest(&manifest, out_dir)?;
        return Ok((manifest, None));
    }
    let result = dispatch(cfg).and_then(|out| {
        let names = write_outputs(cfg, &out, out_dir)?;
        Ok((out, names))
    });
    manifest.finished_unix = now();
    match result {
        Ok((out, names)) => {
            manifest.outputs.extend(names);
            manifest.status = if out.passed() { "pass" } else { "fail" }.into();
            write_manifest(&manifest, out_dir)?;
            Ok((manifest, Some(out)))
        }
        Err(e) => {
            manifest.status = "error".into();
            manifest.error = Some(e.to_string());
            manifest.partial = ["report.csv", "plot.csv", "decay.csv", "delocalization.csv"]
                .iter()
                .any(|f| out_dir.join(f).exists());
            write_manifest(&manifest, out_dir)?;
            Err(e)
        }
    }
}

/// Default output directory for a config: `runs/<experiment>-<hash prefix>`.
pub fn default_out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}", cfg.experiment, &config_hash(cfg)[..12]))
}
