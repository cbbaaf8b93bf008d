//! Replicated benchmark runs with a per-replication CSV and a summary table.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use mmgfm::rng::sub_seed;
use mmgfm::{builtin_scenario, evaluate, fit, gen_scenario, FitConfig, Metrics};
use rayon::prelude::*;

use crate::{CmdResult, Failure, IterFlags, ScenarioFlags};

pub const SCHEMA_VERSION: u32 = 1;

pub const COLUMNS: [&str; 13] = [
    "scenario",
    "sigma2_v",
    "rep",
    "MT_F",
    "MT_H",
    "MT_V",
    "MT_A",
    "MT_B",
    "ME_beta",
    "iterations",
    "seconds",
    "error",
    "schema_version",
];

const METRICS: [&str; 6] = ["MT_F", "MT_H", "MT_V", "MT_A", "MT_B", "ME_beta"];

#[derive(Args)]
pub struct BenchArgs {
    /// Scenario names, comma separated.
    #[arg(required = true, value_delimiter = ',')]
    scenarios: Vec<String>,
    /// Values of the modality-shared factor variance (default: the scenario's own).
    #[arg(long, value_delimiter = ',')]
    sigma2_v: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Per-replication CSV; rows are appended when it already exists.
    #[arg(long)]
    out: PathBuf,
    /// Summary CSV (default: `<out>` with a `_summary` suffix).
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    scenario_flags: ScenarioFlags,
    #[command(flatten)]
    iter: IterFlags,
}

struct Job {
    scenario: String,
    sigma2_v: Option<f64>,
    rep: usize,
}

struct Row {
    scenario: String,
    sigma2_v: f64,
    rep: usize,
    metrics: Option<Metrics>,
    iterations: usize,
    seconds: f64,
    error: String,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Row {
    fn record(&self) -> Vec<String> {
        let m = self.metrics.as_ref();
        vec![
            self.scenario.clone(),
            self.sigma2_v.to_string(),
            self.rep.to_string(),
            opt(m.and_then(|m| m.mt_f)),
            opt(m.and_then(|m| m.mt_h)),
            opt(m.and_then(|m| m.mt_v)),
            opt(m.and_then(|m| m.mt_a)),
            opt(m.and_then(|m| m.mt_b)),
            opt(m.map(|m| m.me_beta)),
            self.iterations.to_string(),
            format!("{:.3}", self.seconds),
            self.error.clone(),
            SCHEMA_VERSION.to_string(),
        ]
    }
}

fn run_job(job: &Job, a: &BenchArgs, seed: u64, deterministic: bool) -> Row {
    // the same data seed for a replication across variance settings
    let data_seed = sub_seed(seed, job.rep as u64);
    let ov = a.scenario_flags.overrides(job.sigma2_v, data_seed);
    let mut row = Row {
        scenario: job.scenario.clone(),
        sigma2_v: job.sigma2_v.unwrap_or(f64::NAN),
        rep: job.rep,
        metrics: None,
        iterations: 0,
        seconds: 0.0,
        error: String::new(),
    };
    let t = Instant::now();
    let outcome = builtin_scenario(&job.scenario, &ov).and_then(|spec| {
        row.sigma2_v = spec.sigma2_v[(0, 0)];
        let (ds, truth) = gen_scenario(&spec)?;
        let cfg = a.iter.apply(FitConfig::new(spec.q, spec.qs.clone()), seed, deterministic);
        let res = fit(&ds, &cfg)?;
        Ok((evaluate(&res, &truth)?, res.iterations))
    });
    row.seconds = t.elapsed().as_secs_f64();
    match outcome {
        Ok((m, it)) => {
            row.metrics = Some(m);
            row.iterations = it;
        }
        Err(e) => row.error = e.to_string(),
    }
    log::info!("{} sigma2_v={} rep {}: {:.1}s", row.scenario, row.sigma2_v, row.rep, row.seconds);
    row
}

/// Opens `path` for appending, writing the header only to a new or empty
/// file and refusing files written with a different schema.
fn open_append(path: &Path) -> Result<csv::Writer<std::fs::File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    let header = COLUMNS.join(",");
    let fresh = match std::fs::File::open(path) {
        Ok(f) => {
            let mut first = String::new();
            BufReader::new(f).read_line(&mut first).map_err(|e| Failure::io(path, e))?;
            if !first.is_empty() && first.trim_end() != header {
                return Err(Failure::io(path, "existing file has a different column layout"));
            }
            first.is_empty()
        }
        Err(_) => true,
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Failure::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(COLUMNS).map_err(|e| Failure::io(path, e))?;
    }
    Ok(w)
}

fn mean_sd(v: &[f64]) -> String {
    if v.is_empty() {
        return String::new();
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return format!("{mean:.2}()");
    }
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    format!("{mean:.2}({sd:.2})")
}

/// Summarize every successful row of the per-replication CSV by
/// (scenario, sigma2_v), in order of first appearance.
fn write_summary(rows_path: &Path, path: &Path) -> CmdResult {
    let mut reader = csv::Reader::from_path(rows_path).map_err(|e| Failure::io(rows_path, e))?;
    let headers = reader.headers().map_err(|e| Failure::io(rows_path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).expect("known column");
    let mut groups: Vec<((String, String), Vec<Vec<f64>>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Failure::io(rows_path, e))?;
        if !rec[col("error")].is_empty() {
            continue;
        }
        let key = (rec[col("scenario")].to_string(), rec[col("sigma2_v")].to_string());
        let idx = match groups.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                groups.push((key, vec![Vec::new(); METRICS.len()]));
                groups.len() - 1
            }
        };
        for (k, name) in METRICS.iter().enumerate() {
            if let Ok(x) = rec[col(name)].parse::<f64>() {
                groups[idx].1[k].push(x);
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::io(path, e))?;
    let mut header = vec!["scenario", "sigma2_v", "reps"];
    header.extend(METRICS);
    header.push("schema_version");
    w.write_record(&header).map_err(|e| Failure::io(path, e))?;
    for ((scenario, sigma2), values) in &groups {
        let reps = values[0].len().max(values[METRICS.len() - 1].len());
        let mut rec = vec![scenario.clone(), sigma2.clone(), reps.to_string()];
        rec.extend(values.iter().map(|v| mean_sd(v)));
        rec.push(SCHEMA_VERSION.to_string());
        w.write_record(&rec).map_err(|e| Failure::io(path, e))?;
    }
    w.flush().map_err(|e| Failure::io(path, e))
}

fn default_summary(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_summary.csv"))
}

pub fn run(a: &BenchArgs, seed: u64, deterministic: bool) -> CmdResult {
    if a.reps == 0 {
        return Err(Failure {
            code: 2,
            msg: "--reps must be at least 1".into(),
        });
    }
    for name in &a.scenarios {
        builtin_scenario(name, &a.scenario_flags.overrides(None, seed))?;
    }
    let variances: Vec<Option<f64>> = if a.sigma2_v.is_empty() {
        vec![None]
    } else {
        a.sigma2_v.iter().map(|&v| Some(v)).collect()
    };
    let mut jobs = Vec::new();
    for scenario in &a.scenarios {
        for &sigma2_v in &variances {
            for rep in 1..=a.reps {
                jobs.push(Job {
                    scenario: scenario.clone(),
                    sigma2_v,
                    rep,
                });
            }
        }
    }
    let rows: Vec<Row> = jobs.par_iter().map(|j| run_job(j, a, seed, deterministic)).collect();

    let mut w = open_append(&a.out)?;
    for row in &rows {
        w.write_record(row.record()).map_err(|e| Failure::io(&a.out, e))?;
    }
    w.flush().map_err(|e| Failure::io(&a.out, e))?;
    let summary = a.summary.clone().unwrap_or_else(|| default_summary(&a.out));
    write_summary(&a.out, &summary)?;

    let ok = rows.iter().filter(|r| r.error.is_empty()).count();
    for r in rows.iter().filter(|r| !r.error.is_empty()) {
        eprintln!("{} sigma2_v={} rep {} failed: {}", r.scenario, r.sigma2_v, r.rep, r.error);
    }
    println!(
        "{ok}/{} replications succeeded; rows in {}, summary in {}",
        rows.len(),
        a.out.display(),
        summary.display()
    );
    std::io::stdout().flush().ok();
    if ok == 0 {
        return Err(Failure {
            code: 1,
            msg: "every replication failed".into(),
        });
    }
    Ok(())
}
