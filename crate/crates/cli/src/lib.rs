//! Config-driven experiment runner for shadowlab.
//!
//! A run reads an experiment file, executes one pipeline on one built-in
//! scenario and writes `report.json`, `series.csv` and `meta.json` (plus any
//! pipeline-specific files) to the output directory.

pub mod config;
pub mod pipelines;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};

use shadowlab::scenarios::{builtin, builtin_names, builtin_params};

pub use config::{ConfigError, ExperimentConfig};
pub use pipelines::{Pipeline, PipelineOutput, SeriesRow, PIPELINES};

/// Exit code of a run whose analysis came out negative.
pub const EXIT_NEGATIVE: u8 = 2;

/// Command-line overrides of the `[run]` section.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOverrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub pipeline: String,
    pub verdict: String,
    pub positive: bool,
    pub summary: String,
}

impl RunSummary {
    pub fn exit_code(&self) -> u8 {
        if self.positive {
            0
        } else {
            EXIT_NEGATIVE
        }
    }
}

/// `name (param=default, ...)` lines for every built-in scenario.
pub fn list_scenarios() -> Vec<String> {
    builtin_names()
        .into_iter()
        .map(|name| {
            let params = builtin_params(name).unwrap_or_default();
            if params.is_empty() {
                name.to_string()
            } else {
                let p: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                format!("{name} ({})", p.join(", "))
            }
        })
        .collect()
}

pub fn list_pipelines() -> Vec<String> {
    PIPELINES
        .iter()
        .map(|(n, d)| format!("{n:<18} {d}"))
        .collect()
}

/// Long-format CSV with columns `series,index,x,value`.
pub fn series_csv(rows: &[SeriesRow]) -> String {
    let mut s = String::from("series,index,x,value\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.series, r.index, r.x, r.value).expect("write to string");
    }
    s
}

/// Deterministic report: no timings, no paths.
pub fn report_json(
    cfg: &ExperimentConfig,
    scenario_params: &Value,
    seed: u64,
    out: &PipelineOutput,
) -> Value {
    let mut m = Map::new();
    m.insert("pipeline".into(), json!(cfg.pipeline));
    m.insert(
        "scenario".into(),
        json!({"name": cfg.scenario, "params": scenario_params}),
    );
    m.insert("seed".into(), json!(seed));
    for (k, v) in &out.fields {
        m.insert(k.clone(), v.clone());
    }
    m.insert("verdict".into(), json!(out.verdict));
    m.insert("summary".into(), json!(out.summary));
    Value::Object(m)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Run an experiment file.
pub fn run_file(path: &Path, overrides: &RunOverrides) -> Result<RunSummary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    run_text(&text, &path.display().to_string(), overrides)
        .with_context(|| format!("in {}", path.display()))
}

/// Run an experiment given as text; `source` is recorded in `meta.json`.
pub fn run_text(text: &str, source: &str, overrides: &RunOverrides) -> Result<RunSummary> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let mut cfg = ExperimentConfig::parse(text)?;
    let scenario = builtin(&cfg.scenario, &cfg.scenario_params)?;
    let pipeline = Pipeline::parse(
        &cfg.pipeline,
        cfg.pipeline_line,
        &mut cfg.pipeline_params,
        &cfg.scenario,
        scenario.spec.dim(),
    )?;
    let seed = overrides.seed.or(cfg.seed).unwrap_or(0);
    let threads = overrides.threads.or(cfg.threads);
    let out_dir = overrides
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("shadowlab-out"));

    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = threads {
            b = b.num_threads(t);
        }
        b.build().context("building the thread pool")?
    };
    let output = pool.install(|| pipeline.run(&scenario, seed))?;
    let used_threads = pool.current_num_threads();

    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let params = serde_json::to_value(&scenario.params)?;
    let report = report_json(&cfg, &params, seed, &output);
    write(
        &out_dir,
        "report.json",
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    write(&out_dir, "series.csv", &series_csv(&output.series))?;
    for (name, contents) in &output.files {
        write(&out_dir, name, contents)?;
    }
    let files: Vec<&str> = ["report.json", "series.csv"]
        .into_iter()
        .chain(output.files.iter().map(|(n, _)| n.as_str()))
        .collect();
    let exit = if output.positive { 0 } else { EXIT_NEGATIVE };
    let meta = json!({
        "tool": "shadowlab",
        "cli_version": env!("CARGO_PKG_VERSION"),
        "core_version": shadowlab::VERSION,
        "config": source,
        "config_text": text,
        "pipeline": pipeline.name(),
        "scenario": cfg.scenario,
        "seed": seed,
        "threads": used_threads,
        "started_unix_seconds": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "exit_code": exit,
        "files": files,
    });
    write(
        &out_dir,
        "meta.json",
        &(serde_json::to_string_pretty(&meta)? + "\n"),
    )?;
    Ok(RunSummary {
        out_dir,
        pipeline: pipeline.name().to_string(),
        verdict: output.verdict,
        positive: output.positive,
        summary: output.summary,
    })
}
