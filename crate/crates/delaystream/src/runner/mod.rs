//! Sweep orchestration: execute the (method x delay x budget x seed) cross
//! product of a plan, persist one trace and summary per run, aggregate the
//! results, and recompute gap/recovery tables from stored summaries.

mod cli;
mod config;
mod selftest;

pub use cli::cli_main;
pub use config::{parse_config, ConfigError, ExperimentPlan, PlanMethod, PlanStream, PlanVariant};
pub use selftest::run_selftest;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::methods::{run_method, MethodSpec, RunError};
use crate::metrics::{backward_transfer, write_summary_json, write_trace_csv, RunSummary};
use crate::model::ModelConfig;
use crate::stream::StreamConfig;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed summary {path}: {message}")]
    BadSummary { path: PathBuf, message: String },
    #[error("aggregate.csv disagrees with the stored run summaries; rerun the plan or remove stale runs")]
    AggregateMismatch,
    #[error("no run summaries found under {0}")]
    NoRuns(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The full identity of one run; hashing it yields the run id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedRun {
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub buffer_capacity: usize,
    pub method: MethodSpec,
}

impl ResolvedRun {
    /// Deterministic id: any field change changes the id.
    pub fn run_id(&self) -> String {
        let canonical = serde_json::to_string(self).expect("run config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut id = String::with_capacity(16);
        for byte in &digest[..8] {
            id.push_str(&format!("{byte:02x}"));
        }
        id
    }
}

/// Outcome of one run within a plan.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_id: String,
    pub summary: Result<RunSummary, String>,
}

/// Enumerate the cross product in (method, delay, budget, seed) order.
pub fn resolve_runs(plan: &ExperimentPlan) -> Vec<ResolvedRun> {
    let mut runs = Vec::new();
    for method in &plan.methods {
        for &delay in &plan.delays {
            for &budget in &plan.budgets {
                for &seed in &plan.seeds {
                    runs.push(ResolvedRun {
                        stream: plan.stream_config(delay, seed),
                        model: plan.model,
                        buffer_capacity: plan.buffer_capacity,
                        method: method.resolve(budget),
                    });
                }
            }
        }
    }
    runs
}

fn execute_run(run: &ResolvedRun, dir: &Path) -> Result<RunSummary, RunError> {
    let output = run_method(
        &run.stream,
        &run.method,
        &run.model,
        run.buffer_capacity,
    )?;
    let bt = if output.handle.validation_set().is_empty() {
        None
    } else {
        Some(backward_transfer(
            &output.classifier,
            output.handle.validation_set(),
        )?)
    };
    let summary = RunSummary {
        d: run.stream.delay,
        c: run.method.budget,
        method: run.method.label(),
        seed: run.stream.seed,
        final_online_acc: output.trace.final_online_accuracy(),
        backward_transfer: bt,
    };

    std::fs::create_dir_all(dir).map_err(RunError::from_io)?;
    let mut trace_file = std::io::BufWriter::new(
        std::fs::File::create(dir.join("trace.csv")).map_err(RunError::from_io)?,
    );
    write_trace_csv(&output.trace, &mut trace_file).map_err(RunError::from_io)?;
    trace_file.flush().map_err(RunError::from_io)?;
    let mut summary_file = std::io::BufWriter::new(
        std::fs::File::create(dir.join("summary.json")).map_err(RunError::from_io)?,
    );
    write_summary_json(&summary, &mut summary_file).map_err(RunError::from_io)?;
    summary_file.flush().map_err(RunError::from_io)?;
    Ok(summary)
}

fn read_summary(path: &Path) -> Result<RunSummary, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| RunnerError::BadSummary {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Execute every run of the plan (parallel across runs, sequential within),
/// writing `<output_dir>/<run-id>/{trace.csv,summary.json}` per run plus
/// `aggregate.csv`, `stats.csv`, and — when runs fail — `errors.csv`.
///
/// Existing run directories are reused unless `overwrite` is set; failures
/// are recorded and the plan continues.
pub fn run_plan(
    plan: &ExperimentPlan,
    workers: usize,
    overwrite: bool,
    verbose: bool,
) -> Result<Vec<RunRecord>, RunnerError> {
    std::fs::create_dir_all(&plan.output_dir).map_err(io_err(&plan.output_dir))?;
    let runs = resolve_runs(plan);

    let execute = |run: &ResolvedRun| -> RunRecord {
        let run_id = run.run_id();
        let dir = plan.output_dir.join(&run_id);
        let summary_path = dir.join("summary.json");
        if !overwrite && summary_path.is_file() {
            if verbose {
                eprintln!("[skip] {run_id} ({})", run.method.label());
            }
            let summary = read_summary(&summary_path).map_err(|e| e.to_string());
            return RunRecord { run_id, summary };
        }
        if verbose {
            eprintln!(
                "[run ] {run_id} method={} d={} C={} seed={}",
                run.method.label(),
                run.stream.delay,
                run.method.budget,
                run.stream.seed
            );
        }
        let summary = execute_run(run, &dir).map_err(|e| e.to_string());
        RunRecord { run_id, summary }
    };

    let records: Vec<RunRecord> = if workers <= 1 {
        runs.iter().map(execute).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool");
        pool.install(|| {
            use rayon::prelude::*;
            runs.par_iter().map(execute).collect()
        })
    };

    write_aggregates(&plan.output_dir, &records)?;
    Ok(records)
}

fn format_float(v: f64) -> String {
    format!("{v}")
}

fn aggregate_csv_text(summaries: &[RunSummary]) -> String {
    let mut rows: Vec<&RunSummary> = summaries.iter().collect();
    rows.sort_by(|a, b| {
        (&a.method, a.d, a.c, a.seed).cmp(&(&b.method, b.d, b.c, b.seed))
    });
    let mut out = String::from("method,d,C,seed,final_acc,backward_transfer\n");
    for s in rows {
        let bt = s.backward_transfer.map(format_float).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.method,
            s.d,
            s.c,
            s.seed,
            format_float(s.final_online_acc),
            bt
        ));
    }
    out
}

fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn stats_csv_text(summaries: &[RunSummary]) -> String {
    let mut groups: Vec<((String, u64, u32), Vec<f64>)> = Vec::new();
    for s in summaries {
        let key = (s.method.clone(), s.d, s.c);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, values)) => values.push(s.final_online_acc),
            None => groups.push((key, vec![s.final_online_acc])),
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::from("method,d,C,runs,mean_final_acc,stdev_final_acc\n");
    for ((method, d, c), values) in groups {
        let (mean, stdev) = mean_stdev(&values);
        out.push_str(&format!(
            "{method},{d},{c},{},{},{}\n",
            values.len(),
            format_float(mean),
            format_float(stdev)
        ));
    }
    out
}

fn write_aggregates(output_dir: &Path, records: &[RunRecord]) -> Result<(), RunnerError> {
    let summaries: Vec<RunSummary> = records
        .iter()
        .filter_map(|r| r.summary.as_ref().ok().cloned())
        .collect();
    let aggregate_path = output_dir.join("aggregate.csv");
    std::fs::write(&aggregate_path, aggregate_csv_text(&summaries))
        .map_err(io_err(&aggregate_path))?;
    let stats_path = output_dir.join("stats.csv");
    std::fs::write(&stats_path, stats_csv_text(&summaries)).map_err(io_err(&stats_path))?;

    let failures: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.summary.is_err())
        .collect();
    if !failures.is_empty() {
        let mut out = String::from("run_id,error\n");
        let mut sorted = failures;
        sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        for r in sorted {
            let err = r.summary.as_ref().err().cloned().unwrap_or_default();
            out.push_str(&format!("{},{}\n", r.run_id, err.replace(',', ";")));
        }
        let errors_path = output_dir.join("errors.csv");
        std::fs::write(&errors_path, out).map_err(io_err(&errors_path))?;
    }
    Ok(())
}

/// One gap/recovery line of a report table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub c: u32,
    pub d: u64,
    pub method: String,
    pub mean_final_acc: f64,
    /// `acc_naive_d - acc_naive_0`; present when both baselines exist.
    pub gap: Option<f64>,
    /// Fraction of `|gap|` recovered over delayed naive.
    pub recovery: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn render(&self) -> String {
        let mut out = String::from("C,d,method,mean_final_acc,gap_vs_naive0,recovery\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.c,
                r.d,
                r.method,
                format_float(r.mean_final_acc),
                r.gap.map(format_float).unwrap_or_default(),
                r.recovery.map(format_float).unwrap_or_default()
            ));
        }
        out
    }
}

/// Recompute the aggregate and the gap/recovery tables from the stored
/// per-run summaries, verifying that `aggregate.csv` matches.
pub fn report(output_dir: &Path) -> Result<Report, RunnerError> {
    let mut summaries = Vec::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(output_dir)
        .map_err(io_err(output_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let path = dir.join("summary.json");
        if path.is_file() {
            summaries.push(read_summary(&path)?);
        }
    }
    if summaries.is_empty() {
        return Err(RunnerError::NoRuns(output_dir.to_path_buf()));
    }

    let aggregate_path = output_dir.join("aggregate.csv");
    if aggregate_path.is_file() {
        let stored = std::fs::read_to_string(&aggregate_path).map_err(io_err(&aggregate_path))?;
        if stored != aggregate_csv_text(&summaries) {
            return Err(RunnerError::AggregateMismatch);
        }
    }

    // Mean final accuracy per (method, d, C).
    let mut groups: Vec<((String, u64, u32), Vec<f64>)> = Vec::new();
    for s in &summaries {
        let key = (s.method.clone(), s.d, s.c);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, values)) => values.push(s.final_online_acc),
            None => groups.push((key, vec![s.final_online_acc])),
        }
    }
    let mean_of = |method: &str, d: u64, c: u32| -> Option<f64> {
        groups
            .iter()
            .find(|((m, gd, gc), _)| m == method && *gd == d && *gc == c)
            .map(|(_, values)| mean_stdev(values).0)
    };

    let mut keys: Vec<(u32, u64, String)> = groups
        .iter()
        .map(|((m, d, c), _)| (*c, *d, m.clone()))
        .collect();
    keys.sort();
    let mut rows = Vec::new();
    for (c, d, method) in keys {
        let mean = mean_of(&method, d, c).expect("group exists");
        let (gap, recovery) = match (mean_of("naive", d, c), mean_of("naive", 0, c)) {
            (Some(naive_d), Some(naive_0)) if d > 0 => {
                let gap = naive_d - naive_0;
                let recovery = if method != "naive" && gap != 0.0 {
                    Some((mean - naive_d) / gap.abs())
                } else {
                    None
                };
                (Some(gap), recovery)
            }
            _ => (None, None),
        };
        rows.push(ReportRow {
            c,
            d,
            method,
            mean_final_acc: mean,
            gap,
            recovery,
        });
    }
    Ok(Report { rows })
}

impl RunError {
    fn from_io(source: std::io::Error) -> RunError {
        RunError::Model(crate::model::ModelError::CheckpointIo(source))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{GeneratorSpec, RotatingGaussians};

    fn small_plan(output_dir: PathBuf) -> ExperimentPlan {
        ExperimentPlan {
            stream: PlanStream {
                n: 4,
                horizon: 12,
                generator: GeneratorSpec::RotatingGaussians(RotatingGaussians {
                    num_classes: 3,
                    dim: 4,
                    noise: 0.3,
                    angular_velocity: 0.01,
                    radius: 1.0,
                }),
                validation_fraction: 0.2,
            },
            model: ModelConfig {
                learning_rate: 0.05,
                ..ModelConfig::default()
            },
            buffer_capacity: 64,
            methods: vec![PlanMethod {
                variant: PlanVariant::Naive,
                composition: None,
                mode: None,
                lambda: None,
                epsilon: None,
            }],
            delays: vec![0, 5],
            budgets: vec![1],
            seeds: vec![1, 2],
            output_dir,
        }
    }

    #[test]
    fn run_ids_are_deterministic_and_field_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let plan = small_plan(dir.path().to_path_buf());
        let runs = resolve_runs(&plan);
        assert_eq!(runs.len(), 4, "1 method x 2 delays x 1 budget x 2 seeds");
        assert_eq!(runs[0].run_id(), runs[0].clone().run_id());
        let ids: std::collections::HashSet<String> =
            runs.iter().map(|r| r.run_id()).collect();
        assert_eq!(ids.len(), 4, "distinct configs hash to distinct ids");

        let mut tweaked = runs[0].clone();
        tweaked.buffer_capacity += 1;
        assert_ne!(tweaked.run_id(), runs[0].run_id());
    }

    #[test]
    fn plan_produces_artifacts_and_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let plan = small_plan(dir.path().join("out"));
        let records = run_plan(&plan, 1, false, false).unwrap();
        assert_eq!(records.len(), 4);
        for r in &records {
            assert!(r.summary.is_ok(), "{:?}", r.summary);
            let run_dir = plan.output_dir.join(&r.run_id);
            assert!(run_dir.join("trace.csv").is_file());
            assert!(run_dir.join("summary.json").is_file());
        }
        let aggregate = std::fs::read_to_string(plan.output_dir.join("aggregate.csv")).unwrap();
        assert_eq!(aggregate.lines().count(), 5, "header + 4 rows\n{aggregate}");
        assert!(aggregate.starts_with("method,d,C,seed,final_acc,backward_transfer\n"));
        let stats = std::fs::read_to_string(plan.output_dir.join("stats.csv")).unwrap();
        assert_eq!(stats.lines().count(), 3, "header + 2 groups\n{stats}");

        // Reports recompute means and the gap against the stored summaries.
        let rep = report(&plan.output_dir).unwrap();
        assert_eq!(rep.rows.len(), 2);
        let delayed = rep.rows.iter().find(|r| r.d == 5).unwrap();
        assert!(delayed.gap.is_some());
        assert!(delayed.recovery.is_none(), "naive has no recovery row");
    }

    #[test]
    fn rerunning_reuses_existing_runs_and_reproduces_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let plan = small_plan(dir.path().join("out"));
        let first = run_plan(&plan, 1, false, false).unwrap();
        let trace_path = plan.output_dir.join(&first[0].run_id).join("trace.csv");
        let before = std::fs::read(&trace_path).unwrap();
        let aggregate_before =
            std::fs::read(plan.output_dir.join("aggregate.csv")).unwrap();

        let second = run_plan(&plan, 1, false, false).unwrap();
        assert_eq!(first.len(), second.len());
        assert_eq!(before, std::fs::read(&trace_path).unwrap());
        assert_eq!(
            aggregate_before,
            std::fs::read(plan.output_dir.join("aggregate.csv")).unwrap()
        );

        // Overwrite mode recomputes and still lands on identical bytes.
        run_plan(&plan, 1, true, false).unwrap();
        assert_eq!(before, std::fs::read(&trace_path).unwrap());
    }

    #[test]
    fn parallel_and_serial_execution_match() {
        let dir = tempfile::tempdir().unwrap();
        let serial_plan = small_plan(dir.path().join("serial"));
        let parallel_plan = small_plan(dir.path().join("parallel"));
        run_plan(&serial_plan, 1, false, false).unwrap();
        run_plan(&parallel_plan, 4, false, false).unwrap();

        let read = |base: &Path| -> Vec<(String, Vec<u8>)> {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(base)
                .unwrap()
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            dirs.into_iter()
                .map(|d| {
                    (
                        d.file_name().unwrap().to_string_lossy().to_string(),
                        std::fs::read(d.join("trace.csv")).unwrap(),
                    )
                })
                .collect()
        };
        assert_eq!(read(&serial_plan.output_dir), read(&parallel_plan.output_dir));
        assert_eq!(
            std::fs::read(serial_plan.output_dir.join("aggregate.csv")).unwrap(),
            std::fs::read(parallel_plan.output_dir.join("aggregate.csv")).unwrap()
        );
    }

    #[test]
    fn report_detects_stale_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let plan = small_plan(dir.path().join("out"));
        run_plan(&plan, 1, false, false).unwrap();
        std::fs::write(plan.output_dir.join("aggregate.csv"), "method,d,C,seed,final_acc,backward_transfer\n").unwrap();
        assert!(matches!(
            report(&plan.output_dir),
            Err(RunnerError::AggregateMismatch)
        ));
    }
}
