//! Run orchestration and the files it produces: per-seed metrics CSVs,
//! checkpoints and feature dumps, per-mode aggregates and the report table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lecnet_core::dataset::{split_sessions, LabeledSet};
use lecnet_core::metrics::{MetricRow, Split};
use lecnet_core::objectives::Mode;
use lecnet_core::trainer::{run_protocol_with_model, RunReport};

use crate::checkpoint;
use crate::config::Config;
use crate::csvio::dump_features;
use crate::error::{LabError, LabResult};

pub const METRICS_HEADER: &str = "session,epoch,split,acc,drift,sparsity,tau,loss_total,loss_c,loss_d,loss_reg";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const REPORT_FILE: &str = "report.csv";

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

/// Metrics CSV text, one line per row.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.session,
            r.epoch,
            r.split.name(),
            r.acc,
            r.drift,
            join(&r.sparsity),
            join(&r.tau),
            r.loss_total,
            r.loss.classification,
            r.loss.distillation,
            r.loss.regularizer(),
        );
    }
    out
}

/// The columns of a metrics CSV row needed to rebuild session finals.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLine {
    pub session: usize,
    pub epoch: usize,
    pub split: String,
    pub acc: f64,
    pub drift: f64,
    pub sparsity: Vec<f64>,
}

pub fn read_metrics(path: &Path) -> LabResult<Vec<MetricsLine>> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(LabError::Config(format!("{}: not a metrics file", path.display())));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let bad = |column: usize| LabError::NonNumeric {
            path: path.to_path_buf(),
            line: i as u64 + 2,
            column,
            cell: cells.get(column).unwrap_or(&"").to_string(),
        };
        if cells.len() != 11 {
            return Err(LabError::RaggedRow {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                expected: 11,
                actual: cells.len(),
            });
        }
        let num = |c: usize| cells[c].parse::<f64>().map_err(|_| bad(c));
        let sparsity = if cells[5].is_empty() {
            Vec::new()
        } else {
            cells[5]
                .split(';')
                .map(|v| v.parse::<f64>().map_err(|_| bad(5)))
                .collect::<LabResult<_>>()?
        };
        out.push(MetricsLine {
            session: cells[0].parse().map_err(|_| bad(0))?,
            epoch: cells[1].parse().map_err(|_| bad(1))?,
            split: cells[2].to_string(),
            acc: num(3)?,
            drift: num(4)?,
            sparsity,
        });
    }
    Ok(out)
}

/// Final `all`-split row per session: the last epoch logged for it.
pub fn session_finals(lines: &[MetricsLine]) -> Vec<MetricsLine> {
    let mut finals: Vec<MetricsLine> = Vec::new();
    for l in lines.iter().filter(|l| l.split == Split::All.name()) {
        match finals.iter_mut().find(|f| f.session == l.session) {
            Some(f) if l.epoch >= f.epoch => *f = l.clone(),
            Some(_) => {}
            None => finals.push(l.clone()),
        }
    }
    finals.sort_by_key(|f| f.session);
    finals
}

pub fn mode_dir(output: &Path, mode: Mode) -> PathBuf {
    output.join("runs").join(mode.name())
}

pub fn seed_dir(output: &Path, mode: Mode, seed: u64) -> PathBuf {
    mode_dir(output, mode).join(format!("seed{seed}"))
}

fn write(path: &Path, text: &str) -> LabResult<()> {
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Trains one seed and writes its files. Outputs appear only if every file
/// was written; a failed seed leaves nothing behind.
pub fn run_seed(config: &Config, set: &LabeledSet, mode: Mode, seed: u64, output: &Path) -> LabResult<RunReport> {
    let stream = split_sessions(set, config.data.protocol, seed)?;
    let (model, report) = run_protocol_with_model(&stream, &config.model.arch, &config.hyper(seed), mode)?;
    let dir = seed_dir(output, mode, seed);
    let staging = dir.with_file_name(format!(".seed{seed}.partial"));
    let result = (|| {
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| LabError::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| LabError::io(&staging, e))?;
        write(&staging.join(METRICS_FILE), &metrics_csv(&report.rows))?;
        checkpoint::save(&model, &staging.join(CHECKPOINT_FILE))?;
        let last = stream.sessions.last().expect("at least the base session");
        dump_features(&model, &last.cumulative_test, &staging.join(FEATURES_FILE))?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
        }
        fs::rename(&staging, &dir).map_err(|e| LabError::io(&dir, e))
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result.map(|_| report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionAggregate {
    pub session: usize,
    pub acc_mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub acc_std: f64,
    pub drift_mean: f64,
    /// Mean over seeds of the mean indicator over branches; absent without
    /// branches.
    pub sparsity_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub seed_count: usize,
    pub sessions: Vec<SessionAggregate>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn branch_mean(sparsity: &[f64]) -> Option<f64> {
    (!sparsity.is_empty()).then(|| mean(sparsity))
}

/// Per-session mean and spread of the final accuracy across seeds.
pub fn aggregate(mode: Mode, reports: &[RunReport]) -> LabResult<AggregateReport> {
    let first = reports.first().ok_or_else(|| LabError::NoRuns(format!("no runs for mode {mode}")))?;
    let sessions = first.finals.len();
    if reports.iter().any(|r| r.finals.len() != sessions) {
        return Err(LabError::Config("runs differ in session count".into()));
    }
    let sessions = (0..sessions)
        .map(|t| {
            let acc: Vec<f64> = reports.iter().map(|r| r.finals[t].acc_all).collect();
            let drift: Vec<f64> = reports.iter().map(|r| r.finals[t].drift).collect();
            let sp: Vec<f64> = reports.iter().filter_map(|r| branch_mean(&r.finals[t].sparsity)).collect();
            SessionAggregate {
                session: t,
                acc_mean: mean(&acc),
                acc_std: sample_std(&acc),
                drift_mean: mean(&drift),
                sparsity_mean: (!sp.is_empty()).then(|| mean(&sp)),
            }
        })
        .collect();
    Ok(AggregateReport {
        mode,
        seeds: reports.iter().map(|r| r.seed).collect(),
        seed_count: reports.len(),
        sessions,
    })
}

/// Trains every seed of `config` in `mode` (up to `parallel` at a time),
/// then writes the mode's aggregate.
pub fn train(config: &Config, mode: Mode, seeds: &[u64], output: &Path, parallel: usize) -> LabResult<AggregateReport> {
    train_runs(config, mode, seeds, output, parallel).map(|(agg, _)| agg)
}

/// As [`train`], also returning the per-seed reports in seed order.
pub fn train_runs(
    config: &Config,
    mode: Mode,
    seeds: &[u64],
    output: &Path,
    parallel: usize,
) -> LabResult<(AggregateReport, Vec<RunReport>)> {
    let set = config.dataset()?;
    let dir = mode_dir(output, mode);
    fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    let one = |&seed: &u64| run_seed(config, &set, mode, seed, output);
    let reports: Vec<RunReport> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
        pool.install(|| seeds.par_iter().map(one).collect::<LabResult<_>>())?
    } else {
        seeds.iter().map(one).collect::<LabResult<_>>()?
    };
    let agg = aggregate(mode, &reports)?;
    let text = serde_json::to_string_pretty(&agg).expect("finite values") + "\n";
    write(&dir.join(AGGREGATE_FILE), &text)?;
    Ok((agg, reports))
}

/// One row of the report table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub mode: Mode,
    pub seeds: usize,
    /// Mean final accuracy per session.
    pub acc: Vec<f64>,
    /// Mean final-session drift.
    pub drift: f64,
    /// Mean final-session indicator mean, if the mode has branches.
    pub sparsity: Option<f64>,
}

/// Builds the mode-by-session table from the per-seed metrics CSVs under
/// `<output>/runs/` and writes `<output>/report.csv`.
pub fn report(output: &Path) -> LabResult<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        let dir = mode_dir(output, mode);
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        let mut files: Vec<(u64, PathBuf)> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let seed = name.strip_prefix("seed")?.parse().ok()?;
                let path = e.path().join(METRICS_FILE);
                path.is_file().then_some((seed, path))
            })
            .collect();
        if files.is_empty() {
            continue;
        }
        files.sort();
        let finals: Vec<Vec<MetricsLine>> = files
            .iter()
            .map(|(_, p)| read_metrics(p).map(|l| session_finals(&l)))
            .collect::<LabResult<_>>()?;
        let sessions = finals[0].len();
        if sessions == 0 || finals.iter().any(|f| f.len() != sessions) {
            return Err(LabError::Config(format!(
                "{}: runs differ in session count",
                dir.display()
            )));
        }
        let acc = (0..sessions)
            .map(|t| mean(&finals.iter().map(|f| f[t].acc).collect::<Vec<_>>()))
            .collect();
        let last = sessions - 1;
        let drift = mean(&finals.iter().map(|f| f[last].drift).collect::<Vec<_>>());
        let sp: Vec<f64> = finals.iter().filter_map(|f| branch_mean(&f[last].sparsity)).collect();
        rows.push(ReportRow {
            mode,
            seeds: files.len(),
            acc,
            drift,
            sparsity: (!sp.is_empty()).then(|| mean(&sp)),
        });
    }
    if rows.is_empty() {
        return Err(LabError::NoRuns(format!(
            "no completed runs under {}",
            output.join("runs").display()
        )));
    }
    let sessions = rows.iter().map(|r| r.acc.len()).max().unwrap_or(0);
    let mut text = String::from("mode");
    for t in 0..sessions {
        let _ = write!(text, ",session{t}");
    }
    text.push_str(",drift,sparsity\n");
    for r in &rows {
        text.push_str(r.mode.name());
        for t in 0..sessions {
            text.push(',');
            if let Some(a) = r.acc.get(t) {
                text.push_str(&a.to_string());
            }
        }
        let _ = writeln!(
            text,
            ",{},{}",
            r.drift,
            r.sparsity.map(|s| s.to_string()).unwrap_or_default()
        );
    }
    write(&output.join(REPORT_FILE), &text)?;
    Ok(rows)
}
