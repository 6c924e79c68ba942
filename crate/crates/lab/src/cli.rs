//! `lecnet gen-data | train | gradcheck | report`.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error or a
//! failed gradient check. Diagnostics go to standard error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use lecnet_core::gradcheck::{default_suite, CheckReport};
use lecnet_core::objectives::Mode;

use crate::config::Config;
use crate::csvio::write_csv;
use crate::error::{LabError, LabResult};
use crate::runs;

#[derive(Debug, Parser)]
#[command(name = "lecnet", version, about = "Expansion-and-compression networks for few-shot class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|_| format!("unknown mode {s:?}; expected baseline, ne, nc or sa"))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the configured blob dataset as CSV plus a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: the config's output directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the session protocol for every configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Train only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Run the gradient oracle suite and print its JSON report.
    Gradcheck {
        /// Also write `gradcheck.json` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Tolerance for every finite-difference check.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tabulate mean final accuracy per mode and session into `report.csv`.
    Report {
        /// Output directory holding `runs/`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Take the output directory from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> LabResult<()> {
    match command {
        Command::GenData { config, out } => {
            let config = Config::load(&config)?;
            let out = out.unwrap_or_else(|| config.output.clone());
            gen_data(&config, &out)
        }
        Command::Train {
            config,
            out,
            mode,
            seed,
            parallel,
        } => {
            let config = Config::load(&config)?;
            let out = out.unwrap_or_else(|| config.output.clone());
            let mode = mode.unwrap_or(config.train.mode);
            let seeds = seed.map_or_else(|| config.train.seeds.clone(), |s| vec![s]);
            let agg = runs::train(&config, mode, &seeds, &out, parallel.max(1))?;
            if let Some(last) = agg.sessions.last() {
                eprintln!(
                    "{mode}: {} seed(s), final-session accuracy {:.4} ± {:.4}",
                    agg.seed_count, last.acc_mean, last.acc_std
                );
            }
            Ok(())
        }
        Command::Gradcheck { out, tolerance, seed } => gradcheck(out.as_deref(), tolerance, seed),
        Command::Report { out, config } => {
            let out = match (out, config) {
                (Some(out), _) => out,
                (None, Some(c)) => Config::load(&c)?.output,
                (None, None) => PathBuf::from("out"),
            };
            let rows = runs::report(&out)?;
            eprintln!("{} mode(s) written to {}", rows.len(), out.join(runs::REPORT_FILE).display());
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    file: &'a str,
    samples: usize,
    classes: usize,
    dim: usize,
    spec: &'a lecnet_core::dataset::BlobSpec,
    protocol: lecnet_core::dataset::Protocol,
}

fn gen_data(config: &Config, out: &Path) -> LabResult<()> {
    let spec = config
        .data
        .blobs
        .as_ref()
        .ok_or_else(|| LabError::Config("gen-data needs a `blobs` data source".into()))?;
    let set = config.dataset()?;
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    write_csv(&set, &out.join("data.csv"))?;
    let manifest = Manifest {
        file: "data.csv",
        samples: set.len(),
        classes: set.classes(),
        dim: set.dim(),
        spec,
        protocol: config.data.protocol,
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("plain data") + "\n";
    fs::write(&path, text).map_err(|e| LabError::io(&path, e))
}

#[derive(Serialize)]
struct CheckLine<'a> {
    name: &'a str,
    points: usize,
    max_rel_err: f64,
    tolerance: f64,
    pass: bool,
}

/// JSON array of check results (without notes).
pub fn gradcheck_json(reports: &[CheckReport]) -> String {
    let lines: Vec<CheckLine> = reports
        .iter()
        .map(|r| CheckLine {
            name: &r.name,
            points: r.points,
            max_rel_err: r.max_rel_err,
            tolerance: r.tolerance,
            pass: r.pass,
        })
        .collect();
    serde_json::to_string_pretty(&lines).expect("finite values") + "\n"
}

fn gradcheck(out: Option<&Path>, tolerance: Option<f64>, seed: u64) -> LabResult<()> {
    if let Some(t) = tolerance {
        if !(t > 0.0 && t.is_finite()) {
            return Err(LabError::Config(format!("tolerance must be positive, got {t}")));
        }
    }
    let reports = default_suite(seed, tolerance)?;
    let json = gradcheck_json(&reports);
    print!("{json}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let path = dir.join("gradcheck.json");
        fs::write(&path, &json).map_err(|e| LabError::io(&path, e))?;
    }
    for r in &reports {
        eprintln!(
            "{} {}: {} point(s), max rel err {:.3e} (tol {:.1e}); {}",
            if r.pass { "ok  " } else { "FAIL" },
            r.name,
            r.points,
            r.max_rel_err,
            r.tolerance,
            r.notes
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(LabError::Config(format!("failed checks: {}", failed.join(", "))))
    }
}
