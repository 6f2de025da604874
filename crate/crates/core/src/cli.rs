//! Subcommand implementations behind the `aajr` binary.
//!
//! Exit status: 0 success, 1 a verification check failed, 2 configuration
//! error, 3 runtime or numeric error. Output directories that were not
//! completed carry an `.incomplete` marker file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use walkdir::WalkDir;

use crate::config::{parse_config, RunConfig};
use crate::error::{Error, Result};
use crate::policy::{Checkpoint, Mlp};
use crate::trainer::{price_of_robustness, train, GapReport, RunMetrics, TrainOutcome};
use crate::verification::{run_suite, SuiteInputs, VerifyReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const VERIFY_FILE: &str = "verify.json";
pub const GAP_FILE: &str = "gap_report.json";
pub const INCOMPLETE_MARKER: &str = ".incomplete";

#[derive(Debug, Parser)]
#[command(name = "aajr", version, about = "Adversarial training lab with trajectory-aligned Jacobian regularization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one policy; writes checkpoint.json and metrics.csv.
    Train(RunArgs),
    /// Run the verification suite; writes verify.json.
    Verify(RunArgs),
    /// Budget-matched price-of-robustness sweep; writes gap_report.json.
    Sweep(RunArgs),
    /// Summarize the runs found under a directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Read the output directory from this config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ChecksFailed,
}

pub fn exit_code(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::ChecksFailed) => 1,
        Err(Error::Config { .. } | Error::Dimension { .. } | Error::NoRuns(_)) => 2,
        Err(Error::Numeric { .. } | Error::Io { .. } | Error::Json { .. }) => 3,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_file(path, text + "\n")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Output directory that keeps an `.incomplete` marker until `finish`.
struct OutputDir {
    path: PathBuf,
}

impl OutputDir {
    fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(io_err(path))?;
        write_file(&path.join(INCOMPLETE_MARKER), "")?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn finish(self) -> Result<()> {
        let marker = self.join(INCOMPLETE_MARKER);
        fs::remove_file(&marker).map_err(io_err(&marker))
    }
}

fn write_run(dir: &OutputDir, outcome: &TrainOutcome<f64>) -> Result<()> {
    write_json(&dir.join(CHECKPOINT_FILE), &outcome.params.to_checkpoint())?;
    write_file(&dir.join(METRICS_FILE), outcome.metrics.to_csv())
}

fn resolve_out(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf)
}

/// Trains with the config's `train` block and persists checkpoint and metrics.
/// A diverged run keeps its partial outputs and the `.incomplete` marker.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome<f64>> {
    let env = cfg.environment::<f64>()?;
    let tcfg = cfg.train_config::<f64>()?;
    let initial = cfg.init_policy::<f64>()?;
    tcfg.validate(&env, &initial)?;
    let dir = OutputDir::create(out)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    let outcome = train(&tcfg, &env, initial)?;
    write_run(&dir, &outcome)?;
    if let Some(abort) = &outcome.metrics.aborted {
        return Err(Error::numeric(format!(
            "training step {}: {}",
            abort.step, abort.reason
        )));
    }
    dir.finish()?;
    Ok(outcome)
}

/// Verifies the checkpoint in `out` when present, the freshly initialized
/// policy otherwise.
pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<VerifyReport> {
    let env = cfg.environment::<f64>()?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let policy: Mlp<f64> = if ck_path.exists() {
        let ck: Checkpoint<f64> = read_json(&ck_path)?;
        Mlp::from_checkpoint(ck)?
    } else {
        cfg.init_policy()?
    };
    let tcfg = cfg.train_config::<f64>()?;
    tcfg.validate(&env, &policy)?;
    let dir = OutputDir::create(out)?;
    let inputs = SuiteInputs {
        env: &env,
        set: &tcfg.set,
        inner: &tcfg.inner,
        reg: &tcfg.reg,
        seeds: &cfg.verify.seeds,
        inclusion_samples: cfg.verify.n_inclusion_samples,
        opts: &cfg.verify.options,
    };
    let report = run_suite(&policy, &inputs)?;
    write_json(&dir.join(VERIFY_FILE), &report)?;
    dir.finish()?;
    Ok(report)
}

/// Runs the sweep; each `(seed, mode)` gets its own `seed_<n>/<mode>/` directory.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<GapReport> {
    let env = cfg.environment::<f64>()?;
    let tcfg = cfg.train_config::<f64>()?;
    let sweep = cfg.sweep_config();
    let dir = OutputDir::create(out)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    let outcome = price_of_robustness(&env, &tcfg, &cfg.policy_spec(), &sweep)?;
    for run in &outcome.runs {
        let sub = out
            .join(format!("seed_{}", run.seed))
            .join(run.mode.as_str());
        let run_dir = OutputDir::create(&sub)?;
        write_run(&run_dir, &run.outcome)?;
        if run.outcome.metrics.aborted.is_none() {
            run_dir.finish()?;
        }
    }
    write_json(&dir.join(GAP_FILE), &outcome.report)?;
    dir.finish()?;
    Ok(outcome.report)
}

/// Text summary of every metrics.csv, verify.json and gap_report.json under `dir`.
pub fn cmd_report(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        return Err(Error::NoRuns(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            matches!(
                p.file_name().and_then(|n| n.to_str()),
                Some(METRICS_FILE | VERIFY_FILE | GAP_FILE)
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NoRuns(dir.to_path_buf()));
    }

    let rel = |p: &Path| -> String {
        let parent = p.parent().unwrap_or(p);
        let r = parent.strip_prefix(dir).unwrap_or(parent).display().to_string();
        if r.is_empty() {
            ".".to_string()
        } else {
            r
        }
    };
    let mut train_rows = String::new();
    let mut verify_rows = String::new();
    let mut gap_rows = String::new();
    for path in &files {
        let run = rel(path);
        let incomplete = path.parent().is_some_and(|d| d.join(INCOMPLETE_MARKER).exists());
        let status = if incomplete { "incomplete" } else { "ok" };
        match path.file_name().and_then(|n| n.to_str()) {
            Some(METRICS_FILE) => {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                let m = RunMetrics::from_csv(&text)?;
                let last = m.records.last();
                let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
                let _ = writeln!(
                    train_rows,
                    "{:<32} {:>6} {:>14} {:>14} {:>12} {:>12}  {}",
                    run,
                    m.records.len(),
                    f(last.map(|r| r.robust_loss)),
                    f(last.map(|r| r.nominal_loss)),
                    f(last.map(|r| r.max_dir_amp)),
                    f(last.map(|r| r.mean_spectral)),
                    status
                );
            }
            Some(VERIFY_FILE) => {
                let r: VerifyReport = read_json(path)?;
                let failed = r.failures().count();
                let _ = writeln!(
                    verify_rows,
                    "{:<32} {:>6} {:>7}  {}",
                    run,
                    r.checks.len(),
                    failed,
                    if r.pass { "pass" } else { "FAIL" }
                );
            }
            Some(GAP_FILE) => {
                let g: GapReport = read_json(path)?;
                let _ = writeln!(
                    gap_rows,
                    "{:<32} {:>8.4} {:>12.6} {:>12.6} {:>12.6}  {}",
                    run,
                    g.gamma,
                    g.t_hat,
                    g.t_hat_ad,
                    g.pooled_std_err,
                    if g.ordering_holds { "holds" } else { "violated" }
                );
            }
            _ => {}
        }
    }

    let mut out = String::new();
    if !train_rows.is_empty() {
        let _ = writeln!(
            out,
            "{:<32} {:>6} {:>14} {:>14} {:>12} {:>12}  status",
            "training run", "steps", "robust_loss", "nominal_loss", "max_dir_amp", "spectral"
        );
        out.push_str(&train_rows);
    }
    if !verify_rows.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "{:<32} {:>6} {:>7}  result", "verification", "checks", "failed");
        out.push_str(&verify_rows);
    }
    if !gap_rows.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "{:<32} {:>8} {:>12} {:>12} {:>12}  ordering",
            "sweep", "gamma", "T_hat", "T_hat_ad", "pooled_se"
        );
        out.push_str(&gap_rows);
    }
    Ok(out)
}

/// Loads the config (if any) and dispatches.
pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Train(args) => {
            let cfg = parse_config(&args.config)?;
            let out = resolve_out(&cfg, args.out.as_deref());
            let outcome = cmd_train(&cfg, &out)?;
            log::info!(
                "trained {} steps, outputs in {}",
                outcome.metrics.records.len(),
                out.display()
            );
            Ok(Outcome::Success)
        }
        Command::Verify(args) => {
            let cfg = parse_config(&args.config)?;
            let out = resolve_out(&cfg, args.out.as_deref());
            let report = cmd_verify(&cfg, &out)?;
            for c in report.failures() {
                eprintln!(
                    "check failed: {} (seed {:?}){}",
                    c.name,
                    c.seed,
                    c.detail.as_deref().map(|d| format!(": {d}")).unwrap_or_default()
                );
            }
            Ok(if report.pass {
                Outcome::Success
            } else {
                Outcome::ChecksFailed
            })
        }
        Command::Sweep(args) => {
            let cfg = parse_config(&args.config)?;
            let out = resolve_out(&cfg, args.out.as_deref());
            let report = cmd_sweep(&cfg, &out)?;
            println!(
                "T_hat = {:.6}, T_hat_ad = {:.6}, pooled SE = {:.6}, ordering {}",
                report.t_hat,
                report.t_hat_ad,
                report.pooled_std_err,
                if report.ordering_holds { "holds" } else { "violated" }
            );
            Ok(Outcome::Success)
        }
        Command::Report(args) => {
            let dir = match (args.out, args.config) {
                (Some(out), _) => out,
                (None, Some(path)) => parse_config(&path)?.output_dir,
                (None, None) => {
                    return Err(Error::config("report", "pass --out <dir> or --config <path>"))
                }
            };
            print!("{}", cmd_report(&dir)?);
            Ok(Outcome::Success)
        }
    }
}
