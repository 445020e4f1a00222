//! Command-line entry point: `run`, `export` and `inspect`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::behavior::{decay_f, decay_g, decay_h};
use crate::env_model::{load_environment, DecayParams, Environment};
use crate::error::Error;
use crate::logkit;
use crate::metrics::{self, MetricStore};
use crate::rl_harness::{Experiment, ExperimentResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

pub const RUN_FILES: [&str; 5] = [
    "logs.jsonl",
    "metrics.jsonl",
    "decisions.jsonl",
    "result.json",
    "manifest.json",
];

/// Largest n in the decay_shapes export.
pub const DECAY_SHAPES_MAX_N: u32 = 50;

#[derive(Debug, Parser)]
#[command(name = "nudgesim", version, about = "Simulate app users reacting to nudges")]
struct Cli {
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    /// Worker threads for per-user simulation (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the configured environment and write a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed; recorded in the manifest.
        #[arg(long)]
        seed: Option<u64>,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Write a plot-ready CSV from a run directory or decay parameters.
    Export {
        #[arg(long, value_enum)]
        what: ExportKind,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Config to take decay parameters from (decay_shapes only).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; defaults to `<run>/<what>.csv`, or stdout without a run.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a config summary and population statistics.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ExportKind {
    ActivityCurve,
    RegretCurve,
    DecayShapes,
    Metrics,
}

impl ExportKind {
    fn file_name(self) -> &'static str {
        match self {
            ExportKind::ActivityCurve => "activity_curve.csv",
            ExportKind::RegretCurve => "regret_curve.csv",
            ExportKind::DecayShapes => "decay_shapes.csv",
            ExportKind::Metrics => "metrics.csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

/// `manifest.json`: enough to check that a run directory is intact and reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub files: Vec<ManifestFile>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Command failure with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => EXIT_IO,
            _ => EXIT_INVALID,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Error::io(path, e).into())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<Environment, Failure> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Failure::invalid(format!("{}: config is not UTF-8", path.display())))?;
    let mut env = load_environment(&text)
        .map_err(|e| Failure::from(e).with_prefix(&path.display().to_string()))?;
    if let Some(seed) = seed {
        env.seed = seed;
    }
    Ok(env)
}

impl Failure {
    fn with_prefix(mut self, prefix: &str) -> Self {
        self.message = format!("{prefix}: {}", self.message);
        self
    }
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        pool = pool.num_threads(n.max(1));
    }
    let pool = match pool.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_IO;
        }
    };
    let quiet = cli.quiet;
    let outcome = pool.install(|| match cli.command {
        Command::Run {
            config,
            out,
            seed,
            force,
        } => cmd_run(&config, &out, seed, force, quiet),
        Command::Export {
            what,
            run,
            config,
            out,
        } => cmd_export(what, run.as_deref(), config.as_deref(), out.as_deref()),
        Command::Inspect { config, seed } => cmd_inspect(&config, seed),
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn temp_dir_for(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    parent.join(format!(".{name}.tmp-{}", std::process::id()))
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("serializable");
        out.push(b'\n');
    }
    out
}

fn cmd_run(config: &Path, out: &Path, seed: Option<u64>, force: bool, quiet: bool) -> Result<(), Failure> {
    let env = load_config(config, seed)?;
    if out.exists() && !force {
        return Err(Failure {
            code: EXIT_IO,
            message: format!("{} already exists (pass --force to replace it)", out.display()),
        });
    }
    let tmp = temp_dir_for(out);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let written = write_run(&env, &tmp, quiet).and_then(|()| {
        if out.exists() {
            fs::remove_dir_all(out).map_err(|e| Failure::from(Error::io(out, e)))?;
        }
        fs::rename(&tmp, out).map_err(|e| Error::io(out, e).into())
    });
    if written.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    written?;
    if !quiet {
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn write_run(env: &Environment, dir: &Path, quiet: bool) -> Result<(), Failure> {
    let primary = Experiment::new(env, env.rl.policy.clone())
        .metrics_path(dir.join("metrics.jsonl"))
        .run()?;
    if !quiet {
        eprintln!(
            "simulated {} users x {} days with {}",
            primary.result.user_count,
            primary.result.horizon_days,
            env.rl.policy.name()
        );
    }
    let mut result = primary.result;
    for spec in &env.rl.compare_policies {
        let other = Experiment::new(env, spec.clone()).keep_logs(false).run()?;
        result.policies.extend(other.result.policies);
        if !quiet {
            eprintln!("simulated comparison policy {}", spec.name());
        }
    }

    write_file(&dir.join("logs.jsonl"), &logkit::serialize(&primary.logs))?;
    write_file(&dir.join("decisions.jsonl"), &jsonl(&result.decisions))?;
    write_file(&dir.join("result.json"), result.to_json().as_bytes())?;

    let mut files = Vec::new();
    for name in &RUN_FILES[..4] {
        let bytes = read_file(&dir.join(name))?;
        files.push(ManifestFile {
            name: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: env.seed,
        config_sha256: sha256_hex(env.to_json().as_bytes()),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), text.as_bytes())
}

fn load_result(run: &Path) -> Result<ExperimentResult, Failure> {
    let path = run.join("result.json");
    let bytes = read_file(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

/// decay_shapes CSV: `n,f,g,h` for n = 0..=DECAY_SHAPES_MAX_N.
pub fn decay_shapes_csv(p: &DecayParams) -> String {
    let mut out = String::from("n,f,g,h\n");
    for n in 0..=DECAY_SHAPES_MAX_N {
        let _ = writeln!(out, "{n},{},{},{}", decay_f(n, p), decay_g(n, p), decay_h(n, p));
    }
    out
}

/// regret_curve CSV: `day,policy,cumulative_reward` per policy then day.
pub fn regret_curve_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("day,policy,cumulative_reward\n");
    for policy in &result.policies {
        for day in &policy.days {
            let _ = writeln!(out, "{},{},{}", day.day, policy.policy_name, day.cumulative_reward);
        }
    }
    out
}

/// activity_curve CSV: population means per day, users without a metric row counting as zero.
pub fn activity_curve_csv(result: &ExperimentResult, store: &MetricStore) -> String {
    let days = result.horizon_days as usize;
    let mut actions = vec![0u64; days];
    let mut sessions = vec![0u64; days];
    let mut active = vec![0u64; days];
    for row in store.rows() {
        let i = row.day as usize;
        if i < days {
            actions[i] += row.daily_action_count;
            sessions[i] += row.session_count;
            active[i] += u64::from(row.active);
        }
    }
    let users = result.user_count.max(1) as f64;
    let mut out = String::from("day,users,mean_actions,mean_sessions,active_fraction\n");
    for day in 0..days {
        let _ = writeln!(
            out,
            "{day},{},{},{},{}",
            result.user_count,
            actions[day] as f64 / users,
            sessions[day] as f64 / users,
            active[day] as f64 / users
        );
    }
    out
}

fn cmd_export(what: ExportKind, run: Option<&Path>, config: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let need_run = || run.ok_or_else(|| Failure::invalid(format!("--run is required for {what:?}")));
    let csv = match what {
        ExportKind::DecayShapes => {
            let params = match config {
                Some(path) => load_config(path, None)?.contexts[0].decay_params,
                None => DecayParams::default(),
            };
            decay_shapes_csv(&params)
        }
        ExportKind::RegretCurve => regret_curve_csv(&load_result(need_run()?)?),
        ExportKind::ActivityCurve => {
            let run = need_run()?;
            let metrics_path = run.join("metrics.jsonl");
            if !metrics_path.exists() {
                return Err(Failure::invalid(format!("missing {}", metrics_path.display())));
            }
            let result = load_result(run)?;
            activity_curve_csv(&result, &open_existing_store(&metrics_path)?)
        }
        ExportKind::Metrics => {
            let metrics_path = need_run()?.join("metrics.jsonl");
            if !metrics_path.exists() {
                return Err(Failure::invalid(format!("missing {}", metrics_path.display())));
            }
            metrics::to_csv(open_existing_store(&metrics_path)?.rows())
        }
    };
    let target = out
        .map(Path::to_path_buf)
        .or_else(|| run.map(|r| r.join(what.file_name())));
    match target {
        Some(path) => write_file(&path, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// Loads a journal read-only by replaying a copy, so exports never touch run outputs.
fn open_existing_store(path: &Path) -> Result<MetricStore, Failure> {
    let bytes = read_file(path)?;
    let rows: Vec<metrics::MetricRow> = logkit::parse_jsonl(&bytes)?;
    let mut store = MetricStore::in_memory();
    store.upsert(&rows)?;
    Ok(store)
}

fn summary_stats(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

fn cmd_inspect(config: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let env = load_config(config, seed)?;
    let mut out = String::new();
    let _ = writeln!(out, "seed: {}", env.seed);
    let _ = writeln!(
        out,
        "schedule: {} days, nudge window {} days, max session length {}",
        env.schedule.horizon_days, env.schedule.nudge_window_days, env.schedule.max_session_len
    );
    let _ = writeln!(
        out,
        "rl: policy {}, reward {}, features [{}], actions [{}]",
        env.rl.policy.name(),
        env.rl.reward_metric,
        env.rl.context_features.join(", "),
        env.rl.action_set.join(", ")
    );
    for ctx in &env.contexts {
        let p = ctx.decay_params;
        let _ = writeln!(
            out,
            "context {}: {} states, {} sessions/day, hours [{}, {}), p_online {}, decay k_a={} k_b={} a0={} b0={} c0={}",
            ctx.context_id,
            ctx.baseline_matrix.len(),
            ctx.session_rate_per_day,
            ctx.active_hours.start,
            ctx.active_hours.end,
            ctx.p_online,
            p.k_a,
            p.k_b,
            p.a0,
            p.b0,
            p.c0
        );
    }
    let users = env.population();
    let _ = writeln!(out, "population: {} users", users.len());
    for ctx in &env.contexts {
        let members: Vec<_> = users.iter().filter(|u| u.context_id == ctx.context_id).collect();
        if members.is_empty() {
            continue;
        }
        let _ = writeln!(out, "  {}: {} users", ctx.context_id, members.len());
        for (label, values) in [
            ("alpha", members.iter().map(|u| u.alpha).collect::<Vec<_>>()),
            ("beta", members.iter().map(|u| u.beta).collect()),
            ("gamma", members.iter().map(|u| u.gamma).collect()),
        ] {
            let (mean, min, max) = summary_stats(&values);
            let _ = writeln!(out, "    {label}: mean {mean:.4}, min {min:.4}, max {max:.4}");
        }
    }
    print!("{out}");
    Ok(())
}
