//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, Corruption, GradcheckConfig, GradcheckReport};
use crate::models::{save_generator, save_task_model};
use crate::par::Execution;
use crate::regularizers::Schedule;
use crate::tasks::write_records;
use crate::trainer::{
    metrics_jsonl, train_with, write_csv, Method, RunSummary, ScheduledSection, TrainArtifacts,
    TrainConfig,
};

/// Overrides the directory that relative `--out` paths resolve against.
pub const OUT_ROOT_ENV: &str = "ATTENDOUT_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "attendout", version, about = "Learned attention dropout on synthetic tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (relative paths resolve against $ATTENDOUT_OUT_ROOT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run per-example work on one thread.
    #[arg(long)]
    pub sequential: bool,
}

impl Common {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every backward pass.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Perturb the named analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train with a per-layer dropout schedule and report its fidelity.
    ReplaySchedule {
        #[command(flatten)]
        common: Common,
        /// Schedule text file, or a mask trace CSV from an earlier run.
        #[arg(long)]
        schedule: PathBuf,
    },
    /// Run several configurations over a seed set and tabulate dev accuracy.
    Compare {
        /// Configuration files; repeat the flag for each.
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Output directory; one subdirectory per configuration and seed.
        #[arg(long)]
        out: Option<PathBuf>,
        /// First seed of the range.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of seeds.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Run per-example work on one thread.
        #[arg(long)]
        sequential: bool,
    },
}

/// Where a run writes. Relative paths go under the env-var root when set.
pub fn resolve_out(out: Option<&Path>, default: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from);
    let p = out.map_or_else(|| PathBuf::from(default), Path::to_path_buf);
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p,
    }
}

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full configuration, enough to reproduce the run.
    pub config: TrainConfig,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outputs: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let path = path.ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Train and write every artifact into `dir`.
pub fn run_and_write(cfg: &TrainConfig, dir: &Path, command: &str, exec: Execution) -> Result<TrainArtifacts> {
    fs::create_dir_all(dir)?;
    let mut outputs = vec!["manifest.json", "config.toml", "metrics.jsonl", "summary.json", "model.ckpt"];
    match cfg.method {
        Method::Attendout => outputs.extend(["generator.ckpt", "mask_trace.csv"]),
        Method::Scheduled => outputs.push("schedule_trace.csv"),
        _ => {}
    }
    let mut manifest = RunManifest {
        command: command.to_string(),
        config: cfg.clone(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: unix_seconds(),
        finished_unix: None,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let art = train_with(cfg, exec)?;
    let (train, dev, test) = cfg.datasets()?;
    for (name, d) in [("train.tsv", &train), ("dev.tsv", &dev), ("test.tsv", &test)] {
        if !d.is_empty() {
            write_records(d, &dir.join(name))?;
            manifest.outputs.push(name.to_string());
        }
    }
    fs::write(dir.join("metrics.jsonl"), metrics_jsonl(&art.metrics)?)?;
    write_json(&dir.join("summary.json"), &art.summary)?;
    save_task_model(&art.model, &dir.join("model.ckpt"))?;
    if let Some(g) = &art.generator {
        save_generator(g, &dir.join("generator.ckpt"))?;
        write_csv(&art.mask_trace, &dir.join("mask_trace.csv"), &["dropout_step", "layer", "mean_drop_prob"])?;
    }
    if cfg.method == Method::Scheduled {
        write_csv(
            &art.schedule_trace,
            &dir.join("schedule_trace.csv"),
            &["step", "layer", "scheduled_prob", "realized_drop_fraction"],
        )?;
    }
    manifest.finished_unix = Some(unix_seconds());
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(art)
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |a| format!("{:.4}", a))
}

pub fn cmd_train(common: &Common) -> Result<()> {
    let cfg = load_config(common.config.as_deref(), common.seed)?;
    let dir = resolve_out(common.out.as_deref(), &format!("runs/{}-seed{}", cfg.method, cfg.seed));
    let art = run_and_write(&cfg, &dir, "train", common.exec())?;
    let s = &art.summary;
    println!(
        "{}: {} steps, train {:.4}, dev {}, test {} -> {}",
        s.method,
        s.total_steps,
        s.train_acc,
        fmt_acc(s.dev_acc),
        fmt_acc(s.test_acc),
        dir.display()
    );
    Ok(())
}

pub fn cmd_gradcheck(common: &Common, corrupt: Option<String>) -> Result<GradcheckReport> {
    let cfg = match &common.config {
        Some(p) => GradcheckConfig::from_toml(&fs::read_to_string(p)?)?,
        None => GradcheckConfig::default(),
    };
    let report = run_gradcheck(&cfg, common.seed.unwrap_or(0), &Corruption { tensor: corrupt })?;
    for s in &report.suites {
        let worst = s
            .tensors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .map_or("-", |t| t.tensor.as_str());
        println!(
            "{:<18} max rel err {:.3e} ({worst})  {:.3}s",
            s.suite, s.max_rel_err, s.seconds
        );
    }
    println!("overall max rel err {:.3e} (tol {:.1e})", report.max_rel_err(), report.tol);
    if common.out.is_some() || std::env::var_os(OUT_ROOT_ENV).is_some() {
        let dir = resolve_out(common.out.as_deref(), "gradcheck");
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    report.verdict()?;
    Ok(report)
}

/// Probability the trainer used at a breakpoint versus the configured one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakpointCheck {
    pub layer: usize,
    pub step: u64,
    pub configured: f64,
    pub realized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub checks: Vec<BreakpointCheck>,
    /// Breakpoints after the last training step, which cannot be observed.
    pub unreached: usize,
    pub exact: bool,
}

pub fn replay_config(base: &TrainConfig, schedule: Schedule) -> TrainConfig {
    TrainConfig {
        method: Method::Scheduled,
        attendout: None,
        vanilla: None,
        layerdrop: None,
        attn_layerdrop: None,
        scheduled: Some(ScheduledSection {
            p0: None,
            slopes: None,
            schedule_file: None,
            drop_mode: base.scheduled.as_ref().map(|s| s.drop_mode).unwrap_or_default(),
        }),
        schedule: Some(schedule),
        ..base.clone()
    }
}

pub fn cmd_replay_schedule(common: &Common, schedule_path: &Path) -> Result<ReplayReport> {
    let mut base = load_config(common.config.as_deref(), common.seed)?;
    let is_trace = schedule_path.extension().is_some_and(|e| e == "csv");
    let schedule = if is_trace {
        Schedule::from_mask_trace(schedule_path, base.dropout_step as u64)?
    } else {
        Schedule::load(schedule_path)?
    };
    base.schedule = None;
    let cfg = replay_config(&base, schedule.clone());
    cfg.validate()?;
    let dir = resolve_out(common.out.as_deref(), &format!("runs/replay-seed{}", cfg.seed));
    let art = run_and_write(&cfg, &dir, "replay-schedule", common.exec())?;
    fs::write(dir.join("schedule.txt"), schedule.to_text())?;

    let mut checks = Vec::new();
    let mut unreached = 0;
    for (layer, ls) in schedule.layers.iter().enumerate() {
        for &(step, p) in &ls.breakpoints {
            match art.schedule_trace.iter().find(|r| r.step == step && r.layer == layer) {
                Some(r) => checks.push(BreakpointCheck {
                    layer,
                    step,
                    configured: p,
                    realized: r.scheduled_prob,
                }),
                None => unreached += 1,
            }
        }
    }
    let exact = checks.iter().all(|c| c.configured.to_bits() == c.realized.to_bits());
    let report = ReplayReport {
        checks,
        unreached,
        exact,
    };
    write_json(&dir.join("replay_check.json"), &report)?;
    println!(
        "replayed {} layers over {} steps: {} breakpoints checked, {} beyond the run, exact = {}",
        schedule.num_layers(),
        art.summary.total_steps,
        report.checks.len(),
        report.unreached,
        report.exact
    );
    if !report.exact {
        return Err(Error::Contract("realized schedule differs from configured breakpoints".into()));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRun {
    pub seed: u64,
    pub dir: String,
    pub summary: RunSummary,
    /// Per-layer `|last - first|` of the generator's mean drop probability.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_change: Option<Vec<f64>>,
    /// Per-layer mean drop probability averaged over the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_mean: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub config: String,
    pub runs: Vec<CompareRun>,
    pub mean_dev_acc: f64,
    pub std_dev_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
    /// Whether the lowest layer's average drop probability exceeds the
    /// highest layer's, for rows with a learned policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_layers_drop_more: Option<bool>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn trace_stats(art: &TrainArtifacts, layers: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    if art.mask_trace.is_empty() {
        return None;
    }
    let mut first = vec![None; layers];
    let mut last = vec![0.0; layers];
    let mut sum = vec![0.0; layers];
    let mut count = vec![0usize; layers];
    for r in &art.mask_trace {
        first[r.layer].get_or_insert(r.mean_drop_prob);
        last[r.layer] = r.mean_drop_prob;
        sum[r.layer] += r.mean_drop_prob;
        count[r.layer] += 1;
    }
    let change = (0..layers).map(|l| (last[l] - first[l].unwrap_or(last[l])).abs()).collect();
    let mean = (0..layers).map(|l| sum[l] / count[l].max(1) as f64).collect();
    Some((change, mean))
}

/// Load and seed-override configs, checking they differ only in method.
pub fn fair_configs(paths: &[PathBuf]) -> Result<Vec<TrainConfig>> {
    if paths.len() < 2 {
        return Err(Error::Config("compare needs at least two configurations".into()));
    }
    let configs: Vec<TrainConfig> = paths
        .iter()
        .map(|p| {
            TrainConfig::load(p).map(|mut c| {
                c.seed = 0;
                c
            })
        })
        .collect::<Result<_>>()?;
    let key = configs[0].fairness_key()?;
    for (p, c) in paths.iter().zip(&configs).skip(1) {
        if c.fairness_key()? != key {
            return Err(Error::Contract(format!(
                "fairness violation: {} differs from {} beyond the method and its section",
                p.display(),
                paths[0].display()
            )));
        }
    }
    Ok(configs)
}

pub fn cmd_compare(
    paths: &[PathBuf],
    out: Option<&Path>,
    first_seed: u64,
    num_seeds: u64,
    exec: Execution,
) -> Result<CompareSummary> {
    if num_seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let configs = fair_configs(paths)?;
    let dir = resolve_out(out, "compare");
    let seeds: Vec<u64> = (first_seed..first_seed + num_seeds).collect();
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results = exec.map(&jobs, |&(c, seed)| {
        let cfg = TrainConfig {
            seed,
            ..configs[c].clone()
        };
        let run_dir = dir.join(format!("{c}-{}-seed{seed}", cfg.method));
        let art = run_and_write(&cfg, &run_dir, "compare", exec)?;
        let stats = trace_stats(&art, cfg.model.num_layers);
        Ok::<_, Error>(CompareRun {
            seed,
            dir: run_dir.display().to_string(),
            summary: art.summary,
            trace_change: stats.as_ref().map(|s| s.0.clone()),
            trace_mean: stats.map(|s| s.1),
        })
    });
    let mut results = results.into_iter();
    let mut rows = Vec::new();
    for (path, cfg) in paths.iter().zip(&configs) {
        let runs: Vec<CompareRun> = results
            .by_ref()
            .take(seeds.len())
            .collect::<Result<_>>()?;
        let accs: Vec<f64> = runs.iter().map(|r| r.summary.dev_acc.unwrap_or(f64::NAN)).collect();
        let (mean, std) = mean_std(&accs);
        rows.push(CompareRow {
            method: cfg.method,
            config: path.display().to_string(),
            runs,
            mean_dev_acc: mean,
            std_dev_acc: std,
        });
    }
    let learned: Vec<&Vec<f64>> = rows
        .iter()
        .flat_map(|r| r.runs.iter().filter_map(|run| run.trace_mean.as_ref()))
        .collect();
    let lower_layers_drop_more = (!learned.is_empty()).then(|| {
        let n = learned.len() as f64;
        let bottom = learned.iter().map(|t| t[0]).sum::<f64>() / n;
        let top = learned.iter().map(|t| t[t.len() - 1]).sum::<f64>() / n;
        bottom > top
    });
    let summary = CompareSummary {
        seeds,
        rows,
        lower_layers_drop_more,
    };
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("summary.json"), &summary)?;

    println!("{:<16} {:>22}  config", "method", "dev accuracy");
    for r in &summary.rows {
        println!(
            "{:<16} {:>10.4} ± {:<9.4}  {}",
            r.method.name(),
            r.mean_dev_acc,
            r.std_dev_acc,
            r.config
        );
    }
    if let Some(lower) = summary.lower_layers_drop_more {
        println!("learned policy: lowest layer drops more than highest layer: {lower}");
    }
    Ok(summary)
}

/// Parse arguments and run; errors print to stderr with a nonzero exit.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { common } => cmd_train(&common),
        Command::Gradcheck { common, corrupt } => cmd_gradcheck(&common, corrupt).map(|_| ()),
        Command::ReplaySchedule { common, schedule } => {
            cmd_replay_schedule(&common, &schedule).map(|_| ())
        }
        Command::Compare {
            configs,
            out,
            seed,
            seeds,
            sequential,
        } => {
            let exec = if sequential { Execution::Sequential } else { Execution::default() };
            cmd_compare(&configs, out.as_deref(), seed, seeds, exec).map(|_| ())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
