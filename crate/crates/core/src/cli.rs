//! Command-line front end. `main` parses arguments and maps the outcome to
//! an exit code; everything else lives here so tests can drive it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::ablate::{parse_grid, preset, run_cell, CellResult, RESULTS_HEADER};
use crate::autodiff::Tape;
use crate::bench::run_bench;
use crate::config::{Config, Retention};
use crate::error::Error;
use crate::heatmap::export_heatmap;
use crate::io::{load_checkpoint, read_tensor, save_checkpoint, RunManifest};
use crate::model::{Model, Route};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::selector::SelectMode;
use crate::task::{Episode, Split, TaskSpec};
use crate::tokenizer::ProprioState;
use crate::train::{evaluate, StepMetrics, Trainer, METRICS_HEADER};

#[derive(Parser, Debug)]
#[command(name = "grounded", version, about = "Grounded token selection and flow-matching policy harness")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Assert the command's acceptance properties; exit 3 if one fails.
    #[arg(long, global = true)]
    pub check: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Tokenize a CSV of proprioceptive states.
    Tokenize {
        /// One row per timestep, one column per state dimension.
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the selector on one set of visual tokens.
    Select(SelectArgs),
    /// Train on the synthetic task.
    Train,
    /// Evaluate a checkpoint on held-out episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use raw weights instead of the EMA shadow.
        #[arg(long)]
        raw: bool,
    },
    /// Train and evaluate a grid of wiring variants.
    Ablate {
        /// Built-in grid: components, encodings, retention or guidance.
        #[arg(long, conflicts_with = "grid")]
        preset: Option<String>,
        /// Grid file, one `name: key=value ...` cell per line.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Comma-separated seeds; every cell runs under each.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Per-stage latency, dense versus selected.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        /// Tokens kept in the forced-retention run.
        #[arg(long, default_value_t = 15)]
        keep: usize,
    },
    /// Write selection heatmaps for held-out episodes.
    Heatmap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        episodes: usize,
    },
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Visual tokens, `N_v×D`, in the binary tensor format.
    #[arg(long, requires_all = ["instruction", "state"])]
    pub tokens: Option<PathBuf>,
    /// Instruction ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub instruction: Vec<usize>,
    /// State values, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub state: Vec<f64>,
    /// Held-out episode to use when no tokens are given.
    #[arg(long, default_value_t = 0)]
    pub episode: u64,
}

/// Failure classes, one per nonzero exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` and runs the command.
pub fn run_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn check(cond: bool, what: impl FnOnce() -> String, failures: &mut Vec<String>) {
    if !cond {
        failures.push(what());
    }
}

fn finish_checks(enabled: bool, failures: Vec<String>) -> CliResult<()> {
    if enabled && !failures.is_empty() {
        return Err(Failure::Check(failures.join("; ")));
    }
    Ok(())
}

/// Config from `--config`, then `--set`, then `--seed`.
pub fn resolve_config(cli: &Cli) -> CliResult<Config> {
    let mut c = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        c.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let config = resolve_config(cli)?;
    fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Tokenize { input } => tokenize(cli, &config, input),
        Command::Select(args) => select_cmd(cli, &config, args),
        Command::Train => train_cmd(cli, &config),
        Command::Eval { checkpoint, raw } => eval_cmd(cli, checkpoint, *raw),
        Command::Ablate { preset: p, grid, seeds } => ablate_cmd(cli, &config, p.as_deref(), grid.as_deref(), seeds),
        Command::Bench {
            checkpoint,
            warmup,
            steps,
            keep,
        } => bench_cmd(cli, &config, checkpoint.as_deref(), *warmup, *steps, *keep),
        Command::Heatmap { checkpoint, episodes } => heatmap_cmd(cli, &config, checkpoint.as_deref(), *episodes),
    }
}

fn write_manifest<M: serde::Serialize, R: serde::Serialize>(
    cli: &Cli,
    command: &str,
    config: &Config,
    metrics: Vec<M>,
    stage_ms: Vec<(String, f64)>,
    result: R,
) -> CliResult<()> {
    RunManifest::new(command, config, metrics, stage_ms, result).write(&cli.out.join("manifest.json"))?;
    Ok(())
}

fn tokenize(cli: &Cli, config: &Config, input: &Path) -> CliResult<()> {
    let spec = config.proprio_spec()?;
    let text = fs::read_to_string(input)?;
    let mut out = String::from("timestep,dim,bin,token_id\n");
    let mut failures = Vec::new();
    let mut rows = 0;
    for (t, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let values: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Failure::Usage(format!("{}: row {}: {e}", input.display(), t + 1)))?;
        let state = ProprioState(values);
        let ids = spec.token_ids(&state)?;
        for (k, id) in ids.iter().enumerate() {
            let bin = spec.bin_of_token(*id)?;
            check(spec.token_id(bin)? == *id, || format!("token {id} does not round-trip"), &mut failures);
            out.push_str(&format!("{t},{k},{bin},{id}\n"));
        }
        rows += 1;
    }
    fs::write(cli.out.join("tokens.csv"), out)?;
    write_manifest(cli, "tokenize", config, Vec::<()>::new(), vec![], json!({ "rows": rows }))?;
    println!("tokenized {rows} states into {}", cli.out.join("tokens.csv").display());
    finish_checks(cli.check, failures)
}

/// Model and parameters from a checkpoint (EMA weights) or a fresh init.
fn load_model(config: &Config, checkpoint: Option<&Path>) -> CliResult<(Model, ParamStore, Config)> {
    match checkpoint {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            let (model, mut params) = Model::new(&ck.config, &mut Rng::new(ck.config.seed))?;
            params.load_from(&ck.ema)?;
            Ok((model, params, ck.config))
        }
        None => {
            let (model, params) = Model::new(config, &mut Rng::new(config.seed))?;
            Ok((model, params, config.clone()))
        }
    }
}

fn select_cmd(cli: &Cli, config: &Config, args: &SelectArgs) -> CliResult<()> {
    let (model, params, config) = load_model(config, args.checkpoint.as_deref())?;
    if model.config.retention != Retention::Selected {
        return Err(Failure::Usage(format!("retention is '{}', not 'selected'", model.config.retention)));
    }
    let task = TaskSpec::from_config(&config)?;
    let ep = match &args.tokens {
        Some(path) => {
            let visual = read_tensor(path)?;
            Episode {
                target: crate::tensor::Tensor::zeros(&[config.horizon, config.action_dim]),
                visual,
                instruction: args.instruction.clone(),
                state: ProprioState(args.state.clone()),
                goal: 0,
                effector: 0,
            }
        }
        None => task.episode_at(config.seed, Split::Eval, args.episode),
    };
    if ep.visual.cols() != config.d_model {
        return Err(Failure::Usage(format!("tokens have width {}, model expects {}", ep.visual.cols(), config.d_model)));
    }
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let mut rng = Rng::substream(config.seed, args.episode);
    let a = model.assemble(&tape, &ep, &p, SelectMode::Infer, &Route::Config, &mut rng)?;
    let probs = a.probs.clone().expect("selected retention reports probabilities");
    let mask = a.mask.clone().expect("selected retention reports a mask");
    let kept: Vec<usize> = crate::selector::kept_indices(&mask);

    let mut csv = String::from("index,prob,kept\n");
    for (j, (pj, k)) in probs.data().iter().zip(&mask).enumerate() {
        csv.push_str(&format!("{j},{pj:e},{}\n", u8::from(*k)));
    }
    fs::write(cli.out.join("selection.csv"), csv)?;
    let heat = export_heatmap(&cli.out, "", probs.data(), &mask);
    let heat_file = match heat {
        Ok((pgm, _)) => Some(pgm.display().to_string()),
        Err(Error::Input(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let result = json!({ "kept": kept, "available": mask.len(), "heatmap": heat_file });
    write_manifest(cli, "select", &config, Vec::<()>::new(), vec![], result)?;
    println!("kept {} of {} tokens: {:?}", kept.len(), mask.len(), kept);

    let mut failures = Vec::new();
    let sum = probs.sum();
    check((sum - 1.0).abs() <= 1e-9, || format!("probabilities sum to {sum}"), &mut failures);
    check(!kept.is_empty() && kept.len() <= mask.len(), || format!("kept {} tokens", kept.len()), &mut failures);
    finish_checks(cli.check, failures)
}

fn episode_json(ep: &Episode) -> serde_json::Value {
    let rows: Vec<&[f64]> = (0..ep.visual.rows()).map(|i| ep.visual.row_slice(i)).collect();
    json!({
        "visual": rows,
        "instruction": ep.instruction,
        "state": ep.state.0,
        "target": (0..ep.target.rows()).map(|i| ep.target.row_slice(i)).collect::<Vec<_>>(),
        "goal": ep.goal,
        "effector": ep.effector,
    })
}

fn write_metrics(path: &Path, log: &[StepMetrics]) -> CliResult<()> {
    let mut csv = format!("{METRICS_HEADER}\n");
    for m in log {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    }
    fs::write(path, csv)?;
    Ok(())
}

fn train_cmd(cli: &Cli, config: &Config) -> CliResult<()> {
    let mut trainer = Trainer::new(config)?;
    let mut log = Vec::new();
    let started = std::time::Instant::now();
    while !trainer.done() {
        let step = trainer.steps_done();
        match trainer.step() {
            Ok(m) => {
                if m.step % config.log_every.max(1) == 0 || trainer.done() {
                    eprintln!("step {:>6}  loss {:.5}  alpha {:.4}  lr {:.2e}  kept {:.1}", m.step, m.loss, m.alpha, m.lr, m.kept_mean);
                    log.push(m);
                }
            }
            Err(e @ Error::NonFinite { .. }) => {
                let dump = json!({
                    "step": step,
                    "error": e.to_string(),
                    "batch": trainer.batch(step).iter().map(episode_json).collect::<Vec<_>>(),
                });
                let path = cli.out.join("nan_dump.json");
                fs::write(&path, serde_json::to_string_pretty(&dump).map_err(|e| Failure::Usage(e.to_string()))?)?;
                write_metrics(&cli.out.join("metrics.csv"), &log)?;
                return Err(Failure::Numerical(format!("{e} at step {step}; batch written to {}", path.display())));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let train_ms = started.elapsed().as_secs_f64() * 1e3;
    write_metrics(&cli.out.join("metrics.csv"), &log)?;
    save_checkpoint(&cli.out.join("checkpoint"), config, trainer.steps_done(), &trainer.params, &trainer.ema)?;
    let t = std::time::Instant::now();
    let report = evaluate(&trainer.model, &trainer.ema, &trainer.task, config.eval_episodes)?;
    let eval_ms = t.elapsed().as_secs_f64() * 1e3;
    println!(
        "task error {:.4}  eval loss {:.4}  kept fraction {:.3}",
        report.task_error, report.loss, report.kept_fraction
    );

    let mut failures = Vec::new();
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        check(first.alpha == config.alpha_start, || format!("first alpha {}", first.alpha), &mut failures);
        check(first.lr == config.warmup_start * config.lr, || format!("first lr {}", first.lr), &mut failures);
        if config.steps > 1 {
            check(last.alpha == config.alpha_end, || format!("last alpha {}", last.alpha), &mut failures);
            let end = config.final_lr_factor * config.lr;
            check(last.lr == end, || format!("last lr {} != {end}", last.lr), &mut failures);
        }
    }
    check(report.task_error.is_finite(), || "task error is not finite".into(), &mut failures);
    let stages = vec![("train".to_string(), train_ms), ("eval".to_string(), eval_ms)];
    write_manifest(cli, "train", config, log, stages, report)?;
    finish_checks(cli.check, failures)
}

fn eval_cmd(cli: &Cli, checkpoint: &Path, raw: bool) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    let mut config = ck.config.clone();
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let (model, mut params) = Model::new(&config, &mut Rng::new(config.seed))?;
    params.load_from(if raw { &ck.raw } else { &ck.ema })?;
    let task = TaskSpec::from_config(&config)?;
    let t = std::time::Instant::now();
    let report = evaluate(&model, &params, &task, config.eval_episodes)?;
    let ms = t.elapsed().as_secs_f64() * 1e3;
    println!(
        "task error {:.4}  eval loss {:.4}  kept fraction {:.3}",
        report.task_error, report.loss, report.kept_fraction
    );
    let mut failures = Vec::new();
    check(report.task_error.is_finite(), || "task error is not finite".into(), &mut failures);
    check(
        report.kept_fraction > 0.0 && report.kept_fraction <= 1.0,
        || format!("kept fraction {}", report.kept_fraction),
        &mut failures,
    );
    write_manifest(cli, "eval", &config, Vec::<()>::new(), vec![("eval".into(), ms)], report)?;
    finish_checks(cli.check, failures)
}

/// Median of the task error of `cell` across seeds.
pub fn median_error(results: &[CellResult], cell: &str) -> Option<f64> {
    let mut v: Vec<f64> = results.iter().filter(|r| r.cell == cell).map(|r| r.task_error).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn ablate_cmd(cli: &Cli, config: &Config, preset_name: Option<&str>, grid: Option<&Path>, seeds: &[u64]) -> CliResult<()> {
    let cells = match (preset_name, grid) {
        (Some(p), _) => preset(p)?,
        (None, Some(g)) => parse_grid(&fs::read_to_string(g)?)?,
        (None, None) => return Err(Failure::Usage("ablate needs --preset or --grid".into())),
    };
    for cell in &cells {
        cell.apply(config)?;
    }
    let seeds = if seeds.is_empty() { vec![config.seed] } else { seeds.to_vec() };
    let path = cli.out.join("ablation.csv");
    let mut csv = format!("{RESULTS_HEADER}\n");
    let mut results = Vec::new();
    for &seed in &seeds {
        let mut base = config.clone();
        base.seed = seed;
        for cell in &cells {
            eprintln!("cell {} seed {seed}", cell.name);
            let r = run_cell(&base, cell)?;
            println!("{}", r.csv_row());
            csv.push_str(&r.csv_row());
            csv.push('\n');
            fs::write(&path, &csv)?;
            results.push(r);
        }
    }
    let mut failures = Vec::new();
    let joint = median_error(&results, "guided_joint");
    for other in ["guided_language", "guided_proprio"] {
        if let (Some(j), Some(o)) = (joint, median_error(&results, other)) {
            check(j < o, || format!("guided_joint median {j:.4} is not below {other} {o:.4}"), &mut failures);
        }
    }
    for r in results.iter().filter(|r| cells.iter().any(|c| c.name == r.cell && c.apply(config).map(|c| c.retention == Retention::Dense).unwrap_or(false))) {
        check(r.kept_fraction == 1.0, || format!("dense cell {} kept {}", r.cell, r.kept_fraction), &mut failures);
    }
    write_manifest(cli, "ablate", config, results, vec![], json!({ "cells": cells.len(), "seeds": seeds }))?;
    finish_checks(cli.check, failures)
}

fn bench_cmd(cli: &Cli, config: &Config, checkpoint: Option<&Path>, warmup: usize, steps: usize, keep: usize) -> CliResult<()> {
    let (model, params, config) = load_model(config, checkpoint)?;
    let task = TaskSpec::from_config(&config)?;
    let s = run_bench(&model, &params, &task, warmup, steps, keep)?;
    let mut csv = String::from("run,stage,mean_ms,p95_ms,kept_mean,available\n");
    for r in [&s.dense, &s.forced, &s.selected] {
        for st in &r.stages {
            csv.push_str(&format!("{},{},{:.5},{:.5},{},{}\n", r.label, st.stage, st.mean_ms, st.p95_ms, r.kept_mean, r.available));
        }
        println!(
            "{:<9} kept {:>6.1}/{:<4} total {:.3} ms (p95 {:.3})",
            r.label,
            r.kept_mean,
            r.available,
            r.stage("total").mean_ms,
            r.stage("total").p95_ms
        );
    }
    fs::write(cli.out.join("bench.csv"), csv)?;
    println!(
        "backbone speedup {:.2}x  end-to-end speedup {:.2}x  selector N_v x2 -> {:.2}x time",
        s.backbone_speedup, s.total_speedup, s.selector_ratio
    );
    let mut failures = Vec::new();
    check(s.dense.kept_mean == s.dense.available as f64, || "dense run dropped tokens".into(), &mut failures);
    check(s.backbone_speedup >= 2.0, || format!("backbone speedup {:.2} < 2", s.backbone_speedup), &mut failures);
    check(s.total_speedup >= 1.5, || format!("end-to-end speedup {:.2} < 1.5", s.total_speedup), &mut failures);
    check(
        (2.0..=6.0).contains(&s.selector_ratio),
        || format!("selector ratio {:.2} outside 4 ± 50%", s.selector_ratio),
        &mut failures,
    );
    let stages: Vec<(String, f64)> = s
        .dense
        .stages
        .iter()
        .map(|st| (format!("dense.{}", st.stage), st.mean_ms))
        .chain(s.forced.stages.iter().map(|st| (format!("{}.{}", s.forced.label, st.stage), st.mean_ms)))
        .collect();
    write_manifest(cli, "bench", &config, Vec::<()>::new(), stages, &s)?;
    finish_checks(cli.check, failures)
}

fn heatmap_cmd(cli: &Cli, config: &Config, checkpoint: Option<&Path>, episodes: usize) -> CliResult<()> {
    let (model, params, config) = load_model(config, checkpoint)?;
    if model.config.retention != Retention::Selected {
        return Err(Failure::Usage(format!("retention is '{}', not 'selected'", model.config.retention)));
    }
    let task = TaskSpec::from_config(&config)?;
    let mut files = Vec::new();
    let mut failures = Vec::new();
    for i in 0..episodes as u64 {
        let ep = task.episode_at(config.seed, Split::Eval, i);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let mut rng = Rng::substream(config.seed, i);
        let a = model.assemble(&tape, &ep, &p, SelectMode::Infer, &Route::Config, &mut rng)?;
        let probs = a.probs.expect("selected retention reports probabilities");
        let mask = a.mask.expect("selected retention reports a mask");
        let (pgm, csv) = export_heatmap(&cli.out, &format!("ep{i}_"), probs.data(), &mask)?;
        let written = fs::read_to_string(&csv)?;
        let flags = written.lines().skip(1).filter(|l| l.ends_with(",1")).count();
        let pop = mask.iter().filter(|&&k| k).count();
        check(flags == pop, || format!("{}: {flags} kept flags vs mask popcount {pop}", csv.display()), &mut failures);
        println!("{}", pgm.display());
        files.push(pgm.display().to_string());
    }
    write_manifest(cli, "heatmap", &config, Vec::<()>::new(), vec![], json!({ "files": files }))?;
    finish_checks(cli.check, failures)
}
