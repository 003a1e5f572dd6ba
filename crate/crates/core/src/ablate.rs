//! Ablation grid: train one variant per cell under identical seeds and
//! budgets, then evaluate and time each.

use serde::Serialize;

use crate::bench::{bench_policy, Retain};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::train::{evaluate, Trainer};

/// A named set of config overrides applied on top of a base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Cell {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Cell {
            name: name.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn apply(&self, base: &Config) -> Result<Config> {
        let mut c = base.clone();
        for (k, v) in &self.overrides {
            c.set(k, v).map_err(|e| Error::Config(format!("cell '{}': {e}", self.name)))?;
        }
        c.validate().map_err(|e| Error::Config(format!("cell '{}': {e}", self.name)))?;
        Ok(c)
    }
}

/// Component ablation: proprio tokens, then selection, then the context token.
pub fn components() -> Vec<Cell> {
    vec![
        Cell::new("base", &[("proprio", "none"), ("retention", "dense"), ("context", "false"), ("guidance", "language")]),
        Cell::new("+proprio_tokens", &[("proprio", "tokenized"), ("retention", "dense"), ("context", "false")]),
        Cell::new("+selection", &[("proprio", "tokenized"), ("retention", "selected"), ("context", "false")]),
        Cell::new("+context", &[("proprio", "tokenized"), ("retention", "selected"), ("context", "true")]),
    ]
}

/// State encoding and entry point, with dense retention so only the state
/// path differs.
pub fn encodings() -> Vec<Cell> {
    let dense = ("retention", "dense");
    vec![
        Cell::new("none", &[("proprio", "none"), dense]),
        Cell::new("mlp_act", &[("proprio", "mlp_act"), dense]),
        Cell::new("mlp_vlm", &[("proprio", "mlp_vlm"), dense]),
        Cell::new("tokenized_vlm", &[("proprio", "tokenized"), dense]),
    ]
}

/// Query-guided selection under each guidance source.
pub fn guidance() -> Vec<Cell> {
    vec![
        Cell::new("guided_language", &[("retention", "selected"), ("guidance", "language")]),
        Cell::new("guided_proprio", &[("retention", "selected"), ("guidance", "proprio")]),
        Cell::new("guided_joint", &[("retention", "selected"), ("guidance", "joint")]),
    ]
}

/// Pooling baselines followed by the guided variants.
pub fn retention() -> Vec<Cell> {
    let mut cells = vec![
        Cell::new("mean_pool", &[("retention", "mean")]),
        Cell::new("max_pool", &[("retention", "max_topk")]),
        Cell::new("random", &[("retention", "random_k")]),
    ];
    cells.extend(guidance());
    cells
}

pub const PRESETS: [&str; 4] = ["components", "encodings", "retention", "guidance"];

pub fn preset(name: &str) -> Result<Vec<Cell>> {
    match name {
        "components" => Ok(components()),
        "encodings" => Ok(encodings()),
        "retention" => Ok(retention()),
        "guidance" => Ok(guidance()),
        _ => Err(Error::Config(format!("unknown preset '{name}', expected one of {PRESETS:?}"))),
    }
}

/// Parses a grid file: one cell per line, `name: key=value key=value ...`.
pub fn parse_grid(text: &str) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("grid line {}: expected 'name: key=value ...'", n + 1)))?;
        let mut overrides = Vec::new();
        for kv in rest.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid line {}: '{kv}' is not key=value", n + 1)))?;
            overrides.push((k.to_string(), v.to_string()));
        }
        cells.push(Cell {
            name: name.trim().to_string(),
            overrides,
        });
    }
    if cells.is_empty() {
        return Err(Error::Config("grid has no cells".into()));
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: String,
    pub seed: u64,
    pub eval_loss: f64,
    pub task_error: f64,
    pub kept_fraction: f64,
    pub vision_ms: f64,
    pub selector_ms: f64,
    pub backbone_ms: f64,
    pub action_ms: f64,
    pub final_train_loss: f64,
}

pub const RESULTS_HEADER: &str =
    "cell,seed,eval_loss,task_error,kept_fraction,vision_ms,selector_ms,backbone_ms,action_ms,final_train_loss";

impl CellResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{},{:.4},{:.4},{:.4},{:.4},{:e}",
            self.cell,
            self.seed,
            self.eval_loss,
            self.task_error,
            self.kept_fraction,
            self.vision_ms,
            self.selector_ms,
            self.backbone_ms,
            self.action_ms,
            self.final_train_loss
        )
    }
}

/// Policy steps timed per cell after training.
pub const CELL_BENCH_STEPS: usize = 50;

/// Trains, evaluates (EMA weights) and times one cell.
pub fn run_cell(base: &Config, cell: &Cell) -> Result<CellResult> {
    let config = cell.apply(base)?;
    let mut trainer = Trainer::new(&config)?;
    let log = trainer.run()?;
    let eval = evaluate(&trainer.model, &trainer.ema, &trainer.task, config.eval_episodes)?;
    let bench = bench_policy(&trainer.model, &trainer.ema, &trainer.task, Retain::Config, 5, CELL_BENCH_STEPS)?;
    Ok(CellResult {
        cell: cell.name.clone(),
        seed: config.seed,
        eval_loss: eval.loss,
        task_error: eval.task_error,
        kept_fraction: eval.kept_fraction,
        vision_ms: bench.stage("vision").mean_ms,
        selector_ms: bench.stage("selector").mean_ms,
        backbone_ms: bench.stage("backbone").mean_ms,
        action_ms: bench.stage("action").mean_ms,
        final_train_loss: log.last().map_or(f64::NAN, |m| m.loss),
    })
}
