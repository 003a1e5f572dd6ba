//! Training loop and held-out evaluation.
//!
//! Every random draw is a pure function of `(seed, step, item)`, so a run
//! can be replayed exactly and all ablation cells see the same episodes.

use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Model, Route};
use crate::optim::{update_ema, AdamW, TrainSchedule};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::selector::{AnnealSchedule, SelectMode};
use crate::task::{Episode, Split, TaskSpec};
use crate::tensor::Tensor;

const SELECT_STREAM: u64 = 3 << 40;
const FLOW_STREAM: u64 = 4 << 40;
const SAMPLE_STREAM: u64 = 5 << 40;
const EVAL_FLOW_STREAM: u64 = 6 << 40;

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub alpha: f64,
    pub lr: f64,
    pub kept_mean: f64,
    pub kept_min: usize,
    pub kept_max: usize,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,loss,alpha,lr,kept_mean,kept_min,kept_max,wall_ms";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{:e},{},{},{},{:.3}",
            self.step, self.loss, self.alpha, self.lr, self.kept_mean, self.kept_min, self.kept_max, self.wall_ms
        )
    }
}

/// Stateful trainer. Call [`Trainer::step`] until [`Trainer::done`].
pub struct Trainer {
    pub model: Model,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub task: TaskSpec,
    pub schedule: TrainSchedule,
    pub anneal: AnnealSchedule,
    opt: AdamW,
    step: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        let (model, params) = Model::new(config, &mut Rng::new(config.seed))?;
        let schedule = config.schedule();
        schedule.validate()?;
        Ok(Trainer {
            opt: AdamW::new(&params, config.beta1, config.beta2, config.weight_decay),
            ema: params.clone(),
            task: TaskSpec::from_config(config)?,
            anneal: config.anneal(),
            schedule,
            model,
            params,
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn done(&self) -> bool {
        self.step >= self.config().steps
    }

    /// The episodes consumed by `step`.
    pub fn batch(&self, step: usize) -> Vec<Episode> {
        let b = self.config().batch;
        (0..b)
            .map(|i| self.task.episode_at(self.config().seed, Split::Train, (step * b + i) as u64))
            .collect()
    }

    /// One optimizer step. A non-finite loss or gradient returns
    /// [`Error::NonFinite`] and leaves the parameters untouched.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let cfg = self.model.config.clone();
        let alpha = self.anneal.alpha(step);
        let lr = self.schedule.lr_at(step);
        let batch = self.batch(step);

        let tape = Tape::new();
        let p = self.params.bind(&tape, true);
        let mut losses = Vec::with_capacity(batch.len());
        let mut kept = Vec::with_capacity(batch.len());
        for (i, ep) in batch.iter().enumerate() {
            let item = (step * cfg.batch + i) as u64;
            let mut srng = Rng::substream(cfg.seed, SELECT_STREAM | item);
            let mut frng = Rng::substream(cfg.seed, FLOW_STREAM | item);
            let (loss, c) = self.model.loss(&tape, ep, &p, SelectMode::Train { alpha }, &Route::Config, &mut srng, &mut frng)?;
            losses.push(loss);
            kept.push(c.kept);
        }
        let mut total = losses[0];
        for l in &losses[1..] {
            total = total.add(l)?;
        }
        let loss = total.scale(1.0 / losses.len() as f64)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor> = p.vars().iter().map(|&v| tape.grad_or_zeros(v)).collect();
        if grads.iter().any(|g| g.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite { op: "gradient" });
        }
        self.opt.update(&mut self.params, &grads, lr)?;
        update_ema(&mut self.ema, &self.params, cfg.ema_decay)?;
        self.step += 1;

        let n = kept.len() as f64;
        Ok(StepMetrics {
            step,
            loss: value,
            alpha,
            lr,
            kept_mean: kept.iter().sum::<usize>() as f64 / n,
            kept_min: kept.iter().copied().min().unwrap_or(0),
            kept_max: kept.iter().copied().max().unwrap_or(0),
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs to completion, keeping every `log_every`-th step and the last one.
    pub fn run(&mut self) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::new();
        while !self.done() {
            let m = self.step()?;
            if m.step % self.config().log_every.max(1) == 0 || self.done() {
                log.push(m);
            }
        }
        Ok(log)
    }
}

/// Held-out evaluation summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    /// Mean `‖â − a*‖_F` of sampled chunks.
    pub task_error: f64,
    /// Mean flow-matching loss with inference-mode selection.
    pub loss: f64,
    pub kept_fraction: f64,
}

/// Evaluates `params` on the first `episodes` held-out episodes.
pub fn evaluate(model: &Model, params: &ParamStore, task: &TaskSpec, episodes: usize) -> Result<EvalReport> {
    let seed = model.config.seed;
    let mut report = EvalReport {
        episodes,
        ..EvalReport::default()
    };
    for i in 0..episodes as u64 {
        let ep = task.episode_at(seed, Split::Eval, i);
        let (chunk, kept) = model.act(params, &ep, &mut Rng::substream(seed, SAMPLE_STREAM | i))?;
        report.task_error += chunk.sub(&ep.target)?.norm();
        report.kept_fraction += kept as f64 / ep.visual.rows() as f64;

        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let mut srng = Rng::substream(seed, SAMPLE_STREAM | i);
        let mut frng = Rng::substream(seed, EVAL_FLOW_STREAM | i);
        let (loss, _) = model.loss(&tape, &ep, &p, SelectMode::Infer, &Route::Config, &mut srng, &mut frng)?;
        report.loss += loss.item();
    }
    let n = episodes.max(1) as f64;
    report.task_error /= n;
    report.loss /= n;
    report.kept_fraction /= n;
    Ok(report)
}
