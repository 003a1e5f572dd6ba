//! Per-stage inference latency.
//!
//! One policy step is split into four fenced stages: token synthesis
//! (standing in for the vision encoder), selection and sequence assembly,
//! the encoder stub, and the action sampler.

use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::config::Retention;
use crate::error::Result;
use crate::model::{Model, Route};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::selector::{select, SelectMode, SelectorParams};
use crate::task::{Split, TaskSpec};

const BENCH_STREAM: u64 = 7 << 40;

pub const STAGES: [&str; 4] = ["vision", "selector", "backbone", "action"];

/// Which visual tokens reach the encoder during a benchmark.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Retain {
    /// Whatever the model's config says.
    Config,
    Dense,
    Selected,
    /// Inference selector, then exactly the `k` most-voted tokens.
    TopK(usize),
}

impl Retain {
    pub fn label(&self) -> String {
        match self {
            Retain::Config => "config".into(),
            Retain::Dense => "dense".into(),
            Retain::Selected => "selected".into(),
            Retain::TopK(k) => format!("top{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageStats {
    pub stage: String,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub label: String,
    pub steps: usize,
    /// The four stages followed by `total`.
    pub stages: Vec<StageStats>,
    pub kept_mean: f64,
    pub available: usize,
}

impl BenchReport {
    pub fn stage(&self, name: &str) -> &StageStats {
        self.stages.iter().find(|s| s.stage == name).expect("known stage")
    }
}

/// Mean and 95th percentile (nearest rank).
pub fn summarize(stage: &str, samples: &[f64]) -> StageStats {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n.max(1));
    StageStats {
        stage: stage.to_string(),
        mean_ms: sorted.iter().sum::<f64>() / n.max(1) as f64,
        p95_ms: sorted.get(rank - 1).copied().unwrap_or(0.0),
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Times `steps` policy steps after `warmup` untimed ones.
pub fn bench_policy(
    model: &Model,
    params: &ParamStore,
    task: &TaskSpec,
    retain: Retain,
    warmup: usize,
    steps: usize,
) -> Result<BenchReport> {
    let mut model = model.clone();
    let route = match retain {
        Retain::Config => Route::Config,
        Retain::Dense => {
            model.config.retention = Retention::Dense;
            Route::Config
        }
        Retain::Selected => {
            model.config.retention = Retention::Selected;
            Route::Config
        }
        Retain::TopK(k) => Route::TopK(k),
    };
    let seed = model.config.seed;
    let mut samples = vec![Vec::with_capacity(steps); 5];
    let mut kept_total = 0usize;
    let mut available = 0;
    for i in 0..warmup + steps {
        let mut rng = Rng::substream(seed, BENCH_STREAM | i as u64);
        let t0 = Instant::now();
        let ep = black_box(task.episode_at(seed, Split::Eval, i as u64));
        let vision = ms(t0);

        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let t1 = Instant::now();
        let a = model.assemble(&tape, &ep, &p, SelectMode::Infer, &route, &mut rng)?;
        black_box(a.seq.tokens.borrow().data()[0]);
        let selector = ms(t1);

        let t2 = Instant::now();
        let cond = model.backbone.encode(&a.seq, &p)?;
        black_box(cond.features.borrow().data()[0]);
        let backbone = ms(t2);

        let t3 = Instant::now();
        let ctx = model.head.prepare(&cond, a.extra, &p)?;
        let chunk = model.head.sample(&ctx, model.config.sample_steps, &mut rng, &p)?;
        black_box(chunk.data()[0]);
        let action = ms(t3);

        if i >= warmup {
            for (s, v) in samples.iter_mut().zip([vision, selector, backbone, action]) {
                s.push(v);
            }
            samples[4].push(vision + selector + backbone + action);
            kept_total += a.kept;
            available = a.available;
        }
    }
    let mut stages: Vec<StageStats> = STAGES.iter().zip(&samples).map(|(n, s)| summarize(n, s)).collect();
    stages.push(summarize("total", &samples[4]));
    Ok(BenchReport {
        label: retain.label(),
        steps,
        stages,
        kept_mean: kept_total as f64 / steps.max(1) as f64,
        available,
    })
}

/// Mean selector time in ms for each visual token count in `sizes`, with
/// `n_q` guidance tokens of width `d`.
pub fn bench_selector_scaling(d: usize, n_q: usize, sizes: &[usize], warmup: usize, steps: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    let mut params = ParamStore::new();
    let mut rng = Rng::new(seed);
    let sp = SelectorParams::new(&mut params, d, &mut rng);
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let hv_t = rng.normal_tensor(&[n, d], 1.0);
        let hq_t = rng.normal_tensor(&[n_q, d], 1.0);
        let mut times = Vec::with_capacity(steps);
        for i in 0..warmup + steps {
            let tape = Tape::new();
            let p = params.bind(&tape, false);
            let hv = tape.constant(hv_t.clone());
            let hq = tape.constant(hq_t.clone());
            let t = Instant::now();
            let sel = select(&hv, &hq, &sp, &p, SelectMode::Infer, &mut rng)?;
            black_box(sel.kept.len());
            if i >= warmup {
                times.push(ms(t));
            }
        }
        out.push((n, summarize("selector", &times).mean_ms));
    }
    Ok(out)
}

/// Dense, forced top-`keep` and selected runs side by side, plus selector
/// scaling from `N_v` to `2·N_v`.
#[derive(Debug, Serialize)]
pub struct BenchSummary {
    pub dense: BenchReport,
    pub forced: BenchReport,
    pub selected: BenchReport,
    pub backbone_speedup: f64,
    pub total_speedup: f64,
    /// `(N_v, mean selector ms)`.
    pub selector_scaling: Vec<(usize, f64)>,
    pub selector_ratio: f64,
}

pub fn run_bench(model: &Model, params: &ParamStore, task: &TaskSpec, warmup: usize, steps: usize, keep: usize) -> Result<BenchSummary> {
    let dense = bench_policy(model, params, task, Retain::Dense, warmup, steps)?;
    let forced = bench_policy(model, params, task, Retain::TopK(keep), warmup, steps)?;
    let selected = bench_policy(model, params, task, Retain::Selected, warmup, steps)?;
    let n = model.config.n_visual();
    let n_q = model.config.n_language() + model.config.n_proprio_tokens();
    let scaling = bench_selector_scaling(model.config.d_model, n_q, &[n, 2 * n], warmup, steps, model.config.seed)?;
    Ok(BenchSummary {
        backbone_speedup: dense.stage("backbone").mean_ms / forced.stage("backbone").mean_ms,
        total_speedup: dense.stage("total").mean_ms / forced.stage("total").mean_ms,
        selector_ratio: scaling[1].1 / scaling[0].1,
        selector_scaling: scaling,
        dense,
        forced,
        selected,
    })
}
