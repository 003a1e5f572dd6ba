//! Run configuration: a flat `key = value` file. Unknown keys are errors.
//!
//! ```text
//! # comments and blank lines are ignored
//! steps = 2000
//! guidance = joint
//! retention = selected
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{PositionLayout, StubConfig};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::optim::TrainSchedule;
use crate::selector::AnnealSchedule;
use crate::tokenizer::ProprioSpec;

/// How the proprioceptive state enters the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProprioEncoding {
    /// Not used at all.
    None,
    /// Binned into vocabulary tokens and fed to the encoder.
    Tokenized,
    /// One MLP token fed to the encoder.
    MlpVlm,
    /// One MLP vector added to the action head's modulation signal.
    MlpAct,
}

/// Which visual tokens reach the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retention {
    Dense,
    Selected,
    MeanPool,
    MaxTopK,
    RandomK,
}

/// Tokens that form the selector's guidance `H_q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guidance {
    Language,
    Proprio,
    Joint,
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}' (expected one of: {})"),
                        s,
                        [$($name),*].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($ty::$variant => $name,)*
                })
            }
        }
    };
}

named_enum!(ProprioEncoding { None => "none", Tokenized => "tokenized", MlpVlm => "mlp_vlm", MlpAct => "mlp_act" });
named_enum!(Retention { Dense => "dense", Selected => "selected", MeanPool => "mean", MaxTopK => "max_topk", RandomK => "random_k" });
named_enum!(Guidance { Language => "language", Proprio => "proprio", Joint => "joint" });

macro_rules! config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $($key: $default,)* }
            }
        }

        impl Config {
            /// Every key in declaration order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value.parse::<$ty>().map_err(|e| {
                            Error::Config(format!("bad value '{value}' for {key}: {e}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string())),*]
            }
        }
    };
}

config! {
    /// Training seed; `--seed` overrides it.
    seed: u64 = 0;
    /// Patch grid side; `N_v = grid²`.
    grid: usize = 10;
    /// Proprio state length `p`.
    proprio_dim: usize = 15;
    /// Action chunk length `H`.
    horizon: usize = 10;
    /// Action dimension `A`.
    action_dim: usize = 2;
    /// Std of the i.i.d. background patches.
    visual_noise: f64 = 1.0;
    /// Uniform jitter on the effector coordinates, as a fraction of one cell.
    proprio_jitter: f64 = 0.0;
    d_model: usize = 32;
    layers: usize = 2;
    heads: usize = 2;
    max_seq: usize = 160;
    vocab: usize = 1024;
    bins: usize = 256;
    q_min: f64 = -3.0;
    q_max: f64 = 3.0;
    head_hidden: usize = 64;
    head_layers: usize = 2;
    head_heads: usize = 2;
    sample_steps: usize = 4;
    proprio: ProprioEncoding = ProprioEncoding::Tokenized;
    retention: Retention = Retention::Selected;
    guidance: Guidance = Guidance::Joint;
    /// Append the global context token.
    context: bool = true;
    /// Tokens kept by the top-k and random-k baselines.
    pool_k: usize = 15;
    steps: usize = 5000;
    batch: usize = 32;
    lr: f64 = 3e-3;
    weight_decay: f64 = 0.05;
    beta1: f64 = 0.9;
    beta2: f64 = 0.95;
    ema_decay: f64 = 0.999;
    warmup_frac: f64 = 0.05;
    hold_frac: f64 = 0.10;
    decay_frac: f64 = 0.85;
    warmup_start: f64 = 0.1;
    final_lr_factor: f64 = 0.5;
    alpha_start: f64 = 1.0;
    alpha_end: f64 = 0.01;
    /// Metrics row interval.
    log_every: usize = 50;
    /// Held-out episodes used by evaluation.
    eval_episodes: usize = 200;
}

impl Config {
    /// Parses `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply(text)?;
        Ok(c)
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    /// Text form that [`Config::parse`] reads back to an equal config.
    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn n_visual(&self) -> usize {
        self.grid * self.grid
    }

    /// Instruction length: a row id and a column id.
    pub fn n_language(&self) -> usize {
        2
    }

    /// Proprio tokens in the encoder sequence.
    pub fn n_proprio_tokens(&self) -> usize {
        match self.proprio {
            ProprioEncoding::Tokenized => self.proprio_dim,
            ProprioEncoding::MlpVlm => 1,
            ProprioEncoding::None | ProprioEncoding::MlpAct => 0,
        }
    }

    pub fn layout(&self) -> PositionLayout {
        PositionLayout {
            n_visual: self.n_visual(),
            n_proprio: self.n_proprio_tokens(),
            n_language: self.n_language(),
        }
    }

    pub fn stub(&self) -> StubConfig {
        StubConfig {
            d: self.d_model,
            layers: self.layers,
            heads: self.heads,
            max_seq: self.max_seq,
            vocab: self.vocab,
            mlp_ratio: 4,
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            hidden: self.head_hidden,
            layers: self.head_layers,
            heads: self.head_heads,
            steps: self.sample_steps,
            horizon: self.horizon,
            action_dim: self.action_dim,
            cond_dim: self.d_model,
            time_dim: 32,
            mlp_ratio: 2,
        }
    }

    pub fn proprio_spec(&self) -> Result<ProprioSpec> {
        ProprioSpec::new(self.proprio_dim, self.q_min, self.q_max, self.bins, self.vocab)
    }

    /// Schedules span `steps - 1` intervals so the last step sees the end values.
    fn span(&self) -> usize {
        self.steps.saturating_sub(1).max(1)
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            total_steps: self.span(),
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            hold_frac: self.hold_frac,
            decay_frac: self.decay_frac,
            warmup_start: self.warmup_start,
            final_factor: self.final_lr_factor,
        }
    }

    pub fn anneal(&self) -> AnnealSchedule {
        AnnealSchedule {
            start: self.alpha_start,
            end: self.alpha_end,
            total_steps: self.span(),
        }
    }

    /// Checks cross-key constraints.
    pub fn validate(&self) -> Result<()> {
        self.stub().validate(&self.layout())?;
        self.head().validate()?;
        self.schedule().validate()?;
        self.proprio_spec()?;
        if self.grid < 2 {
            return Err(Error::Config("grid must be at least 2".into()));
        }
        if self.proprio_dim < 2 {
            return Err(Error::Config("the task needs proprio_dim >= 2".into()));
        }
        if self.vocab < self.bins + 2 * self.grid {
            return Err(Error::Config(format!(
                "vocab {} cannot hold {} instruction ids and {} state bins",
                self.vocab,
                2 * self.grid,
                self.bins
            )));
        }
        let has_hp = matches!(self.proprio, ProprioEncoding::Tokenized | ProprioEncoding::MlpVlm);
        if self.retention == Retention::Selected && self.guidance != Guidance::Language && !has_hp {
            return Err(Error::Config(format!(
                "guidance '{}' needs proprio tokens in the encoder, but proprio = {}",
                self.guidance, self.proprio
            )));
        }
        if matches!(self.retention, Retention::MaxTopK | Retention::RandomK) && !(1..=self.n_visual()).contains(&self.pool_k) {
            return Err(Error::Config(format!("pool_k {} outside 1..={}", self.pool_k, self.n_visual())));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(0.0..0.5).contains(&self.proprio_jitter) {
            return Err(Error::Config("proprio_jitter must be in [0, 0.5)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}
