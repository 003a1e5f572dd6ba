//! Synthetic planted-patch task.
//!
//! A `g×g` grid of patch features. Two patches are planted: the goal,
//! whose grid cell is named by the instruction, and the effector, whose
//! cell is encoded in the first two state values. Every other patch is
//! i.i.d. Gaussian noise. A planted patch carries a code in its leading
//! dimensions and an `A`-dimensional payload in the last `A`. The code is
//! rendered in the model's initial token space from the tokens that name
//! the patch: the two instruction ids for the goal, the two state tokens
//! of `q0` and `q1` for the effector. The target chunk moves linearly from
//! the effector payload to the goal payload, so solving the task needs both
//! planted patches and therefore both the instruction and the state.

use crate::backbone::token_space;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::{ProprioSpec, ProprioState};

/// Substream tags that keep train and eval episodes disjoint.
const TRAIN_SPLIT: u64 = 1 << 40;
const EVAL_SPLIT: u64 = 2 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `H_v`, `N_v×D`.
    pub visual: Tensor,
    /// `[goal_row, g + goal_col]`.
    pub instruction: Vec<usize>,
    pub state: ProprioState,
    /// `a*`, `H×A`.
    pub target: Tensor,
    pub goal: usize,
    pub effector: usize,
}

/// Task geometry and the token space the codes are drawn from.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub grid: usize,
    pub d: usize,
    pub proprio: ProprioSpec,
    pub horizon: usize,
    pub action_dim: usize,
    pub noise: f64,
    pub jitter: f64,
    tokens: Tensor,
}

/// Effector rows live in this band of state value 0, columns in the mirror
/// band of value 1. The bands are disjoint so their bins never collide.
const BAND: (f64, f64) = (0.2, 2.9);

/// The remaining state values are uniform in `±REST`, which stays clear of
/// both bands.
const REST: f64 = 0.15;

impl TaskSpec {
    pub fn new(
        grid: usize,
        d: usize,
        proprio: ProprioSpec,
        horizon: usize,
        action_dim: usize,
        noise: f64,
        jitter: f64,
    ) -> Result<Self> {
        if d <= action_dim {
            return Err(Error::Config(format!("width {d} leaves no room for a code")));
        }
        if proprio.dim() < 2 || grid < 2 {
            return Err(Error::Config("task needs grid >= 2 and proprio_dim >= 2".into()));
        }
        if proprio.vocab() < proprio.bins() + 2 * grid {
            return Err(Error::Config(format!(
                "vocab {} cannot hold {} instruction ids and {} state bins",
                proprio.vocab(),
                2 * grid,
                proprio.bins()
            )));
        }
        Ok(TaskSpec {
            tokens: token_space(proprio.vocab(), d),
            grid,
            d,
            proprio,
            horizon,
            action_dim,
            noise,
            jitter,
        })
    }

    pub fn from_config(c: &Config) -> Result<Self> {
        TaskSpec::new(c.grid, c.d_model, c.proprio_spec()?, c.horizon, c.action_dim, c.visual_noise, c.proprio_jitter)
    }

    pub fn n_visual(&self) -> usize {
        self.grid * self.grid
    }

    fn cell(&self) -> f64 {
        (BAND.1 - BAND.0) / self.grid as f64
    }

    /// State values `(q0, q1)` that encode grid cell `(r, c)`, before jitter.
    pub fn effector_coords(&self, r: usize, c: usize) -> (f64, f64) {
        let w = self.cell();
        (-BAND.1 + (r as f64 + 0.5) * w, BAND.0 + (c as f64 + 0.5) * w)
    }

    /// Inverse of [`TaskSpec::effector_coords`]: the patch index encoded by `q`.
    pub fn effector_from_state(&self, q: &ProprioState) -> usize {
        let w = self.cell();
        let r = ((q.0[0] + BAND.1) / w).floor().clamp(0.0, (self.grid - 1) as f64) as usize;
        let c = ((q.0[1] - BAND.0) / w).floor().clamp(0.0, (self.grid - 1) as f64) as usize;
        r * self.grid + c
    }

    /// The patch index named by an instruction.
    pub fn goal_from_instruction(&self, ids: &[usize]) -> usize {
        ids[0] * self.grid + (ids[1] - self.grid)
    }

    /// Code of a patch named by `ids`: the sum of their token vectors over
    /// `√len`, truncated to the code width.
    pub fn code(&self, ids: &[usize]) -> Vec<f64> {
        let width = self.d - self.action_dim;
        let scale = 1.0 / (ids.len() as f64).sqrt();
        (0..width)
            .map(|k| ids.iter().map(|&id| self.tokens.row_slice(id)[k]).sum::<f64>() * scale)
            .collect()
    }

    /// Token ids of the two state values that locate the effector.
    pub fn effector_tokens(&self, state: &ProprioState) -> Result<Vec<usize>> {
        Ok(self.proprio.token_ids(state)?[..2].to_vec())
    }

    /// `a*_h = e + (g - e)·(h + 1)/H`.
    pub fn target(&self, effector_payload: &[f64], goal_payload: &[f64]) -> Tensor {
        let mut out = Vec::with_capacity(self.horizon * self.action_dim);
        for h in 0..self.horizon {
            let f = (h + 1) as f64 / self.horizon as f64;
            for (e, g) in effector_payload.iter().zip(goal_payload) {
                out.push(e + (g - e) * f);
            }
        }
        Tensor::new(&[self.horizon, self.action_dim], out).expect("sized by construction")
    }

    /// Draws one episode.
    pub fn episode(&self, rng: &mut Rng) -> Episode {
        let n = self.n_visual();
        let goal = rng.index(n);
        let mut effector = rng.index(n - 1);
        if effector >= goal {
            effector += 1;
        }
        let mut visual = rng.normal_tensor(&[n, self.d], self.noise);

        let (er, ec) = (effector / self.grid, effector % self.grid);
        let (q0, q1) = self.effector_coords(er, ec);
        let half = self.jitter * self.cell();
        let mut state = vec![q0 + rng.uniform_range(-half, half), q1 + rng.uniform_range(-half, half)];
        state.extend((2..self.proprio.dim()).map(|_| rng.uniform_range(-REST, REST)));
        let state = ProprioState(state);
        let instruction = vec![goal / self.grid, self.grid + goal % self.grid];

        let code_len = self.d - self.action_dim;
        let effector_ids = self.effector_tokens(&state).expect("state sized by construction");
        let mut payloads = Vec::with_capacity(2);
        for (j, ids) in [(effector, &effector_ids), (goal, &instruction)] {
            let payload: Vec<f64> = (0..self.action_dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let row = &mut visual.data_mut()[j * self.d..(j + 1) * self.d];
            row[..code_len].copy_from_slice(&self.code(ids));
            row[code_len..].copy_from_slice(&payload);
            payloads.push(payload);
        }

        Episode {
            instruction,
            state,
            target: self.target(&payloads[0], &payloads[1]),
            visual,
            goal,
            effector,
        }
    }

    /// Episode `index` of `split` under `seed`. Splits never share a stream.
    pub fn episode_at(&self, seed: u64, split: Split, index: u64) -> Episode {
        let tag = match split {
            Split::Train => TRAIN_SPLIT,
            Split::Eval => EVAL_SPLIT,
        };
        self.episode(&mut Rng::substream(seed, tag | index))
    }

    /// Reads both payloads straight out of the planted patches and rebuilds
    /// the target. Exact when given the true indices.
    pub fn decode(&self, visual: &Tensor, effector: usize, goal: usize) -> Tensor {
        let code_len = self.d - self.action_dim;
        let e = &visual.row_slice(effector)[code_len..];
        let g = &visual.row_slice(goal)[code_len..];
        self.target(e, g)
    }
}
