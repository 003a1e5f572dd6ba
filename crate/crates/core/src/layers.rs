//! Building blocks shared by the encoder stub and the action head.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;

/// Projections of one multi-head attention layer. No biases.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl Attention {
    /// Queries come from width `d_model`, keys and values from width `d_kv`.
    /// The inner width is `d_model`.
    pub fn new(params: &mut ParamStore, prefix: &str, d_model: usize, d_kv: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "width {d_model} not divisible by {heads} heads");
        Attention {
            wq: params.linear(&format!("{prefix}.wq"), d_model, d_model, rng),
            wk: params.linear(&format!("{prefix}.wk"), d_kv, d_model, rng),
            wv: params.linear(&format!("{prefix}.wv"), d_kv, d_model, rng),
            wo: params.linear(&format!("{prefix}.wo"), d_model, d_model, rng),
            heads,
        }
    }

    /// Projects keys and values once so repeated queries against the same
    /// memory can skip it.
    pub fn project_memory<'t>(&self, kv: &Var<'t>, p: &Binding<'t>) -> Result<Memory<'t>> {
        Ok(Memory {
            k: kv.matmul(&p.var(self.wk))?,
            v: kv.matmul(&p.var(self.wv))?,
        })
    }

    /// `softmax(QKᵀ/√d_k)V` per head, concatenated and projected. Keys with
    /// `key_mask[j] == false` get zero weight.
    pub fn forward<'t>(&self, x: &Var<'t>, memory: &Memory<'t>, key_mask: Option<&[bool]>, p: &Binding<'t>) -> Result<Var<'t>> {
        if let Some(m) = key_mask {
            if m.len() != memory.k.rows() {
                return Err(Error::shape("attention", format!("mask of {} for {} keys", m.len(), memory.k.rows())));
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::Contract("attention over fully masked keys".into()));
            }
        }
        let q = x.matmul(&p.var(self.wq))?;
        let width = q.cols();
        let dk = width / self.heads;
        let inv = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dk, dk)?;
            let kh = memory.k.slice_cols(h * dk, dk)?;
            let vh = memory.v.slice_cols(h * dk, dk)?;
            let logits = qh.matmul_t(&kh)?.scale(inv)?;
            let attn = match key_mask {
                Some(m) => logits.softmax_rows_masked(m)?,
                None => logits.softmax_rows()?,
            };
            outs.push(attn.matmul(&vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { x.tape().concat_cols(&outs)? };
        merged.matmul(&p.var(self.wo))
    }

    pub fn self_attend<'t>(&self, x: &Var<'t>, key_mask: Option<&[bool]>, p: &Binding<'t>) -> Result<Var<'t>> {
        let mem = self.project_memory(x, p)?;
        self.forward(x, &mem, key_mask, p)
    }
}

/// Projected keys and values.
#[derive(Clone, Copy, Debug)]
pub struct Memory<'t> {
    pub k: Var<'t>,
    pub v: Var<'t>,
}

/// `gelu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new(params: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Mlp {
            w1: params.linear(&format!("{prefix}.w1"), d_in, hidden, rng),
            b1: params.bias(&format!("{prefix}.b1"), hidden),
            w2: params.linear(&format!("{prefix}.w2"), hidden, d_out, rng),
            b2: params.bias(&format!("{prefix}.b2"), d_out),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>, p: &Binding<'t>) -> Result<Var<'t>> {
        x.matmul(&p.var(self.w1))?
            .add_row(&p.var(self.b1))?
            .gelu()?
            .matmul(&p.var(self.w2))?
            .add_row(&p.var(self.b2))
    }
}
