//! A small pre-norm transformer encoder standing in for the vision-language
//! model. It owns the vocabulary table shared with the proprio tokenizer and
//! the learned positional table.
//!
//! Positions follow the original token layout, not the packed order: kept
//! visual token `j` always sits at position `j`, the context token at
//! `N_v`, proprio tokens after it and language tokens last. Selection can
//! drop tokens without shifting anyone's position.

use crate::autodiff::{embedding_lookup, Var};
use crate::error::{Error, Result};
use crate::layers::{Attention, Mlp};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::sequence::{Modality, TokenSequence};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StubConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub vocab: usize,
    /// MLP hidden width as a multiple of `d`.
    pub mlp_ratio: usize,
}

impl Default for StubConfig {
    fn default() -> Self {
        StubConfig {
            d: 32,
            layers: 2,
            heads: 2,
            max_seq: 160,
            vocab: 1024,
            mlp_ratio: 4,
        }
    }
}

impl StubConfig {
    pub fn validate(&self, layout: &PositionLayout) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.d, self.heads)));
        }
        if layout.total() > self.max_seq {
            return Err(Error::Config(format!(
                "layout needs {} positions, max_seq is {}",
                layout.total(),
                self.max_seq
            )));
        }
        Ok(())
    }
}

/// Where each modality's positions start.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionLayout {
    pub n_visual: usize,
    pub n_proprio: usize,
    pub n_language: usize,
}

impl PositionLayout {
    pub fn visual(&self, j: usize) -> usize {
        j
    }

    pub fn context(&self) -> usize {
        self.n_visual
    }

    pub fn proprio(&self, k: usize) -> usize {
        self.n_visual + 1 + k
    }

    pub fn language(&self, i: usize) -> usize {
        self.n_visual + 1 + self.n_proprio + i
    }

    pub fn total(&self) -> usize {
        self.n_visual + 1 + self.n_proprio + self.n_language
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm_attn: ParamId,
    attn: Attention,
    norm_mlp: ParamId,
    mlp: Mlp,
}

/// `C` and the key mask it inherits from the input sequence.
#[derive(Clone, Debug)]
pub struct Conditioning<'t> {
    pub features: Var<'t>,
    pub mask: Vec<bool>,
}

/// Seed of the initial vocabulary table. It does not vary with the run
/// seed, so every model starts in the same token space.
pub const TOKEN_SPACE_SEED: u64 = 0x746f_6b65_6e73;

/// The initial `V×D` vocabulary table, N(0, 1) entries.
pub fn token_space(vocab: usize, d: usize) -> Tensor {
    Rng::new(TOKEN_SPACE_SEED).normal_tensor(&[vocab, d], 1.0)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: StubConfig,
    pub layout: PositionLayout,
    pub embed: ParamId,
    pub pos: ParamId,
    blocks: Vec<Block>,
    final_norm: ParamId,
}

impl Backbone {
    pub fn new(params: &mut ParamStore, config: StubConfig, layout: PositionLayout, rng: &mut Rng) -> Result<Self> {
        config.validate(&layout)?;
        let d = config.d;
        let embed = params.weight("backbone.embed", config.vocab, d, 1.0, &mut Rng::new(TOKEN_SPACE_SEED));
        let pos = params.weight("backbone.pos", config.max_seq, d, 0.1, rng);
        let blocks = (0..config.layers)
            .map(|l| Block {
                norm_attn: params.gain(&format!("backbone.{l}.norm_attn"), d),
                attn: Attention::new(params, &format!("backbone.{l}.attn"), d, d, config.heads, rng),
                norm_mlp: params.gain(&format!("backbone.{l}.norm_mlp"), d),
                mlp: Mlp::new(params, &format!("backbone.{l}.mlp"), d, d * config.mlp_ratio, d, rng),
            })
            .collect();
        let final_norm = params.gain("backbone.final_norm", d);
        Ok(Backbone {
            config,
            layout,
            embed,
            pos,
            blocks,
            final_norm,
        })
    }

    pub fn embed_table<'t>(&self, p: &Binding<'t>) -> Var<'t> {
        p.var(self.embed)
    }

    /// Adds the positional rows at `positions` to `tokens`.
    pub fn add_positions<'t>(&self, tokens: &Var<'t>, positions: &[usize], p: &Binding<'t>) -> Result<Var<'t>> {
        if positions.len() != tokens.rows() {
            return Err(Error::shape(
                "add_positions",
                format!("{} positions for {} tokens", positions.len(), tokens.rows()),
            ));
        }
        if let Some(&bad) = positions.iter().find(|&&i| i >= self.config.max_seq) {
            return Err(Error::Input(format!("position {bad} beyond max_seq {}", self.config.max_seq)));
        }
        if positions.is_empty() {
            return Ok(*tokens);
        }
        tokens.add(&p.var(self.pos).gather_rows(positions)?)
    }

    /// `H_l`: table rows for `ids` plus the language positions.
    pub fn embed_instruction<'t>(&self, ids: &[usize], p: &Binding<'t>) -> Result<TokenSequence<'t>> {
        if ids.len() > self.layout.n_language {
            return Err(Error::Input(format!(
                "instruction of {} tokens, layout allows {}",
                ids.len(),
                self.layout.n_language
            )));
        }
        let table = self.embed_table(p);
        if ids.is_empty() {
            let empty = table.tape().constant(Tensor::zeros(&[0, self.config.d]));
            return Ok(TokenSequence::new(empty, Modality::Language));
        }
        let rows = embedding_lookup(&table, ids)?;
        let positions: Vec<usize> = (0..ids.len()).map(|i| self.layout.language(i)).collect();
        Ok(TokenSequence::new(self.add_positions(&rows, &positions, p)?, Modality::Language))
    }

    /// `C = f([H_v; H_ctx; H_p; H_l])` under the sequence's key mask.
    pub fn encode<'t>(&self, seq: &TokenSequence<'t>, p: &Binding<'t>) -> Result<Conditioning<'t>> {
        if seq.len() > self.config.max_seq {
            return Err(Error::Input(format!(
                "sequence of {} exceeds max_seq {}",
                seq.len(),
                self.config.max_seq
            )));
        }
        if seq.tokens.cols() != self.config.d {
            return Err(Error::shape("encode", format!("width {} vs {}", seq.tokens.cols(), self.config.d)));
        }
        let all_real = seq.mask.iter().all(|&m| m);
        let mask = (!all_real).then_some(seq.mask.as_slice());
        let mut x = seq.tokens;
        for b in &self.blocks {
            let h = x.rmsnorm(&p.var(b.norm_attn))?;
            x = x.add(&b.attn.self_attend(&h, mask, p)?)?;
            let h = x.rmsnorm(&p.var(b.norm_mlp))?;
            x = x.add(&b.mlp.forward(&h, p)?)?;
        }
        Ok(Conditioning {
            features: x.rmsnorm(&p.var(self.final_norm))?,
            mask: seq.mask.clone(),
        })
    }
}
