//! Token sequences with modality tags and a key mask.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Language,
    Proprio,
    Context,
}

/// `len×D` embeddings on a tape, one tag and one mask bit per row.
#[derive(Clone, Debug)]
pub struct TokenSequence<'t> {
    pub tokens: Var<'t>,
    pub modality: Vec<Modality>,
    /// `true` marks a real token, `false` a padding slot.
    pub mask: Vec<bool>,
}

impl<'t> TokenSequence<'t> {
    pub fn new(tokens: Var<'t>, modality: Modality) -> Self {
        let n = tokens.rows();
        TokenSequence {
            tokens,
            modality: vec![modality; n],
            mask: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    /// Concatenates sequences in order. Empty parts are skipped.
    pub fn concat(tape: &'t Tape, parts: &[&TokenSequence<'t>]) -> Result<Self> {
        let live: Vec<&&TokenSequence<'t>> = parts.iter().filter(|p| !p.is_empty()).collect();
        if live.is_empty() {
            return Err(Error::Contract("concatenating only empty sequences".into()));
        }
        let tokens = tape.concat_rows(&live.iter().map(|p| p.tokens).collect::<Vec<_>>())?;
        Ok(TokenSequence {
            tokens,
            modality: live.iter().flat_map(|p| p.modality.iter().copied()).collect(),
            mask: live.iter().flat_map(|p| p.mask.iter().copied()).collect(),
        })
    }
}
