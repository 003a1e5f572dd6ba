//! Proprioceptive state to vocabulary tokens.
//!
//! Each scalar is clipped to `[q_min, q_max]`, binned uniformly into `B`
//! bins and mapped onto the last `B` ids of the vocabulary in reverse order
//! (`τ = V - 1 - b`), so the state lives in the same embedding table as the
//! language tokens.

use crate::autodiff::{embedding_lookup, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::sequence::{Modality, TokenSequence};
use crate::tensor::Tensor;

/// Binning and vocabulary layout for a `p`-dimensional state.
#[derive(Clone, Debug, PartialEq)]
pub struct ProprioSpec {
    dim: usize,
    q_min: f64,
    q_max: f64,
    bins: usize,
    vocab: usize,
    per_dim: Option<Vec<(f64, f64)>>,
}

impl ProprioSpec {
    pub fn new(dim: usize, q_min: f64, q_max: f64, bins: usize, vocab: usize) -> Result<Self> {
        if !(q_min.is_finite() && q_max.is_finite()) || q_min >= q_max {
            return Err(Error::Config(format!("clip range [{q_min}, {q_max}] is empty")));
        }
        if bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
        }
        if vocab < bins {
            return Err(Error::Config(format!("vocabulary {vocab} smaller than bin count {bins}")));
        }
        if dim == 0 {
            return Err(Error::Config("proprio dimension is zero".into()));
        }
        Ok(ProprioSpec {
            dim,
            q_min,
            q_max,
            bins,
            vocab,
            per_dim: None,
        })
    }

    /// Overrides the shared clip range with one range per dimension.
    pub fn with_per_dim_ranges(mut self, ranges: Vec<(f64, f64)>) -> Result<Self> {
        if ranges.len() != self.dim {
            return Err(Error::Config(format!("{} ranges for {} dims", ranges.len(), self.dim)));
        }
        if let Some(&(lo, hi)) = ranges.iter().find(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config(format!("clip range [{lo}, {hi}] is empty")));
        }
        self.per_dim = Some(ranges);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn range(&self, k: usize) -> (f64, f64) {
        match &self.per_dim {
            Some(r) => r[k],
            None => (self.q_min, self.q_max),
        }
    }

    /// Width of one bin in state units along dimension `k`.
    pub fn bin_width(&self, k: usize) -> f64 {
        let (lo, hi) = self.range(k);
        (hi - lo) / (self.bins - 1) as f64
    }

    /// `floor((clip(q) - q_min) / (q_max - q_min) · (B - 1))` on dimension `k`.
    pub fn bin_index_dim(&self, q: f64, k: usize) -> Result<usize> {
        if !q.is_finite() {
            return Err(Error::Input(format!("state value {q} is not finite")));
        }
        let (lo, hi) = self.range(k);
        let frac = (q.clamp(lo, hi) - lo) / (hi - lo);
        let b = (frac * (self.bins - 1) as f64).floor() as usize;
        Ok(b.min(self.bins - 1))
    }

    pub fn bin_index(&self, q: f64) -> Result<usize> {
        self.bin_index_dim(q, 0)
    }

    /// Reverse vocabulary mapping `V - 1 - b`.
    pub fn token_id(&self, bin: usize) -> Result<usize> {
        if bin >= self.bins {
            return Err(Error::Contract(format!("bin {bin} outside 0..{}", self.bins)));
        }
        Ok(self.vocab - 1 - bin)
    }

    /// Inverse of [`ProprioSpec::token_id`].
    pub fn bin_of_token(&self, token: usize) -> Result<usize> {
        if token >= self.vocab || token < self.vocab - self.bins {
            return Err(Error::Contract(format!("token {token} is not a state token")));
        }
        Ok(self.vocab - 1 - token)
    }

    /// Clips every dimension into its range.
    pub fn clip(&self, state: &ProprioState) -> ProprioState {
        ProprioState(
            state
                .0
                .iter()
                .enumerate()
                .map(|(k, &q)| {
                    let (lo, hi) = self.range(k);
                    q.clamp(lo, hi)
                })
                .collect(),
        )
    }

    /// Token id per dimension of `state`.
    pub fn token_ids(&self, state: &ProprioState) -> Result<Vec<usize>> {
        self.check(state)?;
        state
            .0
            .iter()
            .enumerate()
            .map(|(k, &q)| self.token_id(self.bin_index_dim(q, k)?))
            .collect()
    }

    fn check(&self, state: &ProprioState) -> Result<()> {
        if state.0.len() != self.dim {
            return Err(Error::Input(format!(
                "state has {} values, spec expects {}",
                state.0.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// A `p`-vector of joint angles, end-effector pose and gripper values.
#[derive(Clone, Debug, PartialEq)]
pub struct ProprioState(pub Vec<f64>);

impl ProprioState {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `H_p`: one embedding row per state dimension, looked up in the shared
/// vocabulary table (`V×D`).
pub fn tokenize_state<'t>(state: &ProprioState, table: &Var<'t>, spec: &ProprioSpec) -> Result<TokenSequence<'t>> {
    if table.rows() != spec.vocab() {
        return Err(Error::shape(
            "tokenize_state",
            format!("table has {} rows, vocabulary is {}", table.rows(), spec.vocab()),
        ));
    }
    let ids = spec.token_ids(state)?;
    Ok(TokenSequence::new(embedding_lookup(table, &ids)?, Modality::Proprio))
}

/// Two-layer MLP mapping the raw state to a single continuous token; the
/// ablation alternative to tokenization.
#[derive(Clone, Debug)]
pub struct MlpStateEncoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpStateEncoder {
    pub fn new(params: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, out: usize, rng: &mut Rng) -> Self {
        MlpStateEncoder {
            w1: params.linear(&format!("{prefix}.w1"), dim, hidden, rng),
            b1: params.bias(&format!("{prefix}.b1"), hidden),
            w2: params.linear(&format!("{prefix}.w2"), hidden, out, rng),
            b2: params.bias(&format!("{prefix}.b2"), out),
        }
    }

    /// `1×out` token: `gelu(q·W1 + b1)·W2 + b2`.
    pub fn encode<'t>(&self, tape: &'t Tape, state: &ProprioState, p: &Binding<'t>) -> Result<TokenSequence<'t>> {
        let w1 = p.var(self.w1);
        if w1.rows() != state.0.len() {
            return Err(Error::shape(
                "mlp_encode_state",
                format!("state of {} for encoder input {}", state.0.len(), w1.rows()),
            ));
        }
        if let Some(q) = state.0.iter().find(|q| !q.is_finite()) {
            return Err(Error::Input(format!("state value {q} is not finite")));
        }
        let q = tape.constant(Tensor::row(&state.0));
        let h = q.matmul(&w1)?.add_row(&p.var(self.b1))?.gelu()?;
        let out = h.matmul(&p.var(self.w2))?.add_row(&p.var(self.b2))?;
        Ok(TokenSequence::new(out, Modality::Proprio))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ProprioSpec {
        ProprioSpec::new(1, -3.0, 3.0, 256, 1000).unwrap()
    }

    #[test]
    fn bin_endpoints_and_midpoint() {
        let s = spec();
        assert_eq!(s.bin_index(-3.0).unwrap(), 0);
        assert_eq!(s.bin_index(10.0).unwrap(), 255);
        assert_eq!(s.bin_index(3.0).unwrap(), 255);
        assert_eq!(s.bin_index(-100.0).unwrap(), 0);
        assert_eq!(s.bin_index(0.0).unwrap(), 127);
    }

    #[test]
    fn non_finite_state_is_rejected() {
        assert!(matches!(spec().bin_index(f64::NAN), Err(Error::Input(_))));
        assert!(matches!(spec().bin_index(f64::INFINITY), Err(Error::Input(_))));
    }

    #[test]
    fn reverse_vocabulary_mapping() {
        let s = spec();
        assert_eq!(s.token_id(0).unwrap(), 999);
        assert_eq!(s.token_id(255).unwrap(), 744);
        assert!(matches!(s.token_id(256), Err(Error::Contract(_))));
        for b in 0..256 {
            assert_eq!(s.bin_of_token(s.token_id(b).unwrap()).unwrap(), b);
        }
        assert!(s.bin_of_token(743).is_err());
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(ProprioSpec::new(1, 1.0, 1.0, 8, 32).is_err());
        assert!(ProprioSpec::new(1, -1.0, 1.0, 1, 32).is_err());
        assert!(ProprioSpec::new(1, -1.0, 1.0, 64, 32).is_err());
        assert!(ProprioSpec::new(2, -1.0, 1.0, 8, 32)
            .unwrap()
            .with_per_dim_ranges(vec![(0.0, 1.0), (2.0, 2.0)])
            .is_err());
    }

    #[test]
    fn per_dim_ranges_bin_independently() {
        let s = ProprioSpec::new(2, -3.0, 3.0, 11, 32)
            .unwrap()
            .with_per_dim_ranges(vec![(0.0, 1.0), (-10.0, 10.0)])
            .unwrap();
        let ids = s.token_ids(&ProprioState(vec![0.5, 0.5])).unwrap();
        assert_eq!(ids, vec![31 - 5, 31 - 5]);
        let ids = s.token_ids(&ProprioState(vec![1.0, 1.0])).unwrap();
        assert_eq!(ids, vec![31 - 10, 31 - 5]);
    }

    #[test]
    fn first_bin_picks_last_table_row() {
        let s = ProprioSpec::new(1, -3.0, 3.0, 4, 6).unwrap();
        let mut rng = Rng::new(1);
        let table = rng.normal_tensor(&[6, 3], 1.0);
        let tape = Tape::new();
        let t = tape.constant(table.clone());
        let hp = tokenize_state(&ProprioState(vec![-3.0]), &t, &s).unwrap();
        assert_eq!(hp.tokens.value().data(), table.row_slice(5));
        assert_eq!(hp.modality, vec![Modality::Proprio]);
    }

    #[test]
    fn table_vocab_mismatch() {
        let s = ProprioSpec::new(1, -3.0, 3.0, 4, 6).unwrap();
        let tape = Tape::new();
        let t = tape.constant(Tensor::zeros(&[5, 3]));
        assert!(tokenize_state(&ProprioState(vec![0.0]), &t, &s).is_err());
        let t = tape.constant(Tensor::zeros(&[6, 3]));
        assert!(tokenize_state(&ProprioState(vec![0.0, 1.0]), &t, &s).is_err());
    }
}
