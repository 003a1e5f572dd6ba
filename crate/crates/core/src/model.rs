//! The full policy: state encoding, visual retention, the encoder stub and
//! the flow head, wired according to a [`Config`].

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, Conditioning, PositionLayout};
use crate::config::{Config, Guidance, ProprioEncoding, Retention};
use crate::error::{Error, Result};
use crate::head::{ActionHead, HeadContext};
use crate::params::{Binding, ParamStore};
use crate::rng::Rng;
use crate::selector::{context_token, kept_indices, pool_tokens, select, top_voted, PoolMethod, SelectMode, SelectorParams};
use crate::sequence::{Modality, TokenSequence};
use crate::task::Episode;
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize_state, MlpStateEncoder, ProprioSpec};

/// Model structure. Parameter values live in a separate [`ParamStore`] so
/// raw and EMA weights can share one structure.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub backbone: Backbone,
    pub head: ActionHead,
    pub selector: SelectorParams,
    pub spec: ProprioSpec,
    pub state_mlp: Option<MlpStateEncoder>,
}

/// The encoder input for one item, before encoding.
#[derive(Debug)]
pub struct Assembled<'t> {
    pub seq: TokenSequence<'t>,
    pub extra: Option<Var<'t>>,
    pub kept: usize,
    pub available: usize,
    pub probs: Option<Tensor>,
    pub mask: Option<Vec<bool>>,
}

/// What one item's conditioning pass produced.
#[derive(Debug)]
pub struct Conditioned<'t> {
    pub cond: Conditioning<'t>,
    pub extra: Option<Var<'t>>,
    /// Visual tokens that reached the encoder (1 for mean pooling).
    pub kept: usize,
    pub available: usize,
    /// Per-token selection probabilities, when a selector ran.
    pub probs: Option<Tensor>,
    pub mask: Option<Vec<bool>>,
}

/// Retention override used by benchmarks and the equivalence check.
#[derive(Clone, Debug, PartialEq)]
pub enum Route {
    /// Follow the config.
    Config,
    /// Selection machinery with every weight forced to one.
    KeepAll,
    /// Use this visual mask with unit weights, bypassing scoring.
    Fixed(Vec<bool>),
    /// Run the inference-mode selector, then keep exactly the `k` most-voted
    /// tokens with unit weights.
    TopK(usize),
}

impl Model {
    /// Builds the structure and a freshly initialized parameter store.
    pub fn new(config: &Config, rng: &mut Rng) -> Result<(Model, ParamStore)> {
        config.validate()?;
        Model::with_visual_tokens(config, config.n_visual(), rng)
    }

    /// Like [`Model::new`] but sized for `n_visual` visual tokens instead of
    /// the task grid, for inputs that do not come from the synthetic task.
    pub fn with_visual_tokens(config: &Config, n_visual: usize, rng: &mut Rng) -> Result<(Model, ParamStore)> {
        let layout = PositionLayout {
            n_visual,
            ..config.layout()
        };
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, config.stub(), layout, rng)?;
        let selector = SelectorParams::new(&mut params, config.d_model, rng);
        let state_mlp = match config.proprio {
            ProprioEncoding::MlpVlm => Some(MlpStateEncoder::new(
                &mut params,
                "state_mlp",
                config.proprio_dim,
                config.d_model * 2,
                config.d_model,
                rng,
            )),
            ProprioEncoding::MlpAct => Some(MlpStateEncoder::new(
                &mut params,
                "state_mlp",
                config.proprio_dim,
                config.head_hidden,
                config.head_hidden,
                rng,
            )),
            _ => None,
        };
        let head = ActionHead::new(&mut params, config.head(), rng)?;
        let model = Model {
            config: config.clone(),
            backbone,
            head,
            selector,
            spec: config.proprio_spec()?,
            state_mlp,
        };
        Ok((model, params))
    }

    /// `H_p` with positions, or `None` when the state does not enter the encoder.
    fn state_tokens<'t>(&self, tape: &'t Tape, ep: &Episode, p: &Binding<'t>) -> Result<Option<TokenSequence<'t>>> {
        let layout = self.backbone.layout;
        let seq = match (self.config.proprio, &self.state_mlp) {
            (ProprioEncoding::Tokenized, _) => tokenize_state(&ep.state, &self.backbone.embed_table(p), &self.spec)?,
            (ProprioEncoding::MlpVlm, Some(mlp)) => mlp.encode(tape, &ep.state, p)?,
            _ => return Ok(None),
        };
        let positions: Vec<usize> = (0..seq.len()).map(|k| layout.proprio(k)).collect();
        let tokens = self.backbone.add_positions(&seq.tokens, &positions, p)?;
        Ok(Some(TokenSequence::new(tokens, Modality::Proprio)))
    }

    fn guidance<'t>(&self, tape: &'t Tape, hl: &TokenSequence<'t>, hp: Option<&TokenSequence<'t>>) -> Result<Var<'t>> {
        let missing = || Error::Config("guidance needs state tokens but none are encoded".into());
        match self.config.guidance {
            Guidance::Language => Ok(hl.tokens),
            Guidance::Proprio => hp.map(|h| h.tokens).ok_or_else(missing),
            Guidance::Joint => {
                let hp = hp.ok_or_else(missing)?;
                Ok(TokenSequence::concat(tape, &[hl, hp])?.tokens)
            }
        }
    }

    /// Runs everything up to the head for one episode: builds
    /// `[H_v^cond; H_ctx; H_p; H_l]` and encodes it.
    pub fn condition<'t>(
        &self,
        tape: &'t Tape,
        ep: &Episode,
        p: &Binding<'t>,
        mode: SelectMode,
        route: &Route,
        rng: &mut Rng,
    ) -> Result<Conditioned<'t>> {
        let a = self.assemble(tape, ep, p, mode, route, rng)?;
        Ok(Conditioned {
            cond: self.backbone.encode(&a.seq, p)?,
            extra: a.extra,
            kept: a.kept,
            available: a.available,
            probs: a.probs,
            mask: a.mask,
        })
    }

    /// Embeds, selects and concatenates the encoder input.
    pub fn assemble<'t>(
        &self,
        tape: &'t Tape,
        ep: &Episode,
        p: &Binding<'t>,
        mode: SelectMode,
        route: &Route,
        rng: &mut Rng,
    ) -> Result<Assembled<'t>> {
        let layout = self.backbone.layout;
        let hv = tape.constant(ep.visual.clone());
        let n = hv.rows();
        let hl = self.backbone.embed_instruction(&ep.instruction, p)?;
        let hp = self.state_tokens(tape, ep, p)?;

        let mut probs = None;
        let mut mask = None;
        let (visual, kept_idx): (Var<'t>, Vec<usize>) = match (route, self.config.retention) {
            (Route::Fixed(m), _) => {
                let kept = kept_indices(m);
                if kept.is_empty() {
                    return Err(Error::Contract("fixed route keeps no tokens".into()));
                }
                mask = Some(m.clone());
                (hv.gather_rows(&kept)?, kept)
            }
            (Route::TopK(k), _) => {
                let hq = self.guidance(tape, &hl, hp.as_ref())?;
                let sel = select(&hv, &hq, &self.selector, p, SelectMode::Infer, rng)?;
                let m = top_voted(&sel.votes, (*k).clamp(1, n));
                let kept = kept_indices(&m);
                probs = Some(sel.probs.value());
                mask = Some(m);
                (hv.gather_rows(&kept)?, kept)
            }
            (Route::KeepAll, _) => {
                let hq = self.guidance(tape, &hl, hp.as_ref())?;
                let sel = select(&hv, &hq, &self.selector, p, SelectMode::KeepAll, rng)?;
                mask = Some(sel.mask.clone());
                (sel.compact, sel.kept)
            }
            (Route::Config, Retention::Dense) => (hv, (0..n).collect()),
            (Route::Config, Retention::Selected) => {
                let hq = self.guidance(tape, &hl, hp.as_ref())?;
                let sel = select(&hv, &hq, &self.selector, p, mode, rng)?;
                probs = Some(sel.probs.value());
                mask = Some(sel.mask.clone());
                (sel.compact, sel.kept)
            }
            (Route::Config, Retention::MeanPool) => {
                let (t, _) = pool_tokens(&hv, PoolMethod::Mean, 1, rng)?;
                (t, vec![layout.visual(0)])
            }
            (Route::Config, Retention::MaxTopK) => pool_tokens(&hv, PoolMethod::MaxTopK, self.config.pool_k, rng)?,
            (Route::Config, Retention::RandomK) => pool_tokens(&hv, PoolMethod::RandomK, self.config.pool_k, rng)?,
        };
        let positions: Vec<usize> = kept_idx.iter().map(|&j| layout.visual(j)).collect();
        let visual = TokenSequence::new(self.backbone.add_positions(&visual, &positions, p)?, Modality::Vision);

        let ctx = if self.config.context {
            let c = context_token(&hv, &p.var(self.selector.w_ctx))?;
            let c = self.backbone.add_positions(&c, &[layout.context()], p)?;
            Some(TokenSequence::new(c, Modality::Context))
        } else {
            None
        };

        let mut parts: Vec<&TokenSequence<'t>> = vec![&visual];
        parts.extend(ctx.as_ref());
        parts.extend(hp.as_ref());
        parts.push(&hl);
        let seq = TokenSequence::concat(tape, &parts)?;

        let extra = match (self.config.proprio, &self.state_mlp) {
            (ProprioEncoding::MlpAct, Some(mlp)) => Some(mlp.encode(tape, &ep.state, p)?.tokens),
            _ => None,
        };
        Ok(Assembled {
            seq,
            extra,
            kept: kept_idx.len(),
            available: n,
            probs,
            mask,
        })
    }

    pub fn head_context<'t>(&self, c: &Conditioned<'t>, p: &Binding<'t>) -> Result<HeadContext<'t>> {
        self.head.prepare(&c.cond, c.extra, p)
    }

    /// Flow-matching loss for one episode. Selection noise and flow noise
    /// come from separate generators so routes that skip the selector still
    /// see the same `(T, ε)`.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        ep: &Episode,
        p: &Binding<'t>,
        mode: SelectMode,
        route: &Route,
        select_rng: &mut Rng,
        flow_rng: &mut Rng,
    ) -> Result<(Var<'t>, Conditioned<'t>)> {
        let c = self.condition(tape, ep, p, mode, route, select_rng)?;
        let ctx = self.head_context(&c, p)?;
        let loss = self.head.flow_loss(&ep.target, &ctx, flow_rng, p)?;
        Ok((loss, c))
    }

    /// Samples an action chunk with inference-mode selection.
    pub fn act(&self, params: &ParamStore, ep: &Episode, rng: &mut Rng) -> Result<(Tensor, usize)> {
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let c = self.condition(&tape, ep, &p, SelectMode::Infer, &Route::Config, rng)?;
        let ctx = self.head_context(&c, &p)?;
        Ok((self.head.sample(&ctx, self.config.sample_steps, rng, &p)?, c.kept))
    }
}
