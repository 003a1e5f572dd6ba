//! Guidance-conditioned visual token selection.
//!
//! Visual tokens attend to the guidance tokens (instruction and proprio) to
//! form one query per visual token. Each query scores every visual token;
//! after optional Gumbel perturbation each query row votes for its argmax
//! column, and every token with at least one vote is kept. Training routes
//! gradients through the straight-through weights `w = m + p̄ - sg(p̄)`,
//! where `p̄` is the column mean of the tempered softmax of the perturbed
//! scores.
//!
//! Kept tokens are gathered in their original order (unkept tokens are
//! dropped, not zeroed) and a context token summarizing all visual tokens is
//! produced alongside.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower bound on the softmax temperature of the soft path.
pub const SOFT_TEMPERATURE_FLOOR: f64 = 1e-4;

/// Cosine decay of the noise scale from `start` to `end` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            start: 1.0,
            end: 0.01,
            total_steps: 5000,
        }
    }
}

impl AnnealSchedule {
    /// `end + (start - end)·(1 + cos(π·step/total))/2`. Steps past either end
    /// are clamped to the endpoints.
    pub fn alpha(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.end;
        }
        let step = step.min(self.total_steps);
        if step == 0 {
            return self.start;
        }
        if step == self.total_steps {
            return self.end;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.end + (self.start - self.end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Learnable selector state: RMSNorm gains for the visual, guidance and
/// query streams plus the `D×D` context projection.
#[derive(Clone, Debug)]
pub struct SelectorParams {
    pub gain_visual: ParamId,
    pub gain_guidance: ParamId,
    pub gain_query: ParamId,
    pub w_ctx: ParamId,
}

impl SelectorParams {
    pub fn new(params: &mut ParamStore, d: usize, rng: &mut Rng) -> Self {
        SelectorParams {
            gain_visual: params.gain("selector.gain_visual", d),
            gain_guidance: params.gain("selector.gain_guidance", d),
            gain_query: params.gain("selector.gain_query", d),
            w_ctx: params.linear("selector.w_ctx", d, d, rng),
        }
    }
}

/// How a forward pass selects.
#[derive(Clone, Debug, PartialEq)]
pub enum SelectMode {
    /// Perturb with `alpha`-scaled Gumbel noise and attach the STE path.
    Train { alpha: f64 },
    /// `Train` with the mask and the stop-gradient anchor frozen at some
    /// reference point. Near that point the forward is smooth and its true
    /// derivative is the STE gradient, which lets finite differences check it.
    Pinned { alpha: f64, mask: Vec<bool>, anchor: Tensor },
    /// No noise and no soft path; weights are the hard mask.
    Infer,
    /// Keep every token with weight one (bypasses scoring).
    KeepAll,
}

/// Output of one selection.
#[derive(Debug)]
pub struct Selection<'t> {
    /// `m_j = 1` iff token `j` got at least one vote.
    pub mask: Vec<bool>,
    /// Votes per visual token.
    pub votes: Vec<usize>,
    /// STE weights, `1×N_v`; forward value equals `mask`.
    pub weights: Var<'t>,
    /// Per-token selection probability `p̄` (`1×N_v`). At inference this is
    /// the vote fraction, the zero-temperature limit of the soft path.
    pub probs: Var<'t>,
    /// Indices with `mask = 1`, ascending.
    pub kept: Vec<usize>,
    /// Kept rows scaled by their weights, `M×D`.
    pub compact: Var<'t>,
    /// Context token, `1×D`.
    pub context: Var<'t>,
}

impl Selection<'_> {
    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }
}

fn check_width(name: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::shape(name, format!("embedding widths {} vs {}", a.cols(), b.cols())));
    }
    Ok(())
}

fn check_nonempty(name: &'static str, v: &Var<'_>) -> Result<()> {
    if v.rows() == 0 {
        return Err(Error::shape(name, "empty token set"));
    }
    Ok(())
}

/// `Q = softmax(H̃_v H̃_qᵀ/√D)·H̃_q` from already-normalized streams.
fn queries_from_normed<'t>(hv_n: &Var<'t>, hq_n: &Var<'t>) -> Result<Var<'t>> {
    let d = hv_n.cols() as f64;
    hv_n.matmul_t(hq_n)?.scale(1.0 / d.sqrt())?.softmax_rows()?.matmul(hq_n)
}

/// `S = RMSNorm(Q)·H̃_vᵀ/√D` with `hv_n` already normalized.
fn scores_from_normed<'t>(q: &Var<'t>, hv_n: &Var<'t>, gain_query: &Var<'t>) -> Result<Var<'t>> {
    let d = hv_n.cols() as f64;
    q.rmsnorm(gain_query)?.matmul_t(hv_n)?.scale(1.0 / d.sqrt())
}

/// One query per visual token, each a convex combination of the normalized
/// guidance tokens.
pub fn make_queries<'t>(hv: &Var<'t>, hq: &Var<'t>, sp: &SelectorParams, p: &Binding<'t>) -> Result<Var<'t>> {
    check_width("make_queries", hv, hq)?;
    check_nonempty("make_queries", hv)?;
    check_nonempty("make_queries", hq)?;
    let hv_n = hv.rmsnorm(&p.var(sp.gain_visual))?;
    let hq_n = hq.rmsnorm(&p.var(sp.gain_guidance))?;
    queries_from_normed(&hv_n, &hq_n)
}

/// `N_v×N_v` retention scores of every visual token under every query.
pub fn score<'t>(q: &Var<'t>, hv: &Var<'t>, sp: &SelectorParams, p: &Binding<'t>) -> Result<Var<'t>> {
    check_width("score", q, hv)?;
    if q.rows() != hv.rows() {
        return Err(Error::shape("score", format!("{} queries for {} tokens", q.rows(), hv.rows())));
    }
    let hv_n = hv.rmsnorm(&p.var(sp.gain_visual))?;
    scores_from_normed(q, &hv_n, &p.var(sp.gain_query))
}

/// `Ŝ = S + α·G`. With `α = 0` the scores come back untouched.
pub fn perturb<'t>(scores: &Var<'t>, alpha: f64, rng: &mut Rng) -> Result<Var<'t>> {
    if !(alpha >= 0.0) {
        return Err(Error::Contract(format!("noise scale {alpha} is negative")));
    }
    if alpha == 0.0 {
        return Ok(*scores);
    }
    let g = rng.gumbel(&[scores.rows(), scores.cols()]).map(|v| alpha * v);
    scores.add(&scores.tape().constant(g))
}

/// Row-wise argmax votes (ties go to the lowest column) and the resulting
/// keep-mask.
pub fn vote_mask(perturbed: &Tensor) -> (Vec<bool>, Vec<usize>) {
    let n = perturbed.cols();
    let mut votes = vec![0usize; n];
    for i in 0..perturbed.rows() {
        let row = perturbed.row_slice(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        votes[best] += 1;
    }
    (votes.iter().map(|&c| c > 0).collect(), votes)
}

/// `P = softmax(Ŝ/α)` and `p̄ = mean_rows(P)` (`1×N_v`). The temperature is
/// floored at [`SOFT_TEMPERATURE_FLOOR`]; non-positive `α` is rejected.
pub fn soft_probs<'t>(perturbed: &Var<'t>, alpha: f64) -> Result<(Var<'t>, Var<'t>)> {
    if !(alpha > 0.0) {
        return Err(Error::Contract(format!(
            "soft selection needs a positive temperature, got {alpha}"
        )));
    }
    let temp = alpha.max(SOFT_TEMPERATURE_FLOOR);
    let probs = perturbed.scale(1.0 / temp)?.softmax_rows()?;
    let mean = probs.mean_rows()?;
    Ok((probs, mean))
}

/// `w = (p̄ - sg(p̄)) + m`: forward value is exactly `m`, gradient is `p̄`'s.
pub fn ste_weights<'t>(mask: &[bool], probs: &Var<'t>) -> Result<Var<'t>> {
    let n = probs.borrow().len();
    if n != mask.len() {
        return Err(Error::shape(
            "ste_weights",
            format!("{n} probabilities for a mask of {}", mask.len()),
        ));
    }
    let hard: Vec<f64> = mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    let m = probs.tape().constant(Tensor::row(&hard));
    // p - p is exactly zero, so adding m afterwards keeps the forward bitwise.
    probs.sub(&probs.stop_gradient())?.add(&m)
}

/// Indices where `mask` is set, ascending.
/// Mask keeping the `k` most-voted tokens; ties go to the lower index.
pub fn top_voted(votes: &[usize], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..votes.len()).collect();
    order.sort_by(|&a, &b| votes[b].cmp(&votes[a]).then(a.cmp(&b)));
    let mut mask = vec![false; votes.len()];
    for &j in order.iter().take(k) {
        mask[j] = true;
    }
    mask
}

pub fn kept_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(j, &k)| k.then_some(j)).collect()
}

/// Gathers the kept rows of `hv` in original order and scales each by its
/// weight: `diag(w)·H_v` restricted to the kept set.
pub fn apply_selection<'t>(hv: &Var<'t>, weights: &Var<'t>, mask: &[bool]) -> Result<(Var<'t>, Vec<usize>)> {
    if mask.len() != hv.rows() || weights.borrow().len() != hv.rows() {
        return Err(Error::shape(
            "apply_selection",
            format!("{} tokens, mask {}, weights {}", hv.rows(), mask.len(), weights.borrow().len()),
        ));
    }
    let kept = kept_indices(mask);
    if kept.is_empty() {
        return Err(Error::Contract("selection kept no tokens".into()));
    }
    let w_kept = weights.transpose()?.gather_rows(&kept)?;
    let compact = hv.gather_rows(&kept)?.scale_rows(&w_kept)?;
    Ok((compact, kept))
}

/// Pads each compact sequence with zero rows to the longest one in the
/// batch. Returns the padded sequences and per-item masks (`true` = real).
pub fn pad_batch<'t>(tape: &'t Tape, items: &[Var<'t>]) -> Result<Vec<(Var<'t>, Vec<bool>)>> {
    let longest = items.iter().map(|v| v.rows()).max().unwrap_or(0);
    items
        .iter()
        .map(|v| {
            let (m, d) = (v.rows(), v.cols());
            let mut mask = vec![true; m];
            mask.resize(longest, false);
            let padded = if m == longest {
                *v
            } else {
                tape.concat_rows(&[*v, tape.constant(Tensor::zeros(&[longest - m, d]))])?
            };
            Ok((padded, mask))
        })
        .collect()
}

/// `H_ctx = W_c · mean(H_v)`, a `1×D` summary of all visual tokens.
pub fn context_token<'t>(hv: &Var<'t>, w_ctx: &Var<'t>) -> Result<Var<'t>> {
    check_nonempty("context_token", hv)?;
    hv.mean_rows()?.matmul_t(w_ctx)
}

/// Runs the full selection for one item.
pub fn select<'t>(
    hv: &Var<'t>,
    hq: &Var<'t>,
    sp: &SelectorParams,
    p: &Binding<'t>,
    mode: SelectMode,
    rng: &mut Rng,
) -> Result<Selection<'t>> {
    let tape = hv.tape();
    let n = hv.rows();
    check_nonempty("select", hv)?;
    let context = context_token(hv, &p.var(sp.w_ctx))?;

    if mode == SelectMode::KeepAll {
        let ones = tape.constant(Tensor::full(&[1, n], 1.0));
        let mask = vec![true; n];
        let (compact, kept) = apply_selection(hv, &ones, &mask)?;
        return Ok(Selection {
            probs: tape.constant(Tensor::full(&[1, n], 1.0 / n as f64)),
            votes: vec![1; n],
            mask,
            weights: ones,
            kept,
            compact,
            context,
        });
    }

    check_width("select", hv, hq)?;
    check_nonempty("select", hq)?;
    let hv_n = hv.rmsnorm(&p.var(sp.gain_visual))?;
    let hq_n = hq.rmsnorm(&p.var(sp.gain_guidance))?;
    let q = queries_from_normed(&hv_n, &hq_n)?;
    let s = scores_from_normed(&q, &hv_n, &p.var(sp.gain_query))?;

    let (perturbed, alpha) = match &mode {
        SelectMode::Train { alpha } | SelectMode::Pinned { alpha, .. } => (perturb(&s, *alpha, rng)?, *alpha),
        _ => (s, 0.0),
    };
    let (mut mask, votes) = vote_mask(&perturbed.borrow());

    let (weights, probs) = if let SelectMode::Pinned { mask: pinned, anchor, .. } = &mode {
        if pinned.len() != n || anchor.len() != n {
            return Err(Error::shape("select", format!("pin of {} for {n} tokens", pinned.len())));
        }
        mask.clone_from(pinned);
        let (_, probs) = soft_probs(&perturbed, alpha)?;
        let hard: Vec<f64> = mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let w = probs.sub(&tape.constant(anchor.clone()))?.add(&tape.constant(Tensor::row(&hard)))?;
        (w, probs)
    } else if alpha > 0.0 {
        let (_, probs) = soft_probs(&perturbed, alpha)?;
        (ste_weights(&mask, &probs)?, probs)
    } else {
        let hard: Vec<f64> = mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let frac: Vec<f64> = votes.iter().map(|&v| v as f64 / n as f64).collect();
        (tape.constant(Tensor::row(&hard)), tape.constant(Tensor::row(&frac)))
    };
    let (compact, kept) = apply_selection(hv, &weights, &mask)?;
    Ok(Selection {
        mask,
        votes,
        weights,
        probs,
        kept,
        compact,
        context,
    })
}

/// Query-free retention baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMethod {
    /// Average all tokens into one.
    Mean,
    /// Keep the `K` tokens with the largest L2 norm.
    MaxTopK,
    /// Keep `K` tokens drawn uniformly without replacement.
    RandomK,
}

/// Applies a pooling baseline. Returns the reduced tokens and, for the
/// subset methods, the kept indices in ascending order (empty for `Mean`).
pub fn pool_tokens<'t>(hv: &Var<'t>, method: PoolMethod, k: usize, rng: &mut Rng) -> Result<(Var<'t>, Vec<usize>)> {
    let n = hv.rows();
    check_nonempty("pool_tokens", hv)?;
    if method != PoolMethod::Mean && !(1..=n).contains(&k) {
        return Err(Error::Contract(format!("pool size {k} outside 1..={n}")));
    }
    match method {
        PoolMethod::Mean => Ok((hv.mean_rows()?, Vec::new())),
        PoolMethod::MaxTopK => {
            let norms: Vec<f64> = {
                let x = hv.borrow();
                (0..n).map(|i| x.row_slice(i).iter().map(|v| v * v).sum::<f64>()).collect()
            };
            let mut order: Vec<usize> = (0..n).collect();
            // Stable sort keeps the lower index first among equal norms.
            order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
            let mut kept = order[..k].to_vec();
            kept.sort_unstable();
            Ok((hv.gather_rows(&kept)?, kept))
        }
        PoolMethod::RandomK => {
            let kept = rng.choose_sorted(n, k);
            Ok((hv.gather_rows(&kept)?, kept))
        }
    }
}
