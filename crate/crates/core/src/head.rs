//! Flow-matching action head.
//!
//! A chunk `a` (`H×A`) is noised along the straight path
//! `a^T = (1 - T)·a + T·ε` and the network regresses the constant velocity
//! `ε - a`. Sampling starts from pure noise at `T = 1` and takes Euler steps
//! `a ← a - Δ·v` down to `T = 0`.
//!
//! The network is a small transformer over the `H` action tokens: full
//! self-attention, cross-attention to the masked conditioning `C`, and an
//! MLP, each behind an RMSNorm whose scale and shift come from the time
//! embedding (AdaLN). The modulation projections start at zero, so at
//! initialization the time signal has no effect.

use crate::autodiff::{Tape, Var};
use crate::backbone::Conditioning;
use crate::error::{Error, Result};
use crate::layers::{Attention, Memory, Mlp};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Euler steps at sampling time.
    pub steps: usize,
    pub horizon: usize,
    pub action_dim: usize,
    /// Width of the conditioning features `C`.
    pub cond_dim: usize,
    /// Width of the sinusoidal time features.
    pub time_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 64,
            layers: 2,
            heads: 2,
            steps: 4,
            horizon: 10,
            action_dim: 2,
            cond_dim: 32,
            time_dim: 32,
            mlp_ratio: 2,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden {} not divisible by {} heads", self.hidden, self.heads)));
        }
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if self.horizon == 0 || self.action_dim == 0 {
            return Err(Error::Config("empty action chunk".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time features must be even, got {}", self.time_dim)));
        }
        Ok(())
    }
}

/// `(1 - T)·a + T·ε`.
pub fn noise_chunk(a: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("flow time {t} outside [0, 1]")));
    }
    same_shape("noise_chunk", a, eps)?;
    let data = a.data().iter().zip(eps.data()).map(|(&x, &e)| (1.0 - t) * x + t * e).collect();
    Tensor::new(a.shape(), data)
}

/// `ε - a`; no dependence on `T`.
pub fn target_velocity(a: &Tensor, eps: &Tensor) -> Result<Tensor> {
    same_shape("target_velocity", a, eps)?;
    let data = a.data().iter().zip(eps.data()).map(|(&x, &e)| e - x).collect();
    Tensor::new(a.shape(), data)
}

/// `mean((v - (ε - a))²)`.
pub fn flow_matching_loss<'t>(v: &Var<'t>, a: &Tensor, eps: &Tensor) -> Result<Var<'t>> {
    let target = v.tape().constant(target_velocity(a, eps)?);
    let diff = v.sub(&target)?;
    diff.mul(&diff)?.mean()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Integrates `da/dT = -v(a, T)` from `T = 1` to `T = 0` in `steps` uniform
/// Euler steps, starting at `start`.
pub fn euler_sample<F>(start: Tensor, steps: usize, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::Contract("sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut a = start;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = field(&a, t)?;
        same_shape("euler_sample", &a, &v)?;
        for (x, dv) in a.data_mut().iter_mut().zip(v.data()) {
            *x -= dt * dv;
        }
    }
    Ok(a)
}

/// `[sin(w_k·s), cos(w_k·s)]` with `s = 1000·T` and geometric frequencies.
pub fn time_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let s = 1000.0 * t;
    let mut out = vec![0.0; 2 * half];
    for k in 0..half {
        let w = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (w * s).sin();
        out[half + k] = (w * s).cos();
    }
    Tensor::row(&out)
}

#[derive(Clone, Debug)]
struct Modulated {
    norm: ParamId,
    /// `hidden × 2·hidden`, zero-initialized: `[shift | scale]`.
    w_mod: ParamId,
    b_mod: ParamId,
}

impl Modulated {
    fn new(params: &mut ParamStore, prefix: &str, hidden: usize) -> Self {
        Modulated {
            norm: params.gain(&format!("{prefix}.norm"), hidden),
            w_mod: params.zeros(&format!("{prefix}.w_mod"), hidden, 2 * hidden),
            b_mod: params.bias(&format!("{prefix}.b_mod"), 2 * hidden),
        }
    }

    /// `rmsnorm(x)·(1 + scale) + shift`, with `(shift, scale)` from `silu(c)`.
    fn forward<'t>(&self, x: &Var<'t>, c_act: &Var<'t>, p: &Binding<'t>) -> Result<Var<'t>> {
        let hidden = x.cols();
        let m = c_act.matmul(&p.var(self.w_mod))?.add_row(&p.var(self.b_mod))?;
        let shift = m.slice_cols(0, hidden)?;
        let scale = m.slice_cols(hidden, hidden)?;
        let one = x.tape().constant(Tensor::full(&[1, hidden], 1.0));
        x.rmsnorm(&p.var(self.norm))?.mul_row(&scale.add(&one)?)?.add_row(&shift)
    }
}

#[derive(Clone, Debug)]
struct Block {
    mod_self: Modulated,
    self_attn: Attention,
    mod_cross: Modulated,
    cross_attn: Attention,
    mod_mlp: Modulated,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ActionHead {
    pub config: HeadConfig,
    w_in: ParamId,
    b_in: ParamId,
    pos: ParamId,
    time_mlp: Mlp,
    blocks: Vec<Block>,
    mod_out: Modulated,
    w_out: ParamId,
    b_out: ParamId,
}

/// Per-sample state reused across velocity evaluations: projected
/// cross-attention memories, the key mask and the optional extra
/// conditioning vector added to the time embedding.
#[derive(Clone, Debug)]
pub struct HeadContext<'t> {
    memories: Vec<Memory<'t>>,
    mask: Option<Vec<bool>>,
    extra: Option<Var<'t>>,
}

impl ActionHead {
    pub fn new(params: &mut ParamStore, config: HeadConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let blocks = (0..config.layers)
            .map(|l| Block {
                mod_self: Modulated::new(params, &format!("head.{l}.mod_self"), h),
                self_attn: Attention::new(params, &format!("head.{l}.self_attn"), h, h, config.heads, rng),
                mod_cross: Modulated::new(params, &format!("head.{l}.mod_cross"), h),
                cross_attn: Attention::new(params, &format!("head.{l}.cross_attn"), h, config.cond_dim, config.heads, rng),
                mod_mlp: Modulated::new(params, &format!("head.{l}.mod_mlp"), h),
                mlp: Mlp::new(params, &format!("head.{l}.mlp"), h, h * config.mlp_ratio, h, rng),
            })
            .collect();
        Ok(ActionHead {
            w_in: params.linear("head.w_in", config.action_dim, h, rng),
            b_in: params.bias("head.b_in", h),
            pos: params.weight("head.pos", config.horizon, h, 0.1, rng),
            time_mlp: Mlp::new(params, "head.time", config.time_dim, h, h, rng),
            blocks,
            mod_out: Modulated::new(params, "head.mod_out", h),
            w_out: params.linear("head.w_out", h, config.action_dim, rng),
            b_out: params.bias("head.b_out", config.action_dim),
            config,
        })
    }

    /// Projects `C` for every cross-attention layer. `extra` (`1×hidden`)
    /// joins the time embedding in the modulation path.
    pub fn prepare<'t>(&self, cond: &Conditioning<'t>, extra: Option<Var<'t>>, p: &Binding<'t>) -> Result<HeadContext<'t>> {
        if cond.features.cols() != self.config.cond_dim {
            return Err(Error::shape(
                "head_prepare",
                format!("conditioning width {} vs {}", cond.features.cols(), self.config.cond_dim),
            ));
        }
        if let Some(e) = &extra {
            if e.shape() != [1, self.config.hidden] {
                return Err(Error::shape("head_prepare", format!("extra conditioning {:?}", e.shape())));
            }
        }
        let memories = self
            .blocks
            .iter()
            .map(|b| b.cross_attn.project_memory(&cond.features, p))
            .collect::<Result<_>>()?;
        let mask = (!cond.mask.iter().all(|&m| m)).then(|| cond.mask.clone());
        Ok(HeadContext { memories, mask, extra })
    }

    /// `v_θ(a^T, T, C)`, `H×A`.
    pub fn predict_velocity<'t>(&self, noised: &Var<'t>, t: f64, ctx: &HeadContext<'t>, p: &Binding<'t>) -> Result<Var<'t>> {
        let cfg = &self.config;
        if noised.shape() != [cfg.horizon, cfg.action_dim] {
            return Err(Error::shape(
                "predict_velocity",
                format!("chunk {:?}, expected [{}, {}]", noised.shape(), cfg.horizon, cfg.action_dim),
            ));
        }
        let tape = noised.tape();
        let mut c = self.time_mlp.forward(&tape.constant(time_features(t, cfg.time_dim)), p)?;
        if let Some(e) = &ctx.extra {
            c = c.add(e)?;
        }
        let c_act = c.silu()?;
        let mask = ctx.mask.as_deref();

        let mut x = noised.matmul(&p.var(self.w_in))?.add_row(&p.var(self.b_in))?.add(&p.var(self.pos))?;
        for (b, mem) in self.blocks.iter().zip(&ctx.memories) {
            let h = b.mod_self.forward(&x, &c_act, p)?;
            x = x.add(&b.self_attn.self_attend(&h, None, p)?)?;
            let h = b.mod_cross.forward(&x, &c_act, p)?;
            x = x.add(&b.cross_attn.forward(&h, mem, mask, p)?)?;
            let h = b.mod_mlp.forward(&x, &c_act, p)?;
            x = x.add(&b.mlp.forward(&h, p)?)?;
        }
        self.mod_out
            .forward(&x, &c_act, p)?
            .matmul(&p.var(self.w_out))?
            .add_row(&p.var(self.b_out))
    }

    /// Mean squared error between `v_θ(a^T, T)` and `ε - a` at a given
    /// `(T, ε)`.
    pub fn flow_loss_at<'t>(
        &self,
        a: &Tensor,
        t: f64,
        eps: &Tensor,
        ctx: &HeadContext<'t>,
        p: &Binding<'t>,
    ) -> Result<Var<'t>> {
        let tape = ctx_tape(ctx, p)?;
        let noised = tape.constant(noise_chunk(a, t, eps)?);
        flow_matching_loss(&self.predict_velocity(&noised, t, ctx, p)?, a, eps)
    }

    /// Draws `T ~ U(0, 1)` and `ε ~ N(0, I)` from `rng`, then
    /// [`ActionHead::flow_loss_at`].
    pub fn flow_loss<'t>(&self, a: &Tensor, ctx: &HeadContext<'t>, rng: &mut Rng, p: &Binding<'t>) -> Result<Var<'t>> {
        let t = rng.uniform();
        let eps = rng.normal_tensor(&[self.config.horizon, self.config.action_dim], 1.0);
        self.flow_loss_at(a, t, &eps, ctx, p)
    }

    /// Euler sampling from `ε ~ N(0, I)` with `steps` steps.
    pub fn sample<'t>(&self, ctx: &HeadContext<'t>, steps: usize, rng: &mut Rng, p: &Binding<'t>) -> Result<Tensor> {
        let tape = ctx_tape(ctx, p)?;
        let eps = rng.normal_tensor(&[self.config.horizon, self.config.action_dim], 1.0);
        euler_sample(eps, steps, |a, t| {
            Ok(self.predict_velocity(&tape.constant(a.clone()), t, ctx, p)?.value())
        })
    }
}

fn ctx_tape<'t>(ctx: &HeadContext<'t>, p: &Binding<'t>) -> Result<&'t Tape> {
    ctx.memories
        .first()
        .map(|m| m.k.tape())
        .or_else(|| p.vars().first().map(|v| v.tape()))
        .ok_or_else(|| Error::Contract("action head has no parameters bound".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_features_are_bounded() {
        for t in [0.0, 0.3, 1.0] {
            let f = time_features(t, 16);
            assert_eq!(f.shape(), &[1, 16]);
            assert!(f.data().iter().all(|v| v.abs() <= 1.0));
        }
        assert_eq!(time_features(0.0, 4).data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn noise_rejects_bad_time() {
        let a = Tensor::zeros(&[2, 2]);
        assert!(noise_chunk(&a, 1.5, &a).is_err());
        assert!(noise_chunk(&a, -0.1, &a).is_err());
        assert!(noise_chunk(&a, 0.5, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(euler_sample(Tensor::zeros(&[1, 1]), 0, |a, _| Ok(a.clone())).is_err());
    }
}
