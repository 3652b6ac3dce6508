//! Horizon-aware gating, multi-head cross-modal alignment and the channel
//! residual.
//!
//! Everything here works in token layout `[B, N, C]` (variables as the
//! sequence axis). The channel-major `[B, C, N]` view used in reports is one
//! [`Tape::transpose`](crate::Tape::transpose) away.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, Module, ParamBuilder, ParamId};
use crate::tensor::{Float, Tensor, Var};

/// Width of the head-gate hidden layer.
pub const HEAD_GATE_HIDDEN: usize = 128;

/// `a ⊙ x + (1 - a) ⊙ y` for an `a` that broadcasts against `x` and `y`.
fn convex<T: Float>(ctx: &Ctx<'_, T>, a: Var, x: Var, y: Var) -> Result<Var> {
    let t = ctx.tape;
    let one_minus = t.add_scalar(t.scale(a, -1.0), 1.0);
    let lhs = t.mul(x, a)?;
    let rhs = t.mul(y, one_minus)?;
    t.add(lhs, rhs)
}

/// Channel gate driven by the pooled time features and the horizon.
#[derive(Clone, Debug)]
pub struct HorizonGate {
    pub hidden: Linear,
    pub out: Linear,
    pub horizon_norm: f64,
}

impl HorizonGate {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channel: usize, hidden: usize, horizon_norm: f64) -> Result<Self> {
        let mut s = pb.scope("gate");
        Ok(Self {
            hidden: Linear::new(&mut s, "hidden", channel + 1, hidden, true)?,
            out: Linear::new(&mut s, "out", hidden, channel, true)?,
            horizon_norm,
        })
    }

    /// Gate values `g: [B, C]` in (0, 1).
    pub fn gate<T: Float>(&self, ctx: &Ctx<'_, T>, z_t: Var, pred_len: usize) -> Result<Var> {
        let t = ctx.tape;
        if pred_len == 0 {
            return Err(Error::Config("prediction length must be at least 1".into()));
        }
        let b = t.shape(z_t)[0];
        let pooled = t.mean(z_t, 1)?;
        let h = t.constant(Tensor::full(vec![b, 1], T::lit(pred_len as f64 / self.horizon_norm)));
        let g_in = t.concat(&[pooled, h], 1)?;
        let hidden = t.relu(self.hidden.forward(ctx, g_in)?);
        Ok(t.sigmoid(self.out.forward(ctx, hidden)?))
    }

    /// `g ⊙ F̃ + (1 - g) ⊙ Z̃_t` with `g: [B, C]` shared by all variables.
    pub fn combine<T: Float>(&self, ctx: &Ctx<'_, T>, g: Var, f: Var, z_t: Var) -> Result<Var> {
        let t = ctx.tape;
        let fs = t.shape(f);
        let zs = t.shape(z_t);
        if fs != zs || fs.len() != 3 {
            return Err(Error::shape("horizon_gate", &fs, &zs));
        }
        let g = t.reshape(g, &[fs[0], 1, fs[2]])?;
        let g = t.expand(g, &fs)?;
        convex(ctx, g, f, z_t)
    }

    /// Returns `(g, Z_g)` with `Z_g: [B, N, C]`.
    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, f: Var, z_t: Var, pred_len: usize) -> Result<(Var, Var)> {
        let g = self.gate(ctx, z_t, pred_len)?;
        let z_g = self.combine(ctx, g, f, z_t)?;
        Ok((g, z_g))
    }
}

impl Module for HorizonGate {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.hidden.collect_params(out);
        self.out.collect_params(out);
    }
}

/// One cross-attention head: queries from the fused series tokens, keys and
/// values from the prompt tokens. Each head attends at full width `C`.
#[derive(Clone, Debug)]
pub struct CmaHead {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl CmaHead {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, channel: usize, prompt_dim: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            query: Linear::new(&mut s, "query", channel, channel, true)?,
            key: Linear::new(&mut s, "key", prompt_dim, channel, true)?,
            value: Linear::new(&mut s, "value", prompt_dim, channel, true)?,
        })
    }

    /// `z_g: [B, N, C]`, `z_llm: [B, N, E_p]` to `[B, N, C]`.
    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, z_g: Var, z_llm: Var) -> Result<Var> {
        let t = ctx.tape;
        let gs = t.shape(z_g);
        let ls = t.shape(z_llm);
        if gs.len() != 3 || ls.len() != 3 || gs[..2] != ls[..2] {
            return Err(Error::shape("cma_head_attend", &gs, &ls));
        }
        let q = self.query.forward(ctx, z_g)?;
        let k = self.key.forward(ctx, z_llm)?;
        let v = self.value.forward(ctx, z_llm)?;
        t.scaled_dot_attention(q, k, v)
    }
}

impl Module for CmaHead {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.query.collect_params(out);
        self.key.collect_params(out);
        self.value.collect_params(out);
    }
}

/// Softmax gate over heads, computed per (sample, variable) from the
/// concatenated head outputs.
#[derive(Clone, Debug)]
pub struct HeadFusion {
    pub hidden: Linear,
    pub norm: LayerNorm,
    pub score: Linear,
    pub heads: usize,
    pub channel: usize,
}

impl HeadFusion {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, heads: usize, channel: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("head fusion needs at least one head".into()));
        }
        let mut s = pb.scope("head_gate");
        Ok(Self {
            hidden: Linear::new(&mut s, "hidden", heads * channel, HEAD_GATE_HIDDEN, false)?,
            norm: LayerNorm::new(&mut s, "norm", HEAD_GATE_HIDDEN)?,
            score: Linear::new(&mut s, "score", HEAD_GATE_HIDDEN, heads, false)?,
            heads,
            channel,
        })
    }

    /// Head weights `π: [B, N, H]` for the concatenated outputs `U: [B, N, H·C]`.
    pub fn weights<T: Float>(&self, ctx: &Ctx<'_, T>, u: Var) -> Result<Var> {
        let t = ctx.tape;
        let h = self.hidden.forward(ctx, u)?;
        let h = t.relu(self.norm.forward(ctx, h)?);
        let e = self.score.forward(ctx, h)?;
        t.softmax(e, 2)
    }

    /// Returns `(Λ, π)` with `Λ: [B, N, C]`.
    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, heads: &[Var]) -> Result<(Var, Var)> {
        let t = ctx.tape;
        let Some(&first) = heads.first() else {
            return Err(Error::Contract("adaptive head fusion needs at least one head".into()));
        };
        if heads.len() != self.heads {
            return Err(Error::Contract(format!(
                "head fusion built for {} heads, got {}",
                self.heads,
                heads.len()
            )));
        }
        let s = t.shape(first);
        for &h in heads {
            if t.shape(h) != s {
                return Err(Error::shape("adaptive_head_fusion", &s, &t.shape(h)));
            }
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let u = t.concat(heads, 2)?;
        let pi = self.weights(ctx, u)?;
        let stacked = t.reshape(u, &[b, n, self.heads, c])?;
        let p = t.reshape(pi, &[b, n, 1, self.heads])?;
        let lambda = t.matmul(p, stacked)?;
        let lambda = t.reshape(lambda, &[b, n, c])?;
        Ok((lambda, pi))
    }
}

impl Module for HeadFusion {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.hidden.collect_params(out);
        self.norm.collect_params(out);
        self.score.collect_params(out);
    }
}

/// `Θ = γ ⊙ Λ + (1 - γ) ⊙ Z_g` with `γ = σ(gamma_raw)` per channel.
#[derive(Clone, Debug)]
pub struct ChannelResidual {
    pub gamma_raw: ParamId,
}

impl ChannelResidual {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channel: usize) -> Result<Self> {
        let mut s = pb.scope("residual");
        Ok(Self {
            gamma_raw: s.zeros("gamma_raw", &[channel])?,
        })
    }

    pub fn gamma<T: Float>(&self, ctx: &Ctx<'_, T>) -> Var {
        ctx.tape.sigmoid(ctx.p(self.gamma_raw))
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, lambda: Var, z_g: Var) -> Result<Var> {
        let t = ctx.tape;
        let ls = t.shape(lambda);
        let zs = t.shape(z_g);
        if ls != zs {
            return Err(Error::shape("channel_residual", &ls, &zs));
        }
        let gamma = self.gamma(ctx);
        convex(ctx, gamma, lambda, z_g)
    }
}

impl Module for ChannelResidual {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.push(self.gamma_raw);
    }
}

/// The fusion stack: gate, heads, head gate and residual, each optional per
/// the ablation switches.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub gate: Option<HorizonGate>,
    pub heads: Vec<CmaHead>,
    pub head_fusion: Option<HeadFusion>,
    pub residual: Option<ChannelResidual>,
}

impl Fusion {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = pb.scope("fusion");
        let ab = cfg.ablation;
        let gate = if ab.use_frequency && ab.use_gating {
            Some(HorizonGate::new(&mut s, cfg.channel, cfg.gate_hidden, cfg.horizon_norm)?)
        } else {
            None
        };
        let h = cfg.effective_cma_heads();
        let heads = (0..h)
            .map(|i| CmaHead::new(&mut s, &format!("cma{i}"), cfg.channel, cfg.prompt_dim))
            .collect::<Result<Vec<_>>>()?;
        let head_fusion = if ab.use_multihead_cma {
            Some(HeadFusion::new(&mut s, h, cfg.channel)?)
        } else {
            None
        };
        let residual = if ab.use_residual {
            Some(ChannelResidual::new(&mut s, cfg.channel)?)
        } else {
            None
        };
        Ok(Self {
            gate,
            heads,
            head_fusion,
            residual,
        })
    }
}

impl Module for Fusion {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.gate.collect_params(out);
        self.heads.collect_params(out);
        self.head_fusion.collect_params(out);
        self.residual.collect_params(out);
    }
}
