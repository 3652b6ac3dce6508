//! Frequency encoding branch.
//!
//! Each variable's lookback window is turned into its real-FFT magnitude
//! spectrum. Every bin becomes a token: a scalar lifted to `C` channels by a
//! learned projection and ReLU, mixed by one pre-norm self-attention block
//! over the bin axis, and summarized by a learned softmax pooling over bins.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fft::RealFft;
use crate::nn::{Ctx, EncoderBlock, Linear, Module, ParamBuilder, ParamId};
use crate::tensor::{Float, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralConfig {
    pub lookback: usize,
    pub channel: usize,
    pub encoder_heads: usize,
    pub ffn_hidden: usize,
    pub pool_hidden: usize,
    pub dropout: f64,
}

impl SpectralConfig {
    pub fn bins(&self) -> usize {
        self.lookback / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback < 2 {
            return Err(Error::Config(format!("lookback {} < 2", self.lookback)));
        }
        if self.encoder_heads == 0 || !self.channel.is_multiple_of(self.encoder_heads) {
            return Err(Error::Config(format!(
                "channel {} not divisible by {} heads",
                self.channel, self.encoder_heads
            )));
        }
        Ok(())
    }
}

impl From<&ModelConfig> for SpectralConfig {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            lookback: cfg.seq_len,
            channel: cfg.channel,
            encoder_heads: cfg.attn_heads,
            ffn_hidden: cfg.ffn_hidden,
            pool_hidden: cfg.pool_hidden,
            dropout: cfg.dropout,
        }
    }
}

/// Magnitude spectra of a `[B, N, L]` batch, one row per (sample, variable).
#[derive(Clone, Debug)]
pub struct SpectrumBatch<T> {
    /// `[B*N, ⌊L/2⌋+1]`, all entries non-negative
    pub magnitudes: Tensor<T>,
    pub batch: usize,
    pub vars: usize,
}

/// Raw (unscaled) real-FFT magnitudes along the last axis of `x: [B, N, L]`.
pub fn rfft_magnitude<T: Float>(x: &Tensor<T>) -> Result<SpectrumBatch<T>> {
    let &[b, n, l] = x.shape() else {
        return Err(Error::shape("rfft_magnitude", x.shape(), &[]));
    };
    let fft = RealFft::new(l)?;
    let bins = fft.bins();
    let mut out = Vec::with_capacity(b * n * bins);
    let mut row = vec![0.0f64; l];
    for chunk in x.data().chunks(l) {
        for (r, v) in row.iter_mut().zip(chunk) {
            *r = v.as_f64();
        }
        out.extend(fft.magnitudes(&row).into_iter().map(T::lit));
    }
    Ok(SpectrumBatch {
        magnitudes: Tensor::new(vec![b * n, bins], out)?,
        batch: b,
        vars: n,
    })
}

/// Softmax-weighted pooling over frequency tokens.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub hidden: Linear,
    pub score: Linear,
}

impl AttentionPool {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channel: usize, hidden: usize) -> Result<Self> {
        let mut s = pb.scope("pool");
        Ok(Self {
            hidden: Linear::new(&mut s, "hidden", channel, hidden, false)?,
            score: Linear::new(&mut s, "score", hidden, 1, false)?,
        })
    }

    /// Pooling weights `[R, L_f]` for tokens `zf: [R, L_f, C]`; each row is a
    /// probability vector.
    pub fn weights<T: Float>(&self, ctx: &Ctx<'_, T>, zf: Var) -> Result<Var> {
        let t = ctx.tape;
        let s = t.shape(zf);
        let h = self.hidden.forward(ctx, zf)?;
        let h = t.relu(h);
        let logits = self.score.forward(ctx, h)?;
        let logits = t.reshape(logits, &[s[0], s[1]])?;
        t.softmax(logits, 1)
    }

    /// Returns the pooled `[R, C]` features and the weights.
    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, zf: Var) -> Result<(Var, Var)> {
        let t = ctx.tape;
        let s = t.shape(zf);
        let alpha = self.weights(ctx, zf)?;
        let a = t.reshape(alpha, &[s[0], 1, s[1]])?;
        let pooled = t.matmul(a, zf)?;
        let pooled = t.reshape(pooled, &[s[0], s[2]])?;
        Ok((pooled, alpha))
    }
}

impl Module for AttentionPool {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.hidden.collect_params(out);
        self.score.collect_params(out);
    }
}

/// Intermediate values of the branch, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct FrequencyTrace {
    pub tokens: Var,
    pub encoded: Var,
    pub alpha: Var,
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct FrequencyBranch {
    pub cfg: SpectralConfig,
    /// `[1, C]`: lifts each scalar bin magnitude to a C-dim token
    pub token_proj: ParamId,
    pub encoder: EncoderBlock,
    pub pool: AttentionPool,
}

impl FrequencyBranch {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, cfg: SpectralConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = pb.scope("frequency");
        let token_proj = s.weight("token_proj", 1, cfg.channel)?;
        let encoder = EncoderBlock::new(&mut s, "encoder", cfg.channel, cfg.encoder_heads, cfg.ffn_hidden)?;
        let pool = AttentionPool::new(&mut s, cfg.channel, cfg.pool_hidden)?;
        Ok(Self {
            cfg,
            token_proj,
            encoder,
            pool,
        })
    }

    /// Bin tokens `relu((F / L) W_f)` followed by the encoder block:
    /// `[B*N, L_f] -> [B*N, L_f, C]`.
    pub fn encode<T: Float>(&self, ctx: &Ctx<'_, T>, spec: &SpectrumBatch<T>) -> Result<(Var, Var)> {
        let t = ctx.tape;
        let &[rows, bins] = spec.magnitudes.shape() else {
            return Err(Error::shape("frequency_encode", spec.magnitudes.shape(), &[]));
        };
        if bins != self.cfg.bins() {
            return Err(Error::shape("frequency_encode", spec.magnitudes.shape(), &[rows, self.cfg.bins()]));
        }
        // amplitude scaling keeps token magnitudes independent of L
        let scale = T::lit(1.0 / self.cfg.lookback as f64);
        let f = t.constant(spec.magnitudes.map(|v| v * scale).reshape(vec![rows, bins, 1])?);
        let tokens = t.matmul(f, ctx.p(self.token_proj))?;
        let tokens = t.relu(tokens);
        let encoded = self.encoder.forward(ctx, tokens)?;
        Ok((tokens, encoded))
    }

    /// Full branch: spectrum to pooled `[B, N, C]` features.
    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, spec: &SpectrumBatch<T>) -> Result<FrequencyTrace> {
        let (tokens, encoded) = self.encode(ctx, spec)?;
        let (pooled, alpha) = self.pool.forward(ctx, encoded)?;
        let pooled = ctx
            .tape
            .reshape(pooled, &[spec.batch, spec.vars, self.cfg.channel])?;
        Ok(FrequencyTrace {
            tokens,
            encoded,
            alpha,
            pooled,
        })
    }
}

impl Module for FrequencyBranch {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.push(self.token_proj);
        self.encoder.collect_params(out);
        self.pool.collect_params(out);
    }
}
