//! Time-series branch and the prompt-embedding consumer.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Encoder, Linear, Module, ParamBuilder, ParamId};
use crate::rng::SeedTree;
use crate::tensor::{Float, Tensor, Var};

/// Linear embedding of each variable's window followed by pre-norm
/// self-attention across variables.
#[derive(Clone, Debug)]
pub struct TimeEncoder {
    /// `[L, C]`, shared across variables
    pub proj: ParamId,
    /// optional learned `[N, C]` embedding of variable position
    pub position: Option<ParamId>,
    pub encoder: Encoder,
    pub seq_len: usize,
}

impl TimeEncoder {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = pb.scope("time");
        let proj = s.weight("proj", cfg.seq_len, cfg.channel)?;
        let position = if cfg.variable_positional {
            Some(s.weight("position", cfg.num_vars, cfg.channel)?)
        } else {
            None
        };
        let encoder = Encoder::new(
            &mut s,
            "encoder",
            cfg.encoder_layers,
            cfg.channel,
            cfg.attn_heads,
            cfg.ffn_hidden,
        )?;
        Ok(Self {
            proj,
            position,
            encoder,
            seq_len: cfg.seq_len,
        })
    }

    /// Returns the projected tokens `X W_t` and the encoded `[B, N, C]`.
    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let t = ctx.tape;
        let xs = t.shape(x);
        if xs.len() != 3 || xs[2] != self.seq_len {
            return Err(Error::shape("time_encode", &xs, &[self.seq_len]));
        }
        let z = t.matmul(x, ctx.p(self.proj))?;
        let mut h = z;
        if let Some(pos) = self.position {
            h = t.add(h, ctx.p(pos))?;
        }
        let encoded = self.encoder.forward(ctx, h)?;
        Ok((z, encoded))
    }
}

impl Module for TimeEncoder {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.push(self.proj);
        out.extend(self.position);
        self.encoder.collect_params(out);
    }
}

/// Projection of frozen language-model embeddings plus an encoder over the
/// variable tokens.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub proj: Linear,
    pub encoder: Encoder,
    pub llm_dim: usize,
}

impl PromptEncoder {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = pb.scope("prompt");
        Ok(Self {
            proj: Linear::new(&mut s, "proj", cfg.llm_dim, cfg.prompt_dim, true)?,
            encoder: Encoder::new(
                &mut s,
                "encoder",
                cfg.encoder_layers,
                cfg.prompt_dim,
                cfg.attn_heads,
                cfg.ffn_hidden,
            )?,
            llm_dim: cfg.llm_dim,
        })
    }

    /// Token layout: `[B, N, d_LLM] -> [B, N, E_p]`.
    pub fn encode_tokens<T: Float>(&self, ctx: &Ctx<'_, T>, emb: Var) -> Result<Var> {
        let es = ctx.tape.shape(emb);
        if es.len() != 3 || es[2] != self.llm_dim {
            return Err(Error::shape("prompt_encode", &es, &[self.llm_dim]));
        }
        let h = self.proj.forward(ctx, emb)?;
        self.encoder.forward(ctx, h)
    }

    /// `[B, N, d_LLM] -> [B, E_p, N]`.
    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, emb: Var) -> Result<Var> {
        let h = self.encode_tokens(ctx, emb)?;
        ctx.tape.transpose(h)
    }
}

impl Module for PromptEncoder {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.proj.collect_params(out);
        self.encoder.collect_params(out);
    }
}

const STUB_SEED: u64 = 0x7433_5354_5542;
const VALUE_FEATURES: usize = 5;
const MARKER_ROWS: usize = 2;

/// Deterministic stand-in for language-model prompt embeddings.
///
/// Each variable's window is summarized by (first, last, min, max,
/// last - first), optionally followed by the calendar markers of the first
/// and last step, and mapped through a fixed random affine map. The map
/// depends only on the output width and marker width, never on a run seed.
#[derive(Clone, Debug)]
pub struct StubEmbedder {
    dim: usize,
    marker_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl StubEmbedder {
    pub fn new(dim: usize, marker_dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("stub embedding width must be positive".into()));
        }
        let features = VALUE_FEATURES + MARKER_ROWS * marker_dim;
        let mut rng = SeedTree::new(STUB_SEED).stream(&format!("stub/{dim}/{marker_dim}"));
        let scale = 1.0 / (features as f64).sqrt();
        let weights = (0..features * dim).map(|_| rng.gen_range(-scale..scale)).collect();
        let bias = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(Self {
            dim,
            marker_dim,
            weights,
            bias,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Bias row of the affine map: the embedding of an all-zero window
    /// without markers.
    pub fn reference(&self) -> &[f64] {
        &self.bias
    }

    /// Embeds `window: [N, L]` into `[N, dim]`. `markers`, when given, is
    /// `[L, marker_dim]`.
    pub fn embed(&self, window: &Tensor<f64>, markers: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
        let &[n, l] = window.shape() else {
            return Err(Error::shape("stub_embed", window.shape(), &[]));
        };
        if l == 0 {
            return Err(Error::shape("stub_embed", window.shape(), &[]));
        }
        let mut marker_feats = vec![0.0; MARKER_ROWS * self.marker_dim];
        if let Some(m) = markers {
            if m.shape() != [l, self.marker_dim] {
                return Err(Error::shape("stub_embed markers", m.shape(), &[l, self.marker_dim]));
            }
            let d = self.marker_dim;
            marker_feats[..d].copy_from_slice(&m.data()[..d]);
            marker_feats[d..].copy_from_slice(&m.data()[(l - 1) * d..]);
        }
        let mut out = Vec::with_capacity(n * self.dim);
        let mut feats = Vec::with_capacity(VALUE_FEATURES + marker_feats.len());
        for row in window.data().chunks(l) {
            let first = row[0];
            let last = row[l - 1];
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            feats.clear();
            feats.extend([first, last, min, max, last - first]);
            feats.extend_from_slice(&marker_feats);
            for j in 0..self.dim {
                let mut acc = self.bias[j];
                for (f, &v) in feats.iter().enumerate() {
                    acc += v * self.weights[f * self.dim + j];
                }
                out.push(acc);
            }
        }
        Tensor::new(vec![n, self.dim], out)
    }
}

/// One-shot form of [`StubEmbedder::embed`].
pub fn stub_embed(window: &Tensor<f64>, markers: Option<&Tensor<f64>>, dim: usize) -> Result<Tensor<f64>> {
    let marker_dim = markers.map_or(0, |m| m.shape().get(1).copied().unwrap_or(0));
    StubEmbedder::new(dim, marker_dim)?.embed(window, markers)
}
