//! Full forecaster: spectral, time and prompt branches, fusion, decoder and
//! the linear forecast head.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::{PromptEncoder, TimeEncoder};
use crate::error::{Error, Result, StageContext};
use crate::fusion::Fusion;
use crate::nn::{Bound, Ctx, DecoderBlock, Linear, Module, ParamBuilder, ParamId, ParamStore};
use crate::rng::SeedTree;
use crate::spectral::{rfft_magnitude, FrequencyBranch, FrequencyTrace, SpectralConfig};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Parameter-free description of the network: which modules exist and where
/// their tensors live in the registry.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub frequency: Option<FrequencyBranch>,
    pub time: TimeEncoder,
    pub prompt: PromptEncoder,
    pub fusion: Fusion,
    pub decoder: Vec<DecoderBlock>,
    pub head: Linear,
}

/// Every intermediate of one forward pass, in token layout `[B, N, ·]`
/// unless noted.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub frequency: Option<FrequencyTrace>,
    /// `X W_t`
    pub time_tokens: Var,
    pub z_t: Var,
    pub prompt: Var,
    /// gate values `[B, C]`, absent when the gate is bypassed
    pub gate: Option<Var>,
    pub z_g: Var,
    pub heads: Vec<Var>,
    /// head weights `[B, N, H]`
    pub head_weights: Option<Var>,
    pub lambda: Var,
    pub theta: Var,
    pub decoded: Var,
    /// forecast `[B, L_p, N]`
    pub output: Var,
}

impl Architecture {
    pub fn build<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(store, SeedTree::new(cfg.seed).child("init"));
        let frequency = if cfg.ablation.use_frequency {
            Some(FrequencyBranch::new(&mut pb, SpectralConfig::from(cfg))?)
        } else {
            None
        };
        let time = TimeEncoder::new(&mut pb, cfg)?;
        let prompt = PromptEncoder::new(&mut pb, cfg)?;
        let fusion = Fusion::new(&mut pb, cfg)?;
        let decoder = {
            let mut s = pb.scope("decoder");
            (0..cfg.decoder_layers)
                .map(|i| DecoderBlock::new(&mut s, &format!("block{i}"), cfg.channel, cfg.attn_heads, cfg.ffn_hidden))
                .collect::<Result<Vec<_>>>()?
        };
        let head = Linear::new(&mut pb, "head", cfg.channel, cfg.pred_len, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            frequency,
            time,
            prompt,
            fusion,
            decoder,
            head,
        })
    }

    /// Spectral branch output `F̃: [B, N, C]`, or `None` when ablated.
    pub fn frequency_features<T: Float>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Option<FrequencyTrace>> {
        let Some(branch) = &self.frequency else {
            return Ok(None);
        };
        let spec = rfft_magnitude(x).stage("frequency")?;
        branch.forward(ctx, &spec).stage("frequency").map(Some)
    }

    /// `(X W_t, Z̃_t)`.
    pub fn time_features<T: Float>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        self.time.forward(ctx, x).stage("time")
    }

    /// Encoded prompt tokens `[B, N, E_p]`.
    pub fn prompt_features<T: Float>(&self, ctx: &Ctx<'_, T>, emb: Var) -> Result<Var> {
        self.prompt.encode_tokens(ctx, emb).stage("prompt")
    }

    /// `(g, Z_g)`. Without the spectral branch `Z_g = Z̃_t`; without the
    /// gate the two branches are mixed in equal parts.
    pub fn gated<T: Float>(&self, ctx: &Ctx<'_, T>, f: Option<Var>, z_t: Var) -> Result<(Option<Var>, Var)> {
        let t = ctx.tape;
        let Some(f) = f else {
            return Ok((None, z_t));
        };
        match &self.fusion.gate {
            Some(gate) => {
                let (g, z_g) = gate.forward(ctx, f, z_t, self.cfg.pred_len).stage("gate")?;
                Ok((Some(g), z_g))
            }
            None => {
                let sum = t.add(f, z_t).stage("gate")?;
                Ok((None, t.scale(sum, 0.5)))
            }
        }
    }

    /// Cross-modal alignment: `(heads, Λ, π)`.
    pub fn align<T: Float>(&self, ctx: &Ctx<'_, T>, z_g: Var, prompt: Var) -> Result<(Vec<Var>, Var, Option<Var>)> {
        let heads = self
            .fusion
            .heads
            .iter()
            .map(|h| h.forward(ctx, z_g, prompt).and_then(|o| ctx.dropout(o)))
            .collect::<Result<Vec<_>>>()
            .stage("cma")?;
        match &self.fusion.head_fusion {
            Some(hf) => {
                let (lambda, pi) = hf.forward(ctx, &heads).stage("head_fusion")?;
                Ok((heads, lambda, Some(pi)))
            }
            None => {
                let lambda = heads[0];
                Ok((heads, lambda, None))
            }
        }
    }

    /// `Θ`; equal to `Λ` when the residual is ablated.
    pub fn residual<T: Float>(&self, ctx: &Ctx<'_, T>, lambda: Var, z_g: Var) -> Result<Var> {
        match &self.fusion.residual {
            Some(r) => r.forward(ctx, lambda, z_g).stage("residual"),
            None => Ok(lambda),
        }
    }

    /// Decoder stack with `Θ` as both input and memory, then the forecast
    /// head. Returns `(Z_d, Ŷ: [B, L_p, N])`.
    pub fn decode<T: Float>(&self, ctx: &Ctx<'_, T>, theta: Var) -> Result<(Var, Var)> {
        let t = ctx.tape;
        let mut x = theta;
        for block in &self.decoder {
            x = block.forward(ctx, x, theta).stage("decoder")?;
        }
        let y = self.head.forward(ctx, x).stage("head")?;
        let y = t.transpose(y).stage("head")?;
        Ok((x, y))
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>, emb: &Tensor<T>) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        let (xs, es) = (x.shape(), emb.shape());
        if xs.len() != 3 || xs[1] != cfg.num_vars || xs[2] != cfg.seq_len {
            return Err(Error::shape("input", xs, &[cfg.num_vars, cfg.seq_len])).stage("input");
        }
        if es.len() != 3 || es[0] != xs[0] || es[1] != cfg.num_vars || es[2] != cfg.llm_dim {
            return Err(Error::shape("prompt embeddings", es, &[xs[0], cfg.num_vars, cfg.llm_dim])).stage("input");
        }
        let t = ctx.tape;
        let frequency = self.frequency_features(ctx, x)?;
        let xv = t.constant(x.clone());
        let (time_tokens, z_t) = self.time_features(ctx, xv)?;
        let prompt = self.prompt_features(ctx, t.constant(emb.clone()))?;
        let (gate, z_g) = self.gated(ctx, frequency.map(|f| f.pooled), z_t)?;
        let (heads, lambda, head_weights) = self.align(ctx, z_g, prompt)?;
        let theta = self.residual(ctx, lambda, z_g)?;
        let (decoded, output) = self.decode(ctx, theta)?;
        Ok(ForwardTrace {
            frequency,
            time_tokens,
            z_t,
            prompt,
            gate,
            z_g,
            heads,
            head_weights,
            lambda,
            theta,
            decoded,
            output,
        })
    }
}

impl Module for Architecture {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.frequency.collect_params(out);
        self.time.collect_params(out);
        self.prompt.collect_params(out);
        self.fusion.collect_params(out);
        self.decoder.collect_params(out);
        self.head.collect_params(out);
    }
}

/// Architecture plus its parameter values.
#[derive(Clone, Debug)]
pub struct T3Time<T> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Float> T3Time<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = Architecture::build(cfg, &mut params)?;
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Forward pass on a fresh tape. `rng` drives dropout when `training`.
    pub fn run<'t>(&self, tape: &'t Tape<T>, bound: &'t Bound, x: &Tensor<T>, emb: &Tensor<T>, training: bool, rng: ChaCha8Rng) -> Result<ForwardTrace> {
        let ctx = Ctx::new(tape, bound, training, self.arch.cfg.dropout, rng);
        self.arch.forward(&ctx, x, emb)
    }

    /// Inference: forecast `[B, L_p, N]` with dropout off.
    pub fn predict(&self, x: &Tensor<T>, emb: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let trace = self.run(&tape, &bound, x, emb, false, SeedTree::new(0).stream("eval"))?;
        Ok((*tape.value(trace.output)).clone())
    }

    pub fn cast<U: Float>(&self) -> T3Time<U> {
        T3Time {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;

    fn tiny(ablation: Ablation) -> ModelConfig {
        let mut cfg = ModelConfig::new(8, 4, 2, 4);
        cfg.cma_heads = 2;
        cfg.attn_heads = 2;
        cfg.llm_dim = 6;
        cfg.ffn_hidden = 8;
        cfg.dropout = 0.0;
        cfg.ablation = ablation;
        cfg
    }

    #[test]
    fn residual_ablation_has_no_gamma() {
        let m = T3Time::<f32>::new(&tiny(Ablation { use_residual: false, ..Ablation::FULL })).unwrap();
        assert!(m.params.entries().iter().all(|e| !e.name.contains("gamma")));
        let full = T3Time::<f32>::new(&tiny(Ablation::FULL)).unwrap();
        assert!(full.params.find("fusion.residual.gamma_raw").is_some());
    }

    #[test]
    fn single_head_ablation_drops_head_gate() {
        let m = T3Time::<f32>::new(&tiny(Ablation { use_multihead_cma: false, ..Ablation::FULL })).unwrap();
        let names: Vec<_> = m.params.entries().iter().map(|e| e.name.clone()).collect();
        assert!(names.iter().all(|n| !n.contains("head_gate")));
        assert!(names.iter().any(|n| n.starts_with("fusion.cma0.")));
        assert!(names.iter().all(|n| !n.starts_with("fusion.cma1.")));
    }

    #[test]
    fn registry_matches_module_traversal() {
        let m = T3Time::<f32>::new(&tiny(Ablation::FULL)).unwrap();
        let mut ids = m.arch.params();
        assert_eq!(ids.len(), m.params.len());
        ids.sort_by_key(|id| id.index());
        ids.dedup();
        assert_eq!(ids.len(), m.params.len());
        let brute: usize = ids.iter().map(|&id| m.params.get(id).numel()).sum();
        assert_eq!(brute, m.parameter_count());
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let m = T3Time::<f32>::new(&tiny(Ablation::FULL)).unwrap();
        let x = Tensor::zeros(vec![1, 2, 8]);
        let bad_emb = Tensor::zeros(vec![1, 2, 5]);
        let err = m.predict(&x, &bad_emb).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "input", .. }), "{err}");
        let err = m.predict(&Tensor::zeros(vec![1, 2, 7]), &Tensor::zeros(vec![1, 2, 6])).unwrap_err();
        assert!(err.to_string().starts_with("input"), "{err}");
    }

    #[test]
    fn output_shape() {
        let m = T3Time::<f32>::new(&tiny(Ablation::FULL)).unwrap();
        let y = m.predict(&Tensor::zeros(vec![3, 2, 8]), &Tensor::zeros(vec![3, 2, 6])).unwrap();
        assert_eq!(y.shape(), &[3, 4, 2]);
    }
}
