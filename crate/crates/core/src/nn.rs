//! Parameter registry and the transformer building blocks shared by the
//! branches: linear maps, layer norm, multi-head attention, pre-norm
//! encoder and decoder blocks.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::{Float, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Every trainable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        self.entries.push(ParamEntry {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all registered tensors.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone(), trainable))
                .collect(),
        }
    }

    /// Adds the gradients of a backward pass into each entry's `grad`.
    /// Gradients persist until [`ParamStore::zero_grad`].
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &mut Gradients<T>) {
        for (entry, &var) in self.entries.iter_mut().zip(&bound.vars) {
            let Some(g) = grads.take(var) else { continue };
            match &mut entry.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }
}

/// Tape variables for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Registers parameters under a dotted name prefix. Each tensor draws its
/// initial values from a stream keyed by its full name.
pub struct ParamBuilder<'s, T> {
    store: &'s mut ParamStore<T>,
    seeds: SeedTree,
    prefix: String,
}

impl<'s, T: Float> ParamBuilder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seeds: SeedTree) -> Self {
        Self {
            store,
            seeds,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.full(name);
        ParamBuilder {
            store: &mut *self.store,
            seeds: self.seeds,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Glorot-uniform matrix in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let full = self.full(name);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = self.seeds.stream(&full);
        let t = Tensor::from_fn(vec![fan_in, fan_out], |_| T::lit(rng.gen_range(-bound..bound)));
        self.store.add(full, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let full = self.full(name);
        self.store.add(full, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let full = self.full(name);
        self.store.add(full, Tensor::ones(shape.to_vec()))
    }
}

/// Forward-pass context: the tape, bound parameters, and the dropout state.
pub struct Ctx<'a, T: Float> {
    pub tape: &'a Tape<T>,
    pub params: &'a Bound,
    pub training: bool,
    pub dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a Bound, training: bool, dropout: f64, rng: ChaCha8Rng) -> Self {
        Self {
            tape,
            params,
            training,
            dropout,
            rng: RefCell::new(rng),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params.var(id)
    }

    pub fn dropout(&self, x: Var) -> Result<Var> {
        self.tape
            .dropout(x, self.dropout, self.training, &mut *self.rng.borrow_mut())
    }
}

/// Anything that owns registered parameters.
pub trait Module {
    fn collect_params(&self, out: &mut Vec<ParamId>);

    fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }
}

impl<M: Module> Module for Option<M> {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        if let Some(m) = self {
            m.collect_params(out);
        }
    }
}

impl<M: Module> Module for Vec<M> {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        for m in self {
            m.collect_params(out);
        }
    }
}

/// `y = x W (+ b)` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut s = pb.scope(name);
        let w = s.weight("weight", in_dim, out_dim)?;
        let b = if bias { Some(s.zeros("bias", &[out_dim])?) } else { None };
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// Linear map whose weight starts at zero. Used for the last
    /// projection of every residual branch so each block starts as the
    /// identity.
    pub fn zero_init<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        let w = s.zeros("weight", &[in_dim, out_dim])?;
        let b = Some(s.zeros("bias", &[out_dim])?);
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.w))?;
        match self.b {
            Some(b) => ctx.tape.add(y, ctx.p(b)),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.push(self.w);
        out.extend(self.b);
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            gain: s.ones("gain", &[dim])?,
            bias: s.zeros("bias", &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let axis = ctx.tape.shape(x).len() - 1;
        ctx.tape
            .layer_norm(x, axis, ctx.p(self.gain), ctx.p(self.bias), self.eps)
    }
}

impl Module for LayerNorm {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.extend([self.gain, self.bias]);
    }
}

/// Multi-head scaled dot-product attention over `[B, T, D]` sequences.
/// Dropout is applied to the attention weights.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        let mut s = pb.scope(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", dim, dim, true)?,
            k: Linear::new(&mut s, "k", dim, dim, true)?,
            v: Linear::new(&mut s, "v", dim, dim, true)?,
            o: Linear::zero_init(&mut s, "o", dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, query: Var, key: Var, value: Var) -> Result<Var> {
        let t = ctx.tape;
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, key)?;
        let v = self.v.forward(ctx, value)?;
        let qs = t.shape(q);
        if qs.len() != 3 {
            return Err(Error::shape("multi-head attention", &qs, &[]));
        }
        let (b, tq) = (qs[0], qs[1]);
        let ctxv = if self.heads == 1 {
            let w = t.attention_weights(q, k)?;
            let w = ctx.dropout(w)?;
            t.attend(w, v)?
        } else {
            let q = self.split(ctx, q)?;
            let k = self.split(ctx, k)?;
            let v = self.split(ctx, v)?;
            let w = t.attention_weights(q, k)?;
            let w = ctx.dropout(w)?;
            let y = t.attend(w, v)?;
            let y = t.swap_axes(y, 1, 2)?;
            t.reshape(y, &[b, tq, self.dim])?
        };
        self.o.forward(ctx, ctxv)
    }

    fn split<T: Float>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        let x = ctx
            .tape
            .reshape(x, &[s[0], s[1], self.heads, self.dim / self.heads])?;
        ctx.tape.swap_axes(x, 1, 2)
    }
}

impl Module for MultiHeadAttention {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.collect_params(out);
        }
    }
}

/// Two-layer ReLU MLP with dropout on the hidden activations.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            up: Linear::new(&mut s, "up", dim, hidden, true)?,
            down: Linear::zero_init(&mut s, "down", hidden, dim)?,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let h = ctx.dropout(h)?;
        self.down.forward(ctx, h)
    }
}

impl Module for FeedForward {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.up.collect_params(out);
        self.down.collect_params(out);
    }
}

/// Pre-norm self-attention block:
/// `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            norm_attn: LayerNorm::new(&mut s, "norm_attn", dim)?,
            attn: MultiHeadAttention::new(&mut s, "attn", dim, heads)?,
            norm_ffn: LayerNorm::new(&mut s, "norm_ffn", dim)?,
            ffn: FeedForward::new(&mut s, "ffn", dim, ffn_hidden)?,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm_attn.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, h, h)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.norm_ffn.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, h)?;
        ctx.tape.add(x, f)
    }
}

impl Module for EncoderBlock {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.norm_attn.collect_params(out);
        self.attn.collect_params(out);
        self.norm_ffn.collect_params(out);
        self.ffn.collect_params(out);
    }
}

/// Stack of [`EncoderBlock`]s.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(&mut s, &format!("block{i}"), dim, heads, ffn_hidden))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        Ok(x)
    }
}

impl Module for Encoder {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.blocks.collect_params(out);
    }
}

/// Pre-norm decoder block: self-attention, cross-attention to `memory`,
/// feed-forward, each wrapped in a residual skip.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            norm_self: LayerNorm::new(&mut s, "norm_self", dim)?,
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", dim, heads)?,
            norm_cross: LayerNorm::new(&mut s, "norm_cross", dim)?,
            cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", dim, heads)?,
            norm_ffn: LayerNorm::new(&mut s, "norm_ffn", dim)?,
            ffn: FeedForward::new(&mut s, "ffn", dim, ffn_hidden)?,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<'_, T>, x: Var, memory: Var) -> Result<Var> {
        let t = ctx.tape;
        let h = self.norm_self.forward(ctx, x)?;
        let a = self.self_attn.forward(ctx, h, h, h)?;
        let x = t.add(x, a)?;
        let h = self.norm_cross.forward(ctx, x)?;
        let a = self.cross_attn.forward(ctx, h, memory, memory)?;
        let x = t.add(x, a)?;
        let h = self.norm_ffn.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, h)?;
        t.add(x, f)
    }
}

impl Module for DecoderBlock {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.norm_self.collect_params(out);
        self.self_attn.collect_params(out);
        self.norm_cross.collect_params(out);
        self.cross_attn.collect_params(out);
        self.norm_ffn.collect_params(out);
        self.ffn.collect_params(out);
    }
}
