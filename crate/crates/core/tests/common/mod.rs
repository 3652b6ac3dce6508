#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t3time::config::{Ablation, ModelConfig};
use t3time::gradcheck::{finite_diff_check, GradCheckReport};
use t3time::metrics::mse_loss;
use t3time::model::T3Time;
use t3time::nn::{Bound, Ctx, ParamStore};
use t3time::{Result, Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-2.0..2.0))
}

/// Random values bounded away from zero, for inputs of kinked functions.
pub fn random_off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(0.1..2.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn eval_ctx<'a>(tape: &'a Tape<f64>, bound: &'a Bound) -> Ctx<'a, f64> {
    Ctx::new(tape, bound, false, 0.0, rng(0))
}

/// B=1, N=2, L=8, C=4, H=2, L_p=4 with small hidden widths.
pub fn tiny_config(ablation: Ablation) -> ModelConfig {
    let mut cfg = ModelConfig::new(8, 4, 2, 4);
    cfg.cma_heads = 2;
    cfg.attn_heads = 2;
    cfg.llm_dim = 6;
    cfg.ffn_hidden = 8;
    cfg.pool_hidden = 4;
    cfg.gate_hidden = 4;
    cfg.dropout = 0.0;
    cfg.ablation = ablation;
    cfg
}

/// Overwrites every parameter with uniform values in `±scale`.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for e in store.entries_mut() {
        for v in e.value.data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

/// `|X_k|` for `k = 0..=L/2` by the O(L²) definition.
pub fn naive_dft_magnitudes(x: &[f64]) -> Vec<f64> {
    let l = x.len();
    (0..=l / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * t % l) as f64 / l as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            re.hypot(im)
        })
        .collect()
}

/// Finite-difference check of the training loss with respect to every
/// parameter of a randomly initialized model.
pub fn model_gradcheck(cfg: &ModelConfig, seed: u64) -> Result<(GradCheckReport, ParamStore<f64>)> {
    let mut model = T3Time::<f64>::new(cfg)?;
    // fresh residual branches output zeros, which would hide their gradients
    randomize(&mut model.params, seed, 0.5);
    let x = random(&[1, cfg.num_vars, cfg.seq_len], seed + 1);
    let emb = random(&[1, cfg.num_vars, cfg.llm_dim], seed + 2);
    let target = random(&[1, cfg.pred_len, cfg.num_vars], seed + 3);
    let inputs = model.params.values();
    let arch = &model.arch;
    let loss = |tape: &Tape<f64>, vars: &[t3time::Var]| {
        let bound = Bound::from_vars(vars.to_vec());
        let ctx = eval_ctx(tape, &bound);
        let trace = arch.forward(&ctx, &x, &emb)?;
        let y = tape.constant(target.clone());
        mse_loss(tape, trace.output, y)
    };
    let report = finite_diff_check(loss, &inputs, 1e-6)?;

    // analytic gradients, stored per parameter name
    let tape = Tape::new();
    let bound = model.params.bind(&tape, true);
    let l = loss(&tape, bound.vars())?;
    let mut grads = tape.backward(l)?;
    model.params.accumulate_grads(&bound, &mut grads);
    Ok((report, model.params))
}

/// Loops-only reference for `c = a · b` with `a: m×k`, `b: k×n`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}
