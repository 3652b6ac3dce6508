//! Training loop with early stopping, evaluation, and embedding sources.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::{Normalization, Windows, MARKER_DIM};
use crate::encoders::StubEmbedder;
use crate::error::{Error, Result};
use crate::metrics::{mse_loss, MetricAccumulator};
use crate::model::T3Time;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::SeedTree;
use crate::store::PromptEmbeddingStore;
use crate::tensor::{Float, Tape, Tensor};

/// Where prompt embeddings for a segment come from.
#[derive(Clone, Debug)]
pub enum EmbeddingSource {
    /// Computed on the fly from the raw window and its calendar markers.
    Stub(StubEmbedder),
    /// Read from a store keyed by window id within the segment.
    Store(PromptEmbeddingStore),
}

impl EmbeddingSource {
    pub fn stub(dim: usize) -> Result<Self> {
        Ok(EmbeddingSource::Stub(StubEmbedder::new(dim, MARKER_DIM)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::Stub(s) => s.dim(),
            EmbeddingSource::Store(s) => s.dim(),
        }
    }

    /// Checks that a store covers every window of `windows`.
    pub fn check(&self, windows: &Windows<'_>) -> Result<()> {
        if let EmbeddingSource::Store(s) = self {
            if s.num_vars() != windows.table.num_vars() {
                return Err(Error::Data(format!(
                    "store has {} variables, data has {}",
                    s.num_vars(),
                    windows.table.num_vars()
                )));
            }
            if s.num_windows() < windows.len() {
                return Err(Error::Data(format!(
                    "store holds {} windows, segment needs {}",
                    s.num_windows(),
                    windows.len()
                )));
            }
        }
        Ok(())
    }

    /// `[B, N, d_LLM]` for the given window ids.
    pub fn batch<T: Float>(&self, windows: &Windows<'_>, indices: &[usize]) -> Result<Tensor<T>> {
        match self {
            EmbeddingSource::Store(s) => s.gather(indices),
            EmbeddingSource::Stub(stub) => {
                let n = windows.table.num_vars();
                let mut out = Vec::with_capacity(indices.len() * n * stub.dim());
                for &i in indices {
                    let e = stub.embed(&windows.input(i)?, Some(&windows.markers(i)?))?;
                    out.extend(e.data().iter().map(|&v| T::lit(v)));
                }
                Tensor::new(vec![indices.len(), n, stub.dim()], out)
            }
        }
    }
}

/// One segment ready for the model: windows plus their embeddings.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub windows: Windows<'a>,
    pub embeddings: &'a EmbeddingSource,
}

impl<'a> Segment<'a> {
    pub fn new(windows: Windows<'a>, embeddings: &'a EmbeddingSource) -> Result<Self> {
        embeddings.check(&windows)?;
        Ok(Self { windows, embeddings })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// stop after this many optimizer steps in total
    pub max_steps: Option<usize>,
    /// epochs without validation improvement before stopping; `None` disables
    pub patience: Option<usize>,
    pub seed: u64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 32,
            max_epochs: 10,
            max_steps: None,
            patience: Some(10),
            seed: 1,
            eval_batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    /// loss of every optimizer step, in order
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub stopped_early: bool,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    /// same errors after undoing normalization
    pub mse_raw: f64,
    pub mae_raw: f64,
    pub windows: usize,
}

/// One optimizer step on the given windows; returns the batch loss.
pub fn train_step<T: Float>(
    model: &mut T3Time<T>,
    opt: &mut AdamW<T>,
    seg: &Segment<'_>,
    indices: &[usize],
    norm: &Normalization,
    seeds: &SeedTree,
) -> Result<f64> {
    let batch = seg.windows.batch::<T>(indices, norm)?;
    let emb = seg.embeddings.batch::<T>(&seg.windows, indices)?;
    let tape = Tape::new();
    let bound = model.params.bind(&tape, true);
    let rng = seeds.stream(&format!("dropout/{}", opt.steps()));
    let trace = model.run(&tape, &bound, &batch.x, &emb, true, rng)?;
    let target = tape.constant(batch.y);
    let loss = mse_loss(&tape, trace.output, target)?;
    let value = tape.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::Contract(format!("non-finite training loss at step {}", opt.steps())));
    }
    let mut grads = tape.backward(loss)?;
    model.params.zero_grad();
    model.params.accumulate_grads(&bound, &mut grads);
    opt.step(&mut model.params)?;
    Ok(value)
}

/// Trains with shuffled mini-batches, tracking validation MSE after every
/// epoch and keeping the best parameters seen. Without a validation
/// segment the final parameters are kept.
pub fn train<T: Float>(
    model: &mut T3Time<T>,
    train_seg: &Segment<'_>,
    val_seg: Option<&Segment<'_>>,
    norm: &Normalization,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let n = train_seg.windows.len();
    if n == 0 {
        return Err(Error::InsufficientData(
            train_seg.windows.warning().unwrap_or_else(|| "no training windows".into()),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let seeds = SeedTree::new(cfg.seed).child("train");
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut out = TrainOutcome {
        losses: Vec::new(),
        epochs: Vec::new(),
        best_epoch: None,
        best_val_mse: None,
        stopped_early: false,
        steps: 0,
        seconds: 0.0,
    };
    let mut best_params = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n).collect();
    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut seeds.stream(&format!("shuffle/{epoch}")));
        let mut epoch_losses = Vec::new();
        let mut budget_hit = false;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| out.steps >= m) {
                budget_hit = true;
                break;
            }
            let loss = train_step(model, &mut opt, train_seg, chunk, norm, &seeds)?;
            out.losses.push(loss);
            epoch_losses.push(loss);
            out.steps += 1;
        }
        if epoch_losses.is_empty() {
            break;
        }
        let val_mse = match val_seg {
            Some(v) => Some(evaluate(model, v, norm, cfg.eval_batch)?.mse),
            None => None,
        };
        out.epochs.push(EpochRecord {
            epoch,
            steps: out.steps,
            train_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
            val_mse,
        });
        if let Some(v) = val_mse {
            if out.best_val_mse.is_none_or(|b| v < b) {
                out.best_val_mse = Some(v);
                out.best_epoch = Some(epoch);
                best_params = Some(model.params.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    out.stopped_early = true;
                    break 'epochs;
                }
            }
        }
        if budget_hit || cfg.max_steps.is_some_and(|m| out.steps >= m) {
            break;
        }
    }
    if let Some(p) = best_params {
        model.params = p;
    }
    model.params.zero_grad();
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// MSE and MAE over every window of a segment, in order, dropout off.
pub fn evaluate<T: Float>(model: &T3Time<T>, seg: &Segment<'_>, norm: &Normalization, batch: usize) -> Result<EvalMetrics> {
    let n = seg.windows.len();
    if n == 0 {
        return Err(Error::InsufficientData(
            seg.windows.warning().unwrap_or_else(|| "no evaluation windows".into()),
        ));
    }
    if seg.windows.pred_len != model.config().pred_len {
        return Err(Error::Checkpoint(format!(
            "model predicts {} steps, evaluation asks for {}",
            model.config().pred_len,
            seg.windows.pred_len
        )));
    }
    let mut norm_acc = MetricAccumulator::new();
    let mut raw_acc = MetricAccumulator::new();
    let ids: Vec<usize> = (0..n).collect();
    for chunk in ids.chunks(batch.max(1)) {
        let b = seg.windows.batch::<T>(chunk, norm)?;
        let emb = seg.embeddings.batch::<T>(&seg.windows, chunk)?;
        let pred = model.predict(&b.x, &emb)?;
        norm_acc.add(&pred, &b.y)?;
        raw_acc.add(&b.denormalize(&pred)?, &b.denormalize(&b.y)?)?;
    }
    let (mse, mae) = norm_acc.finish().expect("non-empty");
    let (mse_raw, mae_raw) = raw_acc.finish().expect("non-empty");
    Ok(EvalMetrics {
        mse,
        mae,
        mse_raw,
        mae_raw,
        windows: n,
    })
}

/// Denormalized forecasts and targets for every window of a segment, each
/// `[W, L_p, N]`.
pub fn forecasts<T: Float>(model: &T3Time<T>, seg: &Segment<'_>, norm: &Normalization, batch: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let n = seg.windows.len();
    let (lp, vars) = (seg.windows.pred_len, seg.windows.table.num_vars());
    if lp != model.config().pred_len {
        return Err(Error::Checkpoint(format!(
            "model predicts {} steps, segment asks for {lp}",
            model.config().pred_len
        )));
    }
    let (mut pred, mut target) = (Vec::with_capacity(n * lp * vars), Vec::with_capacity(n * lp * vars));
    let ids: Vec<usize> = (0..n).collect();
    for chunk in ids.chunks(batch.max(1)) {
        let b = seg.windows.batch::<T>(chunk, norm)?;
        let emb = seg.embeddings.batch::<T>(&seg.windows, chunk)?;
        let p = model.predict(&b.x, &emb)?;
        pred.extend_from_slice(b.denormalize(&p)?.data());
        target.extend_from_slice(b.denormalize(&b.y)?.data());
    }
    Ok((Tensor::new(vec![n, lp, vars], pred)?, Tensor::new(vec![n, lp, vars], target)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::synthetic_sinusoids;

    fn tiny_model() -> T3Time<f32> {
        let mut cfg = ModelConfig::new(16, 4, 2, 8);
        cfg.llm_dim = 12;
        cfg.dropout = 0.1;
        T3Time::new(&cfg).unwrap()
    }

    #[test]
    fn same_seed_same_curve() {
        let table = synthetic_sinusoids(2, 80, 3);
        let emb = EmbeddingSource::stub(12).unwrap();
        let seg = Segment::new(Windows::new(&table, 16, 4), &emb).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 1,
            max_steps: Some(4),
            ..Default::default()
        };
        let run = || {
            let mut m = tiny_model();
            train(&mut m, &seg, None, &Normalization::Instance, &cfg).unwrap().losses
        };
        let a = run();
        assert_eq!(a.len(), 4);
        assert_eq!(a, run());
    }

    #[test]
    fn early_stopping_keeps_best() {
        let table = synthetic_sinusoids(2, 80, 3);
        let emb = EmbeddingSource::stub(12).unwrap();
        let seg = Segment::new(Windows::new(&table, 16, 4), &emb).unwrap();
        let mut m = tiny_model();
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 4,
            patience: Some(1),
            ..Default::default()
        };
        let out = train(&mut m, &seg, Some(&seg), &Normalization::Instance, &cfg).unwrap();
        let best = out.best_val_mse.unwrap();
        assert!(out.epochs.iter().all(|e| e.val_mse.unwrap() >= best));
        let now = evaluate(&m, &seg, &Normalization::Instance, 64).unwrap().mse;
        assert!((now - best).abs() < 1e-9, "{now} vs {best}");
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let table = synthetic_sinusoids(2, 80, 3);
        let emb = EmbeddingSource::stub(12).unwrap();
        let seg = Segment::new(Windows::new(&table, 16, 5), &emb).unwrap();
        assert!(matches!(
            evaluate(&tiny_model(), &seg, &Normalization::Instance, 8),
            Err(Error::Checkpoint(_))
        ));
    }
}
