mod common;

use common::*;
use t3time::config::ModelConfig;
use t3time::data::{synthetic_sinusoids, Normalization, SeriesTable, Windows};
use t3time::metrics::MetricAccumulator;
use t3time::model::T3Time;
use t3time::optim::{AdamW, AdamWConfig};
use t3time::rng::SeedTree;
use t3time::train::{evaluate, train, train_step, EmbeddingSource, Segment, TrainConfig};

fn small_config(dropout: f64) -> ModelConfig {
    let mut cfg = ModelConfig::new(32, 8, 2, 16);
    cfg.llm_dim = 12;
    cfg.dropout = dropout;
    cfg
}

fn series() -> SeriesTable {
    synthetic_sinusoids(2, 400, 7)
}

#[test]
fn early_loss_never_jumps() {
    // fixed batch and no dropout, so every step sees the same objective
    let table = series();
    let emb = EmbeddingSource::stub(12).unwrap();
    let seg = Segment::new(Windows::new(&table, 32, 8), &emb).unwrap();
    let mut model = T3Time::<f32>::new(&small_config(0.0)).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
    let seeds = SeedTree::new(1);
    let batch: Vec<usize> = (0..16).map(|i| i * 20).collect();
    let mut losses = Vec::new();
    for _ in 0..20 {
        losses.push(train_step(&mut model, &mut opt, &seg, &batch, &Normalization::Instance, &seeds).unwrap());
    }
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] * 1.1, "{losses:?}");
    }
    assert!(losses[19] < losses[0]);
}

fn run(seed: u64, dropout: f64) -> (T3Time<f32>, t3time::train::TrainOutcome) {
    let table = series();
    let (train_t, val_t) = (table.slice(0, 300), table.slice(300 - 32, 400));
    let emb = EmbeddingSource::stub(12).unwrap();
    let tr = Segment::new(Windows::new(&train_t, 32, 8), &emb).unwrap();
    let va = Segment::new(Windows::new(&val_t, 32, 8), &emb).unwrap();
    let mut cfg = small_config(dropout);
    cfg.seed = seed;
    let mut model = T3Time::<f32>::new(&cfg).unwrap();
    let tc = TrainConfig {
        optimizer: AdamWConfig {
            lr: 3e-3,
            ..AdamWConfig::default()
        },
        batch_size: 32,
        max_epochs: 6,
        patience: Some(2),
        seed,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &tr, Some(&va), &Normalization::Instance, &tc).unwrap();
    (model, out)
}

#[test]
fn training_keeps_the_best_validation_parameters() {
    let (model, out) = run(3, 0.1);
    let best = out.best_val_mse.unwrap();
    for e in &out.epochs {
        assert!(best <= e.val_mse.unwrap());
    }
    assert_eq!(out.epochs[out.best_epoch.unwrap()].val_mse, Some(best));

    let table = series();
    let val_t = table.slice(300 - 32, 400);
    let emb = EmbeddingSource::stub(12).unwrap();
    let va = Segment::new(Windows::new(&val_t, 32, 8), &emb).unwrap();
    let again = evaluate(&model, &va, &Normalization::Instance, 256).unwrap();
    assert_eq!(again.mse, best);
}

#[test]
fn training_is_deterministic() {
    let (a, oa) = run(5, 0.2);
    let (b, ob) = run(5, 0.2);
    assert_eq!(oa.losses, ob.losses);
    for (x, y) in a.params.entries().iter().zip(b.params.entries()) {
        assert_eq!(x.value.data(), y.value.data(), "{}", x.name);
    }
    let (_, oc) = run(6, 0.2);
    assert_ne!(oa.losses, oc.losses);
}

#[test]
fn step_budget_is_respected() {
    let table = series();
    let emb = EmbeddingSource::stub(12).unwrap();
    let seg = Segment::new(Windows::new(&table, 32, 8), &emb).unwrap();
    let mut model = T3Time::<f32>::new(&small_config(0.0)).unwrap();
    let tc = TrainConfig {
        max_steps: Some(5),
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &seg, None, &Normalization::Instance, &tc).unwrap();
    assert_eq!((out.steps, out.losses.len()), (5, 5));
}

#[test]
fn perfect_forecast_scores_zero() {
    let y = random(&[4, 8, 3], 1);
    let mut acc = MetricAccumulator::new();
    acc.add(&y, &y).unwrap();
    assert_eq!(acc.finish().unwrap(), (0.0, 0.0));
}
