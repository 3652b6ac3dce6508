mod common;

use common::*;
use proptest::prelude::*;
use t3time::checkpoint::Checkpoint;
use t3time::config::{Ablation, ModelConfig};
use t3time::data::{
    denormalize_forecast, normalize_window, split, synthetic_sinusoids, Normalization, SplitSpec, Windows,
};
use t3time::model::T3Time;
use t3time::store::PromptEmbeddingStore;
use t3time::{Tape, Tensor};

fn vec_tensor(shape: Vec<usize>, scale: f64) -> impl Strategy<Value = Tensor<f64>> {
    let len: usize = shape.iter().product();
    prop::collection::vec(-scale..scale, len).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

fn shape_3d() -> impl Strategy<Value = Vec<usize>> {
    (1usize..4, 1usize..5, 1usize..7).prop_map(|(a, b, c)| vec![a, b, c])
}

fn assert_rows_sum_to_one(t: &Tensor<f64>, width: usize) -> Result<(), TestCaseError> {
    for row in t.data().chunks(width) {
        prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    Ok(())
}

fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(vec![c, r], |i| t.data()[(i % r) * c + i / r])
}

fn within(v: f64, a: f64, b: f64) -> bool {
    let tol = 1e-12 * (1.0 + a.abs().max(b.abs()));
    v >= a.min(b) - tol && v <= a.max(b) + tol
}

proptest! {
    #[test]
    fn softmax_lands_on_the_simplex(
        t in shape_3d().prop_flat_map(|s| vec_tensor(s, 1.0)),
        magnitude in prop::sample::select(vec![1.0, 10.0, 1e3]),
        axis in 0usize..3,
    ) {
        let tape = Tape::new();
        let x = tape.constant(t.map(|v| v * magnitude));
        let y = tape.softmax(x, axis).unwrap();
        prop_assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
        let moved = tape.value(tape.swap_axes(y, axis, 2).unwrap());
        assert_rows_sum_to_one(&moved, t.shape()[axis])?;
    }

    #[test]
    fn normalization_round_trips(
        (n, l) in (1usize..5, 2usize..20),
        offset in -100.0f64..100.0,
        seed in any::<u64>(),
    ) {
        let x = random(&[n, l], seed).map(|v| v * 10.0 + offset);
        let (z, stats) = normalize_window(&x).unwrap();
        let back = denormalize_forecast(&transpose(&z).reshape(vec![1, l, n]).unwrap(), &[stats]).unwrap();
        let back = transpose(&back.reshape(vec![l, n]).unwrap());
        prop_assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn window_count_matches_length(t in 0usize..80, l in 1usize..20, lp in 1usize..20) {
        let table = synthetic_sinusoids(2, t, 1);
        let expected = (t + 1).saturating_sub(l + lp);
        prop_assert_eq!(Windows::new(&table, l, lp).len(), expected);
    }

    #[test]
    fn splits_are_chronological(
        (a, b, c) in (1usize..50, 0usize..30, 1usize..30),
        slack in 0usize..10,
        context in 0usize..40,
    ) {
        let table = synthetic_sinusoids(1, a + b + c + slack, 3);
        let s = split(&table, SplitSpec::Counts(a, b, c), context).unwrap();
        prop_assert_eq!(s.sizes(), (a, b, c));
        let ts = &table.timestamps;
        prop_assert_eq!(&s.train.timestamps[..], &ts[..a]);
        prop_assert_eq!(&s.val.timestamps[s.val_context..], &ts[a..a + b]);
        prop_assert_eq!(&s.test.timestamps[s.test_context..], &ts[a + b..a + b + c]);
        // context only ever reaches backwards
        prop_assert_eq!(&s.val.timestamps[..], &ts[a - s.val_context..a + b]);
        prop_assert_eq!(&s.test.timestamps[..], &ts[a + b - s.test_context..a + b + c]);
    }

    #[test]
    fn store_round_trips(w in 1usize..5, n in 1usize..4, d in 1usize..6, seed in any::<u64>()) {
        let data: Vec<f32> = random(&[w * n * d], seed).data().iter().map(|&v| v as f32).collect();
        let store = PromptEmbeddingStore::new(w, n, d, data.clone()).unwrap();
        let back = PromptEmbeddingStore::from_bytes(&store.to_bytes()).unwrap();
        prop_assert_eq!((back.num_windows(), back.num_vars(), back.dim()), (w, n, d));
        prop_assert_eq!(back.data(), &data[..]);
    }
}

fn model_instance(seed: u64, ablation: Ablation) -> T3Time<f64> {
    let mut cfg = tiny_config(ablation);
    cfg.seed = seed;
    let mut m = T3Time::<f64>::new(&cfg).unwrap();
    randomize(&mut m.params, seed, 0.5);
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fusion_weights_and_mixes_stay_convex(seed in any::<u64>(), batch in 1usize..4) {
        let m = model_instance(seed, Ablation::FULL);
        let x = random(&[batch, 2, 8], seed ^ 1);
        let emb = random(&[batch, 2, 6], seed ^ 2);
        let tape = Tape::new();
        let bound = m.params.bind(&tape, false);
        let trace = m.arch.forward(&eval_ctx(&tape, &bound), &x, &emb).unwrap();
        let freq = trace.frequency.as_ref().unwrap();

        let alpha = tape.value(freq.alpha);
        let bins = *alpha.shape().last().unwrap();
        assert_rows_sum_to_one(&alpha, bins)?;
        let pi = tape.value(trace.head_weights.unwrap());
        assert_rows_sum_to_one(&pi, 2)?;
        let g = tape.value(trace.gate.unwrap());
        prop_assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));

        // pooled features lie in the hull of the spectral tokens
        let enc = tape.value(freq.encoded);
        let c = *enc.shape().last().unwrap();
        let pooled = tape.value(freq.pooled);
        for (r, row) in pooled.data().chunks(c).enumerate() {
            for (d, &v) in row.iter().enumerate() {
                let col = (0..bins).map(|j| enc.data()[(r * bins + j) * c + d]);
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(within(v, lo, hi));
            }
        }

        let (f, zt, zg) = (pooled, tape.value(trace.z_t), tape.value(trace.z_g));
        let (lambda, theta) = (tape.value(trace.lambda), tape.value(trace.theta));
        for i in 0..zg.data().len() {
            prop_assert!(within(zg.data()[i], f.data()[i], zt.data()[i]));
            prop_assert!(within(theta.data()[i], lambda.data()[i], zg.data()[i]));
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>()) {
        let mut cfg = ModelConfig::new(8, 4, 2, 4);
        cfg.llm_dim = 6;
        cfg.seed = seed;
        let mut m = T3Time::<f32>::new(&cfg).unwrap();
        for e in m.params.entries_mut() {
            let noise = random(e.value.shape(), seed ^ 9);
            for (v, r) in e.value.data_mut().iter_mut().zip(noise.data()) {
                *v = *r as f32;
            }
        }
        let mut ck = Checkpoint::new(m);
        ck.meta.insert("dataset".into(), format!("s{seed}"));
        ck.set_normalization(&Normalization::Instance);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(&back.meta, &ck.meta);
        for (a, b) in back.model.params.entries().iter().zip(ck.model.params.entries()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.value.data(), b.value.data());
        }
    }
}
