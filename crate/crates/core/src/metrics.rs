//! Training loss and evaluation metrics.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Differentiable mean squared error over all elements.
pub fn mse_loss<T: Float>(tape: &Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let ps = tape.shape(pred);
    let ts = tape.shape(target);
    if ps != ts {
        return Err(Error::shape("mse_loss", &ps, &ts));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Pairwise (cascade) summation; error grows with `log n` rather than `n`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn elementwise<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, op: &'static str, f: impl Fn(f64) -> f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(op, pred.shape(), target.shape()));
    }
    if pred.numel() == 0 {
        return Err(Error::Contract(format!("{op} of an empty tensor")));
    }
    let terms: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| f(p.as_f64() - t.as_f64()))
        .collect();
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

pub fn mse<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    elementwise(pred, target, "mse", |d| d * d)
}

pub fn mae<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    elementwise(pred, target, "mae", f64::abs)
}

/// Running sums for metrics over many batches.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sq: Vec<f64>,
    abs: Vec<f64>,
    count: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<T: Float>(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::shape("metrics", pred.shape(), target.shape()));
        }
        let terms: Vec<f64> = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| p.as_f64() - t.as_f64())
            .collect();
        self.sq.push(pairwise_sum(&terms.iter().map(|d| d * d).collect::<Vec<_>>()));
        self.abs.push(pairwise_sum(&terms.iter().map(|d| d.abs()).collect::<Vec<_>>()));
        self.count += terms.len();
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `(mse, mae)`, or `None` before any element was added.
    pub fn finish(&self) -> Option<(f64, f64)> {
        (self.count > 0).then(|| {
            let n = self.count as f64;
            (pairwise_sum(&self.sq) / n, pairwise_sum(&self.abs) / n)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let y = Tensor::<f64>::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let p = Tensor::<f64>::from_f64(vec![2], &[1.0, 3.0]).unwrap();
        assert_eq!(mse(&p, &y).unwrap(), 0.5);
        assert_eq!(mae(&p, &y).unwrap(), 0.5);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert!(mse(&p, &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn loss_matches_metric() {
        let tape = Tape::<f64>::new();
        let y = Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let p = Tensor::from_f64(vec![2], &[1.0, 3.0]).unwrap();
        let l = mse_loss(&tape, tape.param(p), tape.constant(y)).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.5);
    }

    #[test]
    fn accumulator_pools_batches() {
        let mut acc = MetricAccumulator::new();
        assert!(acc.finish().is_none());
        let a = Tensor::<f64>::from_f64(vec![2], &[0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![1], &[3.0]).unwrap();
        acc.add(&a, &Tensor::zeros(vec![2])).unwrap();
        acc.add(&b, &Tensor::zeros(vec![1])).unwrap();
        let (m, a) = acc.finish().unwrap();
        assert!((m - 10.0 / 3.0).abs() < 1e-15);
        assert!((a - 4.0 / 3.0).abs() < 1e-15);
    }
}
