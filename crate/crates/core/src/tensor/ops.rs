use rand::Rng;

use super::kernels::{broadcast_shape, expand_index_map, gemm_acc, swap_axes};
use super::tape::{matmul_dims, Op};
use super::{axis_extents, Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Float> Tape<T> {
    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let shape = broadcast_shape(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape(name, av.shape(), bv.shape()))?;
        let (ad, bd) = (av.data(), bv.data());
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect();
        Ok(self.push(Tensor { shape, data }, op(a, b)))
    }

    /// Elementwise sum; the lower-rank operand broadcasts over leading axes.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, Op::Sigmoid(a))
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`. Batch axes follow
    /// the same leading-axis broadcast rule as the elementwise ops.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let dims = matmul_dims(av.shape(), bv.shape())?;
        let (m, k, n) = (dims.m, dims.k, dims.n);
        let mut out = vec![T::zero(); dims.out_count * m * n];
        if dims.b_count == 1 && dims.a_count == dims.out_count {
            gemm_acc(av.data(), bv.data(), &mut out, dims.out_count * m, k, n);
        } else {
            for bi in 0..dims.out_count {
                let (ai, bj) = (bi % dims.a_count, bi % dims.b_count);
                gemm_acc(
                    &av.data()[ai * m * k..(ai + 1) * m * k],
                    &bv.data()[bj * k * n..(bj + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let value = Tensor {
            shape: dims.out_shape,
            data: out,
        };
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn swap_axes(&self, a: Var, a0: usize, a1: usize) -> Result<Var> {
        let av = self.value(a);
        if a0 >= av.ndim() || a1 >= av.ndim() {
            return Err(Error::shape("swap_axes", av.shape(), &[a0, a1]));
        }
        let (shape, data) = swap_axes(av.shape(), av.data(), a0, a1);
        Ok(self.push(Tensor { shape, data }, Op::SwapAxes(a, a0, a1)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(Error::shape("transpose", &self.shape(a), &[]));
        }
        self.swap_axes(a, nd - 2, nd - 1)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let value = (*av).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Repeats size-1 axes to reach `shape` (same rank).
    pub fn expand(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let ok = av.ndim() == shape.len()
            && av
                .shape()
                .iter()
                .zip(shape)
                .all(|(&s, &t)| s == t || s == 1);
        if !ok {
            return Err(Error::shape("expand", av.shape(), shape));
        }
        let map = expand_index_map(av.shape(), shape);
        let data = map.iter().map(|&i| av.data()[i]).collect();
        let value = Tensor {
            shape: shape.to_vec(),
            data,
        };
        Ok(self.push(value, Op::Expand(a, map)))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let values: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !same {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(self.push(Tensor { shape, data }, Op::Concat(xs.to_vec(), axis)))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.ndim() || start + len > av.shape()[axis] {
            return Err(Error::shape("slice", av.shape(), &[axis, start, len]));
        }
        let (outer, total, inner) = axis_extents(av.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&av.data()[(o * total + start) * inner..(o * total + start + len) * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor { shape, data }, Op::Slice { x: a, axis, start }))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.ndim() {
            return Err(Error::shape("mean", av.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_extents(av.shape(), axis);
        let scale = T::one() / T::lit(len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for j in 0..inner {
                    data[o * inner + j] += av.data()[(o * len + l) * inner + j];
                }
            }
        }
        for d in &mut data {
            *d *= scale;
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor { shape, data }, Op::Mean(a, axis)))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let s: T = av.data().iter().copied().sum();
        let m = s / T::lit(av.numel() as f64);
        self.push(Tensor::scalar(m), Op::MeanAll(a))
    }

    /// Softmax along `axis`, computed after subtracting the slice maximum.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.ndim() {
            return Err(Error::shape("softmax", av.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_extents(av.shape(), axis);
        let x = av.data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| (o * len + l) * inner + j;
                let max = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    data[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    data[at(l)] = data[at(l)] / sum;
                }
            }
        }
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::Softmax(a, axis)))
    }

    /// Normalizes each slice along `axis` to zero mean and unit population
    /// variance, then applies the per-position affine `gain`, `bias`.
    pub fn layer_norm(&self, x: Var, axis: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::shape("layer_norm", xv.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_extents(xv.shape(), axis);
        let gv = self.value(gain);
        let bv = self.value(bias);
        if gv.shape() != [len] || bv.shape() != [len] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let eps = T::lit(eps);
        let n = T::lit(len as f64);
        let xd = xv.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut data = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| (o * len + l) * inner + j;
                let mean = (0..len).map(|l| xd[at(l)]).sum::<T>() / n;
                let var = (0..len)
                    .map(|l| {
                        let d = xd[at(l)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + j] = r;
                for l in 0..len {
                    let h = (xd[at(l)] - mean) * r;
                    xhat[at(l)] = h;
                    data[at(l)] = h * gv.data()[l] + bv.data()[l];
                }
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            },
        ))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::Dropout(x, mask)))
    }

    /// `softmax(Q Kᵀ / √d) V` over the last two axes.
    pub fn scaled_dot_attention(&self, q: Var, k: Var, v: Var) -> Result<Var> {
        let weights = self.attention_weights(q, k)?;
        self.attend(weights, v)
    }

    /// Row-stochastic attention weights `softmax(Q Kᵀ / √d)`.
    pub fn attention_weights(&self, q: Var, k: Var) -> Result<Var> {
        let qs = self.shape(q);
        let ks = self.shape(k);
        if qs.len() < 2 || ks.len() < 2 || qs[qs.len() - 1] != ks[ks.len() - 1] {
            return Err(Error::shape("attention", &qs, &ks));
        }
        let d = qs[qs.len() - 1] as f64;
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / d.sqrt());
        let last = qs.len() - 1;
        self.softmax(scores, last)
    }

    pub fn attend(&self, weights: Var, v: Var) -> Result<Var> {
        let ws = self.shape(weights);
        let vs = self.shape(v);
        if vs.len() < 2 || ws[ws.len() - 1] != vs[vs.len() - 2] {
            return Err(Error::shape("attention", &ws, &vs));
        }
        self.matmul(weights, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(i, c).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let y = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_errors_name_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn softmax_hand_cases() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.value(tape.softmax(x, 0).unwrap());
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1].abs() < 1e-6);
        assert!(y.all_finite());
    }

    #[test]
    fn layer_norm_hand_cases() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::ones(vec![3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let x = tape.constant(t(&[3], &[5.0, 5.0, 5.0]));
        let y = tape.layer_norm(x, 0, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));

        let g = tape.constant(Tensor::ones(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.value(tape.layer_norm(x, 0, g, b, 1e-5).unwrap());
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn elementwise_hand_cases() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[-2.0, 3.0]));
        assert_eq!(tape.value(tape.relu(x)).data(), &[0.0, 3.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        assert_eq!(tape.value(tape.sigmoid(z)).data(), &[0.5]);
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 5]));
        assert_eq!(tape.shape(tape.concat(&[a, b], 1).unwrap()), vec![2, 8]);
    }

    #[test]
    fn broadcasting_other_than_leading_axes_is_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 1]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let c = tape.constant(Tensor::zeros(vec![3]));
        assert_eq!(tape.shape(tape.add(a, c).unwrap()), vec![2, 3]);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let tape = Tape::new();
        let q = tape.constant(t(&[1, 3, 2], &[0.3, -1.0, 2.0, 0.5, -4.0, 1.0]));
        let k = tape.constant(t(&[1, 1, 2], &[0.7, 0.1]));
        let v = tape.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let out = tape.value(tape.scaled_dot_attention(q, k, v).unwrap());
        assert_eq!(out.shape(), &[1, 3, 3]);
        for row in out.data().chunks(3) {
            assert_eq!(row, &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn attention_uniform_keys_average_values() {
        let tape = Tape::new();
        let q = tape.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let k = tape.constant(t(&[3, 2], &[0.4, 0.4, 0.4, 0.4, 0.4, 0.4]));
        let v = tape.constant(t(&[3, 1], &[1.0, 2.0, 6.0]));
        let out = tape.value(tape.scaled_dot_attention(q, k, v).unwrap());
        for &o in out.data() {
            assert!((o - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_key_width_mismatch() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(vec![2, 3]));
        let k = tape.constant(Tensor::zeros(vec![2, 4]));
        let v = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(tape.scaled_dot_attention(q, k, v), Err(Error::Shape { op: "attention", .. })));
    }

    #[test]
    fn dropout_modes() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(Tensor::<f64>::ones(vec![10]));
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));
        assert!(matches!(tape.dropout(x, -0.1, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_survivor_fraction() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = tape.constant(Tensor::<f32>::ones(vec![1_000_000]));
        let y = tape.value(tape.dropout(x, 0.5, true, &mut rng).unwrap());
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((kept - 0.5).abs() < 0.01, "survivor fraction {kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_hand_cases() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[0.1, 0.2, 0.3]));
        let s = tape.sum_all(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }
}
