//! Real-input discrete Fourier transform.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley-Tukey transform.
//! Every other length goes through Bluestein's chirp-z reformulation, which
//! turns a length-`n` DFT into a circular convolution evaluated with a
//! power-of-two transform of length `m >= 2n - 1`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Radix2 {
    n: usize,
    twiddles: Vec<Complex64>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Self { n, twiddles }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        if n <= 1 {
            return;
        }
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let u = buf[start + k];
                    let v = buf[start + k + half] * w;
                    buf[start + k] = u + v;
                    buf[start + k + half] = u - v;
                }
            }
            len *= 2;
        }
    }

    fn inverse(&self, buf: &mut [Complex64]) {
        for v in buf.iter_mut() {
            *v = v.conj();
        }
        self.forward(buf);
        let scale = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v = v.conj() * scale;
        }
    }
}

#[derive(Clone, Debug)]
struct Bluestein {
    n: usize,
    chirp: Vec<Complex64>,
    kernel: Vec<Complex64>,
    inner: Radix2,
}

impl Bluestein {
    fn new(n: usize) -> Self {
        let m = (2 * n - 1).next_power_of_two();
        let inner = Radix2::new(m);
        // exp(-iπ k²/n); k² is reduced mod 2n so the angle stays small.
        let chirp: Vec<Complex64> = (0..n)
            .map(|k| {
                let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
                Complex64::from_polar(1.0, -PI * k2 / n as f64)
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); m];
        kernel[0] = chirp[0].conj();
        for k in 1..n {
            kernel[k] = chirp[k].conj();
            kernel[m - k] = chirp[k].conj();
        }
        inner.forward(&mut kernel);
        Self {
            n,
            chirp,
            kernel,
            inner,
        }
    }

    fn forward(&self, input: &[Complex64], out: &mut [Complex64]) {
        let m = self.inner.n;
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        for k in 0..self.n {
            buf[k] = input[k] * self.chirp[k];
        }
        self.inner.forward(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel) {
            *b *= k;
        }
        self.inner.inverse(&mut buf);
        for k in 0..self.n {
            out[k] = buf[k] * self.chirp[k];
        }
    }
}

#[derive(Clone, Debug)]
enum Plan {
    Radix2(Radix2),
    Bluestein(Bluestein),
}

/// Precomputed transform for real signals of one length.
#[derive(Clone, Debug)]
pub struct RealFft {
    len: usize,
    plan: Plan,
}

impl RealFft {
    pub fn new(len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::Config(format!("FFT length must be at least 2, got {len}")));
        }
        let plan = if len.is_power_of_two() {
            Plan::Radix2(Radix2::new(len))
        } else {
            Plan::Bluestein(Bluestein::new(len))
        };
        Ok(Self { len, plan })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of non-redundant bins, `⌊len/2⌋ + 1`.
    pub fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    /// Bins `0..=len/2` of the DFT of `x`.
    pub fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.len, "signal length");
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        match &self.plan {
            Plan::Radix2(p) => p.forward(&mut buf),
            Plan::Bluestein(p) => {
                let input = buf.clone();
                p.forward(&input, &mut buf);
            }
        }
        buf.truncate(self.bins());
        buf
    }

    pub fn magnitudes(&self, x: &[f64]) -> Vec<f64> {
        self.spectrum(x).iter().map(|c| c.norm()).collect()
    }
}
