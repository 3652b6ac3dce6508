use rayon::prelude::*;

use super::Float;

// Below this many multiply-adds a gemm stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

/// How a `rows×cols` operand is laid out in its buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Layout {
    /// stored as given, row-major
    Plain,
    /// stored as the row-major `cols×rows` transpose
    Transposed,
}

/// `c += op(a) · op(b)` where `op(a)` is `m×k`, `op(b)` is `k×n` and `c` is
/// row-major `m×n`.
///
/// Large products are split by rows of `c` across threads. Rows are
/// independent, so the split does not change any output element's
/// summation order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc_t<T: Float>(
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let sa = match la {
        Layout::Plain => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let sb = match lb {
        Layout::Plain => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let rows = |r0: usize, cpart: &mut [T]| {
        let mr = cpart.len() / n;
        // SAFETY: rows r0..r0+mr of op(a) and all of op(b) lie inside the
        // buffers whose sizes were asserted above; `cpart` is exactly mr×n.
        unsafe {
            let a0 = a.as_ptr().offset(r0 as isize * sa.0);
            T::gemm(mr, k, n, a0, sa, b.as_ptr(), sb, cpart.as_mut_ptr());
        }
    };
    let threads = rayon::current_num_threads();
    if m * k * n >= PAR_THRESHOLD && m > 1 && threads > 1 {
        let chunk_rows = m.div_ceil(threads);
        c.par_chunks_mut(chunk_rows * n)
            .enumerate()
            .for_each(|(i, part)| rows(i * chunk_rows, part));
    } else {
        rows(0, c);
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_acc_t(a, Layout::Plain, b, Layout::Plain, c, m, k, n);
}

/// Row-major transpose of an `rows×cols` matrix.
pub(crate) fn transpose2d<T: Float>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

/// Result shape of a leading-dimension broadcast, if `a` and `b` are
/// compatible: equal shapes, or one shape a suffix of the other.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() >= b.len() {
        a.ends_with(b).then(|| a.to_vec())
    } else {
        b.ends_with(a).then(|| b.to_vec())
    }
}

/// Sums `g` (laid out in some broadcast shape) down to `len` trailing
/// elements.
pub(crate) fn reduce_leading<T: Float>(g: &[T], len: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), len);
    if g.len() == len {
        for (o, &v) in out.iter_mut().zip(g) {
            *o += v;
        }
        return;
    }
    for chunk in g.chunks(len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Swaps two axes, returning the new shape and data.
pub(crate) fn swap_axes<T: Float>(
    shape: &[usize],
    data: &[T],
    a0: usize,
    a1: usize,
) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(a0, a1);
    if a0 == a1 {
        return (out_shape, data.to_vec());
    }
    let (lo, hi) = (a0.min(a1), a0.max(a1));
    if lo == nd - 2 && hi == nd - 1 {
        let rows = shape[nd - 2];
        let cols = shape[nd - 1];
        let batch: usize = shape[..nd - 2].iter().product();
        let mut out = Vec::with_capacity(data.len());
        for b in 0..batch {
            out.extend(transpose2d(&data[b * rows * cols..(b + 1) * rows * cols], rows, cols));
        }
        return (out_shape, out);
    }
    let in_strides = strides(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(a0, a1);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Maps every flat index of `out_shape` to the flat index of the source
/// tensor `in_shape` (same rank, size-1 axes repeated).
pub(crate) fn expand_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let in_strides = strides(in_shape);
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        let src: usize = (0..nd)
            .map(|d| if in_shape[d] == 1 { 0 } else { idx[d] * in_strides[d] })
            .sum();
        map.push(src);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}
