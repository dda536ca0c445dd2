//! Plain tensor kernels.
//!
//! Every function here is a pure function of its inputs. The tape calls
//! the same kernels in its forward pass.

use super::{axis_split, Real, Tensor};
use crate::error::{Error, Result};

/// Epsilon used by [`layer_norm`] callers unless configured otherwise.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Epsilon used by [`l2_normalize`] callers unless configured otherwise.
pub const L2_EPS: f64 = 1e-12;

/// Numpy-style broadcast of two shapes (right-aligned, size-1 expands).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape("broadcast", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on expanded axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Applies `f` elementwise after broadcasting `a` and `b` to a common shape.
pub fn broadcast_binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let n: usize = out.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data[oa], b.data[ob]));
        // odometer increment
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor { shape: out, data })
}

/// Expands `x` to `shape` under broadcasting rules.
pub fn broadcast_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let out = broadcast_shape(&x.shape, shape)?;
    if out != shape {
        return Err(Error::shape("broadcast_to", &x.shape, shape));
    }
    broadcast_binary(x, &Tensor::zeros(shape.to_vec()), |a, _| a)
}

/// Sums a broadcast result back down to `shape` (adjoint of [`broadcast_to`]).
pub fn sum_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape == shape {
        return Ok(g.clone());
    }
    let out = broadcast_shape(shape, &g.shape)?;
    if out != g.shape {
        return Err(Error::shape("sum_to_shape", &g.shape, shape));
    }
    let strides = broadcast_strides(shape, &g.shape);
    let n_out: usize = shape.iter().product();
    let mut data = vec![T::zero(); n_out];
    let mut idx = vec![0usize; g.shape.len()];
    let mut o = 0usize;
    for &v in &g.data {
        data[o] = data[o] + v;
        for ax in (0..g.shape.len()).rev() {
            idx[ax] += 1;
            o += strides[ax];
            if idx[ax] < g.shape[ax] {
                break;
            }
            o -= strides[ax] * g.shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(shape.to_vec(), data)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary(a, b, |x, y| x + y)
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary(a, b, |x, y| x - y)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary(a, b, |x, y| x * y)
}

pub fn div<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary(a, b, |x, y| x / y)
}

/// Matrix product. Rank-2 operands multiply directly; higher ranks are
/// treated as batches of matrices whose leading dimensions must match
/// exactly (no implicit expansion).
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || ra != rb || a.shape[..ra - 2] != b.shape[..rb - 2] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (k2, n) = (b.shape[rb - 2], b.shape[rb - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let batch: usize = a.shape[..ra - 2].iter().product();
    let mut data = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let am = &a.data[bi * m * k..(bi + 1) * m * k];
        let bm = &b.data[bi * k * n..(bi + 1) * k * n];
        let out = &mut data[bi * m * n..(bi + 1) * m * n];
        matmul_into(am, bm, out, m, k, n);
    }
    let mut shape = a.shape[..ra - 2].to_vec();
    shape.extend([m, n]);
    Tensor::new(shape, data)
}

/// `out[m×n] = a[m×k] · b[k×n]`, i-p-j loop order.
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// Swaps the last two axes.
pub fn transpose_last<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::InvalidShape(format!(
            "transpose needs rank >= 2, got {:?}",
            x.shape
        )));
    }
    let (m, n) = (x.shape[r - 2], x.shape[r - 1]);
    let batch = x.len() / (m * n);
    let mut data = Vec::with_capacity(x.len());
    for bi in 0..batch {
        let base = bi * m * n;
        for j in 0..n {
            for i in 0..m {
                data.push(x.data[base + i * n + j]);
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, data)
}

/// Sum along `axis`. With `keepdim` the axis stays with length 1.
pub fn sum_axis<T: Real>(x: &Tensor<T>, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..len {
            let src = &x.data[(o * len + i) * inner..(o * len + i + 1) * inner];
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    let mut shape = x.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Tensor::new(shape, data)
}

/// Calls `f` with each strided slice along `axis`, gathered into a buffer,
/// and scatters the returned values back.
fn map_axis<T: Real>(
    x: &Tensor<T>,
    axis: usize,
    mut f: impl FnMut(&[T], &mut [T]),
) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut out = vec![T::zero(); x.len()];
    let mut buf_in = vec![T::zero(); len];
    let mut buf_out = vec![T::zero(); len];
    for o in 0..outer {
        for n in 0..inner {
            for (i, b) in buf_in.iter_mut().enumerate() {
                *b = x.data[(o * len + i) * inner + n];
            }
            f(&buf_in, &mut buf_out);
            for (i, &b) in buf_out.iter().enumerate() {
                out[(o * len + i) * inner + n] = b;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Numerically stable softmax of one slice.
pub fn softmax_slice<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    map_axis(x, axis, softmax_slice)
}

/// Log-softmax along `axis`: `x - max - ln Σ exp(x - max)`.
pub fn log_softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    map_axis(x, axis, |s, out| {
        let max = s.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = s.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for (o, &v) in out.iter_mut().zip(s) {
            *o = v - max - lse;
        }
    })
}

/// Divides each vector along `axis` by `max(‖v‖₂, eps)`.
pub fn l2_normalize<T: Real>(x: &Tensor<T>, axis: usize, eps: T) -> Result<Tensor<T>> {
    map_axis(x, axis, |s, out| {
        let norm = s.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        for (o, &v) in out.iter_mut().zip(s) {
            *o = v / norm;
        }
    })
}

/// L2-normalizes a single vector in place semantics (returns a copy).
pub fn l2_normalized_vec<T: Real>(v: &[T], eps: T) -> Vec<T> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
    v.iter().map(|&x| x / norm).collect()
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus_scalar<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn softplus<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(softplus_scalar)
}

/// Layer normalization over the last axis with a `1/D` variance divisor.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = *x
        .shape
        .last()
        .ok_or_else(|| Error::InvalidShape("layer_norm on a scalar".into()))?;
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::shape("layer_norm", &x.shape, &gamma.shape));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data.chunks(d) {
        let (mean, inv_std) = row_moments(row, eps);
        for (j, &v) in row.iter().enumerate() {
            out.push((v - mean) * inv_std * gamma.data[j] + beta.data[j]);
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Mean and `1/sqrt(var + eps)` of one row.
pub(crate) fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::c(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// `‖G − I‖_F` for a square matrix `G`.
pub fn frobenius_distance_to_identity<T: Real>(g: &Tensor<T>) -> Result<T> {
    if g.rank() != 2 || g.shape[0] != g.shape[1] {
        return Err(Error::shape("frobenius_distance_to_identity", &g.shape, &g.shape));
    }
    let k = g.shape[0];
    let mut acc = T::zero();
    for i in 0..k {
        for j in 0..k {
            let e = if i == j { T::one() } else { T::zero() };
            let d = g.data[i * k + j] - e;
            acc = acc + d * d;
        }
    }
    Ok(acc.sqrt())
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
