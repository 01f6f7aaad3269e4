//! Forward and backward kernels. Every kernel uses a fixed row-major
//! evaluation order so that identical inputs give bit-identical outputs.

use std::ops::Range;

use super::{strides, Scalar, Tensor};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Geometry of a 3D convolution over the `(T, H, W)` axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// `floor((L + 2p - k) / s) + 1` per axis; rejected when that is not positive.
    pub fn out_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let (l, k, s, p) = (
                input[axis],
                self.kernel[axis],
                self.stride[axis],
                self.pad[axis],
            );
            if s == 0 || k == 0 || l + 2 * p < k {
                return Err(Error::NonPositiveExtent {
                    op: "conv3d",
                    axis,
                    input: l,
                    kernel: k,
                    stride: s,
                    pad: p,
                });
            }
            out[axis] = (l + 2 * p - k) / s + 1;
        }
        Ok(out)
    }

    pub fn volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output positions `o` for which tap `k` reads a real (non-padding) input.
fn valid_outputs(
    len_in: usize,
    len_out: usize,
    stride: usize,
    pad: usize,
    k: usize,
) -> Range<usize> {
    // o*s + k - p in [0, len_in)
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    if len_in + pad <= k {
        return 0..0;
    }
    let hi = ((len_in - 1 + pad - k) / stride + 1).min(len_out);
    lo.min(hi)..hi
}

struct Planes {
    ext_in: [usize; 3],
    ext_out: [usize; 3],
    geom: Conv3dGeometry,
}

impl Planes {
    fn in_volume(&self) -> usize {
        self.ext_in.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.ext_out.iter().product()
    }

    fn ranges(&self, tap: [usize; 3]) -> [Range<usize>; 3] {
        std::array::from_fn(|a| {
            valid_outputs(
                self.ext_in[a],
                self.ext_out[a],
                self.geom.stride[a],
                self.geom.pad[a],
                tap[a],
            )
        })
    }

    fn in_index(&self, o: [usize; 3], tap: [usize; 3]) -> usize {
        let [_, hi, wi] = self.ext_in;
        let i: [usize; 3] =
            std::array::from_fn(|a| o[a] * self.geom.stride[a] + tap[a] - self.geom.pad[a]);
        (i[0] * hi + i[1]) * wi + i[2]
    }

    fn taps(&self) -> impl Iterator<Item = [usize; 3]> {
        let [kt, kh, kw] = self.geom.kernel;
        (0..kt).flat_map(move |a| (0..kh).flat_map(move |b| (0..kw).map(move |c| [a, b, c])))
    }

    /// out += w * shift(input) for one kernel tap.
    fn accumulate<T: Scalar>(&self, out: &mut [T], input: &[T], w: T, tap: [usize; 3]) {
        let [rt, rh, rw] = self.ranges(tap);
        if rt.is_empty() || rh.is_empty() || rw.is_empty() {
            return Default::default();
        }
        let [_, ho_n, wo_n] = self.ext_out;
        let sw = self.geom.stride[2];
        for to in rt {
            for ho in rh.clone() {
                let obase = (to * ho_n + ho) * wo_n;
                let ibase = self.in_index([to, ho, rw.start], tap);
                for (j, wo) in rw.clone().enumerate() {
                    out[obase + wo] = out[obase + wo] + w * input[ibase + j * sw];
                }
            }
        }
    }

    /// grad_in += w * scatter(grad_out) for one kernel tap.
    fn scatter<T: Scalar>(&self, grad_in: &mut [T], grad_out: &[T], w: T, tap: [usize; 3]) {
        let [rt, rh, rw] = self.ranges(tap);
        if rt.is_empty() || rh.is_empty() || rw.is_empty() {
            return Default::default();
        }
        let [_, ho_n, wo_n] = self.ext_out;
        let sw = self.geom.stride[2];
        for to in rt {
            for ho in rh.clone() {
                let obase = (to * ho_n + ho) * wo_n;
                let ibase = self.in_index([to, ho, rw.start], tap);
                for (j, wo) in rw.clone().enumerate() {
                    let i = ibase + j * sw;
                    grad_in[i] = grad_in[i] + w * grad_out[obase + wo];
                }
            }
        }
    }

    /// sum over outputs of grad_out * shift(input) for one kernel tap.
    fn correlate<T: Scalar>(&self, grad_out: &[T], input: &[T], tap: [usize; 3]) -> T {
        let [rt, rh, rw] = self.ranges(tap);
        if rt.is_empty() || rh.is_empty() || rw.is_empty() {
            return Default::default();
        }
        let [_, ho_n, wo_n] = self.ext_out;
        let sw = self.geom.stride[2];
        let mut acc = T::zero();
        for to in rt {
            for ho in rh.clone() {
                let obase = (to * ho_n + ho) * wo_n;
                let ibase = self.in_index([to, ho, rw.start], tap);
                for (j, wo) in rw.clone().enumerate() {
                    acc = acc + grad_out[obase + wo] * input[ibase + j * sw];
                }
            }
        }
        acc
    }
}

fn video_dims(op: &'static str, x: &Tensor<impl Scalar>) -> Result<[usize; 5]> {
    x.shape().try_into().map_err(|_| Error::InvalidShape {
        op,
        msg: format!("expected N×C×T×H×W input, got {:?}", x.shape()),
    })
}

// ---------------------------------------------------------------- matmul

struct MatmulDims {
    batch: usize,
    b_batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<MatmulDims> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (ab, am) = a.shape().split_at(a.rank() - 2);
    let (bb, bm) = b.shape().split_at(b.rank() - 2);
    if am[1] != bm[0] || bb.len() > ab.len() || ab[ab.len() - bb.len()..] != *bb {
        return Err(mismatch());
    }
    let mut out_shape = ab.to_vec();
    out_shape.extend([am[0], bm[1]]);
    Ok(MatmulDims {
        batch: ab.iter().product(),
        b_batch: bb.iter().product(),
        m: am[0],
        k: am[1],
        n: bm[1],
        out_shape,
    })
}

/// Matrix product over the last two axes. `b` may omit leading batch axes,
/// in which case it is shared across them.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = matmul_dims(a, b)?;
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let a_off = bi * d.m * d.k;
        let b_off = (bi % d.b_batch) * d.k * d.n;
        let o_off = bi * d.m * d.n;
        for i in 0..d.m {
            let orow = &mut out[o_off + i * d.n..o_off + (i + 1) * d.n];
            for p in 0..d.k {
                let av = a.data()[a_off + i * d.k + p];
                let brow = &b.data()[b_off + p * d.n..b_off + (p + 1) * d.n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(d.out_shape, out))
}

pub(crate) fn matmul_macs(a: &[usize], b: &[usize]) -> u64 {
    let batch: usize = a[..a.len() - 2].iter().product();
    (batch * a[a.len() - 2] * a[a.len() - 1] * b[b.len() - 1]) as u64
}

pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let d = matmul_dims(a, b).expect("validated in forward");
    let mut da = need_a.then(|| vec![T::zero(); a.numel()]);
    let mut db = need_b.then(|| vec![T::zero(); b.numel()]);
    for bi in 0..d.batch {
        let a_off = bi * d.m * d.k;
        let b_off = (bi % d.b_batch) * d.k * d.n;
        let g_off = bi * d.m * d.n;
        for i in 0..d.m {
            let grow = &g.data()[g_off + i * d.n..g_off + (i + 1) * d.n];
            for p in 0..d.k {
                let brow = &b.data()[b_off + p * d.n..b_off + (p + 1) * d.n];
                if let Some(da) = da.as_mut() {
                    let acc = grow
                        .iter()
                        .zip(brow)
                        .fold(T::zero(), |s, (&gv, &bv)| s + gv * bv);
                    da[a_off + i * d.k + p] = acc;
                }
                if let Some(db) = db.as_mut() {
                    let av = a.data()[a_off + i * d.k + p];
                    let dbrow = &mut db[b_off + p * d.n..b_off + (p + 1) * d.n];
                    for (o, &gv) in dbrow.iter_mut().zip(grow) {
                        *o = *o + av * gv;
                    }
                }
            }
        }
    }
    (
        da.map(|v| Tensor::from_parts(a.shape().to_vec(), v)),
        db.map(|v| Tensor::from_parts(b.shape().to_vec(), v)),
    )
}

// ---------------------------------------------------------------- layout

pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::InvalidShape {
            op: "transpose",
            msg: format!("rank {} < 2", x.rank()),
        });
    }
    let mut axes: Vec<usize> = (0..x.rank()).collect();
    axes.swap(x.rank() - 2, x.rank() - 1);
    permute(x, &axes)
}

/// Output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank
        || axes
            .iter()
            .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::InvalidShape {
            op: "permute",
            msg: format!("{axes:?} is not a permutation of rank {rank}"),
        });
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.numel() {
        out.push(x.data()[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Concatenate along the last axis; leading axes must agree.
pub fn concat_last<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let ra = a.rank();
    if ra == 0 || ra != b.rank() || a.shape()[..ra - 1] != b.shape()[..ra - 1] {
        return Err(Error::ShapeMismatch {
            op: "concat",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (na, nb) = (a.shape()[ra - 1], b.shape()[ra - 1]);
    let rows = a.numel() / na;
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * na..(r + 1) * na]);
        out.extend_from_slice(&b.data()[r * nb..(r + 1) * nb]);
    }
    let mut shape = a.shape().to_vec();
    shape[ra - 1] = na + nb;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn split_last<T: Scalar>(g: &Tensor<T>, na: usize) -> (Tensor<T>, Tensor<T>) {
    let r = g.rank();
    let total = g.shape()[r - 1];
    let nb = total - na;
    let rows = g.numel() / total;
    let mut a = Vec::with_capacity(rows * na);
    let mut b = Vec::with_capacity(rows * nb);
    for row in g.data().chunks(total) {
        a.extend_from_slice(&row[..na]);
        b.extend_from_slice(&row[na..]);
    }
    let mut sa = g.shape().to_vec();
    sa[r - 1] = na;
    let mut sb = g.shape().to_vec();
    sb[r - 1] = nb;
    (Tensor::from_parts(sa, a), Tensor::from_parts(sb, b))
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Select one index along `axis`, dropping that axis.
pub fn index_axis<T: Scalar>(x: &Tensor<T>, axis: usize, index: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::InvalidAxis {
            op: "index_axis",
            axis,
            rank: x.rank(),
        });
    }
    let (outer, len, inner) = outer_inner(x.shape(), axis);
    if index >= len {
        return Err(Error::InvalidShape {
            op: "index_axis",
            msg: format!("index {index} out of range for extent {len}"),
        });
    }
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let base = (o * len + index) * inner;
        out.extend_from_slice(&x.data()[base..base + inner]);
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn index_axis_backward<T: Scalar>(
    in_shape: &[usize],
    axis: usize,
    index: usize,
    g: &Tensor<T>,
) -> Tensor<T> {
    let (outer, len, inner) = outer_inner(in_shape, axis);
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let base = (o * len + index) * inner;
        out[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

/// Insert a new axis at `axis` and repeat the tensor `count` times along it.
pub fn expand_axis<T: Scalar>(x: &Tensor<T>, axis: usize, count: usize) -> Result<Tensor<T>> {
    if axis > x.rank() || count == 0 {
        return Err(Error::InvalidAxis {
            op: "expand_axis",
            axis,
            rank: x.rank(),
        });
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis..].iter().product();
    let mut out = Vec::with_capacity(x.numel() * count);
    for o in 0..outer {
        let chunk = &x.data()[o * inner..(o + 1) * inner];
        for _ in 0..count {
            out.extend_from_slice(chunk);
        }
    }
    let mut shape = x.shape().to_vec();
    shape.insert(axis, count);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn expand_axis_backward<T: Scalar>(
    in_shape: &[usize],
    axis: usize,
    count: usize,
    g: &Tensor<T>,
) -> Tensor<T> {
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis..].iter().product();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for r in 0..count {
            let src = &g.data()[(o * count + r) * inner..(o * count + r + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

// ---------------------------------------------------------------- elementwise

pub(crate) fn zip_map<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_map("add", a, b, |x, y| x + y)
}

/// `x[..., n] + bias[n]`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().unwrap_or(&1);
    if bias.rank() != 1 || bias.shape()[0] != n || x.rank() == 0 {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o = *o + b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn bias_backward<T: Scalar>(g: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); n];
    for row in g.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::from_parts(vec![n], out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| if v > T::zero() { v } else { T::zero() })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    map(x, |v| {
        half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
    })
}

pub(crate) fn gelu_grad<T: Scalar>(v: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = (c * (v + a * v * v * v)).tanh();
    half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * v * v)
}

// ---------------------------------------------------------------- softmax

/// Softmax along `axis` with max-subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::InvalidAxis {
            op: "softmax",
            axis,
            rank: x.rank(),
        });
    }
    let (outer, len, inner) = outer_inner(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..len {
                let e = (xd[at(j)] - max).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = outer_inner(y.shape(), axis);
    let mut out = vec![T::zero(); y.numel()];
    let (yd, gd) = (y.data(), g.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot = (0..len).fold(T::zero(), |s, j| s + gd[at(j)] * yd[at(j)]);
            for j in 0..len {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

// ---------------------------------------------------------------- normalisation

/// Per-row statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn normalize_rows<T: Scalar>(rows: usize, len: usize, data: &[T], out: &mut [T]) -> NormStats<T> {
    let n = T::of(len as f64);
    let eps = T::of(NORM_EPS);
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * len..(r + 1) * len];
        let mu = row.iter().fold(T::zero(), |s, &v| s + v) / n;
        let var = row.iter().fold(T::zero(), |s, &v| s + (v - mu) * (v - mu)) / n;
        let rs = T::one() / (var + eps).sqrt();
        for (o, &v) in out[r * len..(r + 1) * len].iter_mut().zip(row) {
            *o = (v - mu) * rs;
        }
        mean.push(mu);
        rstd.push(rs);
    }
    NormStats { mean, rstd }
}

/// Gradient through `xhat = (x - mean) * rstd` for each row, given `d xhat`.
fn normalize_rows_backward<T: Scalar>(
    rows: usize,
    len: usize,
    x: &[T],
    stats: &NormStats<T>,
    dxhat: &[T],
    dx: &mut [T],
) {
    let n = T::of(len as f64);
    for r in 0..rows {
        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
        let xr = &x[r * len..(r + 1) * len];
        let gr = &dxhat[r * len..(r + 1) * len];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&g, &v) in gr.iter().zip(xr) {
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * (v - mu) * rs;
        }
        let (mg, mgx) = (sum_g / n, sum_gx / n);
        for ((d, &g), &v) in dx[r * len..(r + 1) * len].iter_mut().zip(gr).zip(xr) {
            *d = rs * (g - mg - (v - mu) * rs * mgx);
        }
    }
}

/// Layer normalisation over the last axis, with optional per-feature affine.
pub(crate) fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    affine: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let len = *x.shape().last().ok_or(Error::InvalidShape {
        op: "layer_norm",
        msg: "rank 0".into(),
    })?;
    if let Some((g, b)) = affine {
        if g.shape() != [len] || b.shape() != [len] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let rows = x.numel() / len;
    let mut out = vec![T::zero(); x.numel()];
    let stats = normalize_rows(rows, len, x.data(), &mut out);
    if let Some((g, b)) = affine {
        for row in out.chunks_mut(len) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), stats))
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: Option<&Tensor<T>>,
    stats: &NormStats<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Option<(Tensor<T>, Tensor<T>)>) {
    let len = *x.shape().last().unwrap();
    let rows = x.numel() / len;
    let mut dxhat = g.data().to_vec();
    let mut affine_grads = None;
    if let Some(gamma) = gamma {
        let mut dg = vec![T::zero(); len];
        let mut db = vec![T::zero(); len];
        for r in 0..rows {
            let (mu, rs) = (stats.mean[r], stats.rstd[r]);
            for j in 0..len {
                let i = r * len + j;
                let xhat = (x.data()[i] - mu) * rs;
                dg[j] = dg[j] + g.data()[i] * xhat;
                db[j] = db[j] + g.data()[i];
                dxhat[i] = g.data()[i] * gamma.data()[j];
            }
        }
        affine_grads = Some((
            Tensor::from_parts(vec![len], dg),
            Tensor::from_parts(vec![len], db),
        ));
    }
    let mut dx = vec![T::zero(); x.numel()];
    normalize_rows_backward(rows, len, x.data(), stats, &dxhat, &mut dx);
    (Tensor::from_parts(x.shape().to_vec(), dx), affine_grads)
}

/// Group normalisation of `N×C×...` features with per-channel affine.
pub(crate) fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, NormStats<T>)> {
    if x.rank() < 2 {
        return Err(Error::InvalidShape {
            op: "group_norm",
            msg: format!("rank {} < 2", x.rank()),
        });
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if groups == 0 || c % groups != 0 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::InvalidShape {
            op: "group_norm",
            msg: format!("{c} channels, {groups} groups, affine {:?}", gamma.shape()),
        });
    }
    let spatial = x.numel() / (n * c);
    let len = c / groups * spatial;
    let mut out = vec![T::zero(); x.numel()];
    let stats = normalize_rows(n * groups, len, x.data(), &mut out);
    for (ci, plane) in out.chunks_mut(spatial).enumerate() {
        let ch = ci % c;
        let (gv, bv) = (gamma.data()[ch], beta.data()[ch]);
        for o in plane {
            *o = *o * gv + bv;
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), stats))
}

pub(crate) fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let spatial = x.numel() / (n * c);
    let cpg = c / groups;
    let len = cpg * spatial;
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); x.numel()];
    for ci in 0..n * c {
        let ch = ci % c;
        let row = ci / cpg; // (n, group) row index
        let (mu, rs) = (stats.mean[row], stats.rstd[row]);
        for s in 0..spatial {
            let i = ci * spatial + s;
            let gv = g.data()[i];
            dg[ch] = dg[ch] + gv * (x.data()[i] - mu) * rs;
            db[ch] = db[ch] + gv;
            dxhat[i] = gv * gamma.data()[ch];
        }
    }
    let mut dx = vec![T::zero(); x.numel()];
    normalize_rows_backward(n * groups, len, x.data(), stats, &dxhat, &mut dx);
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dg),
        Tensor::from_parts(vec![c], db),
    )
}

// ---------------------------------------------------------------- convolution

fn conv_planes(op: &'static str, x: [usize; 5], geom: Conv3dGeometry) -> Result<Planes> {
    let ext_in = [x[2], x[3], x[4]];
    let ext_out = geom.out_extents(ext_in).map_err(|e| match e {
        Error::NonPositiveExtent {
            axis,
            input,
            kernel,
            stride,
            pad,
            ..
        } => Error::NonPositiveExtent {
            op,
            axis,
            input,
            kernel,
            stride,
            pad,
        },
        other => other,
    })?;
    Ok(Planes {
        ext_in,
        ext_out,
        geom,
    })
}

/// Depthwise 3D convolution: channel `c` of the output reads only channel
/// `c` of the input. `kernel` is `C×kt×kh×kw`; padding is zero-padding.
pub fn conv3d_depthwise<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>> {
    let [n, c, ..] = video_dims("conv3d_depthwise", x)?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[0] != c {
        return Err(Error::ShapeMismatch {
            op: "conv3d_depthwise",
            lhs: x.shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let geom = Conv3dGeometry::new([ks[1], ks[2], ks[3]], stride, pad);
    let p = conv_planes("conv3d_depthwise", video_dims("", x)?, geom)?;
    let (vin, vout, kv) = (p.in_volume(), p.out_volume(), geom.volume());
    let mut out = vec![T::zero(); n * c * vout];
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * vin;
            let oplane = (ni * c + ci) * vout;
            for (ti, tap) in p.taps().enumerate() {
                let w = kernel.data()[ci * kv + ti];
                p.accumulate(
                    &mut out[oplane..oplane + vout],
                    &x.data()[plane..plane + vin],
                    w,
                    tap,
                );
            }
        }
    }
    let [to, ho, wo] = p.ext_out;
    Ok(Tensor::from_parts(vec![n, c, to, ho, wo], out))
}

pub(crate) fn conv3d_depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: Conv3dGeometry,
    g: &Tensor<T>,
    need_x: bool,
    need_k: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let dims = video_dims("", x).expect("validated");
    let [n, c, ..] = dims;
    let p = conv_planes("conv3d_depthwise", dims, geom).expect("validated");
    let (vin, vout, kv) = (p.in_volume(), p.out_volume(), geom.volume());
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dk = need_k.then(|| vec![T::zero(); kernel.numel()]);
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * vin;
            let oplane = (ni * c + ci) * vout;
            let gp = &g.data()[oplane..oplane + vout];
            for (ti, tap) in p.taps().enumerate() {
                if let Some(dx) = dx.as_mut() {
                    let w = kernel.data()[ci * kv + ti];
                    p.scatter(&mut dx[plane..plane + vin], gp, w, tap);
                }
                if let Some(dk) = dk.as_mut() {
                    let v = p.correlate(gp, &x.data()[plane..plane + vin], tap);
                    dk[ci * kv + ti] = dk[ci * kv + ti] + v;
                }
            }
        }
    }
    (
        dx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
        dk.map(|v| Tensor::from_parts(kernel.shape().to_vec(), v)),
    )
}

/// Dense 3D convolution, weight `C_out×C_in×kt×kh×kw`, no bias.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>> {
    let dims = video_dims("conv3d", x)?;
    let [n, ci_n, ..] = dims;
    let ws = weight.shape();
    if ws.len() != 5 || ws[1] != ci_n {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            lhs: x.shape().to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let co_n = ws[0];
    let geom = Conv3dGeometry::new([ws[2], ws[3], ws[4]], stride, pad);
    let p = conv_planes("conv3d", dims, geom)?;
    let (vin, vout, kv) = (p.in_volume(), p.out_volume(), geom.volume());
    let mut out = vec![T::zero(); n * co_n * vout];
    for ni in 0..n {
        for co in 0..co_n {
            let oplane = (ni * co_n + co) * vout;
            for ci in 0..ci_n {
                let plane = (ni * ci_n + ci) * vin;
                for (ti, tap) in p.taps().enumerate() {
                    let w = weight.data()[(co * ci_n + ci) * kv + ti];
                    p.accumulate(
                        &mut out[oplane..oplane + vout],
                        &x.data()[plane..plane + vin],
                        w,
                        tap,
                    );
                }
            }
        }
    }
    let [to, ho, wo] = p.ext_out;
    Ok(Tensor::from_parts(vec![n, co_n, to, ho, wo], out))
}

pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geom: Conv3dGeometry,
    g: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let dims = video_dims("", x).expect("validated");
    let [n, ci_n, ..] = dims;
    let co_n = weight.shape()[0];
    let p = conv_planes("conv3d", dims, geom).expect("validated");
    let (vin, vout, kv) = (p.in_volume(), p.out_volume(), geom.volume());
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_w.then(|| vec![T::zero(); weight.numel()]);
    for ni in 0..n {
        for co in 0..co_n {
            let oplane = (ni * co_n + co) * vout;
            let gp = &g.data()[oplane..oplane + vout];
            for ci in 0..ci_n {
                let plane = (ni * ci_n + ci) * vin;
                for (ti, tap) in p.taps().enumerate() {
                    let wi = (co * ci_n + ci) * kv + ti;
                    if let Some(dx) = dx.as_mut() {
                        p.scatter(&mut dx[plane..plane + vin], gp, weight.data()[wi], tap);
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[wi] = dw[wi] + p.correlate(gp, &x.data()[plane..plane + vin], tap);
                    }
                }
            }
        }
    }
    (
        dx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
        dw.map(|v| Tensor::from_parts(weight.shape().to_vec(), v)),
    )
}

/// 1×1×1 convolution: per-position channel mixing with weight `C_out×C`.
pub fn conv3d_pointwise<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, t, h, w] = video_dims("conv3d_pointwise", x)?;
    if weight.rank() != 2 || weight.shape()[1] != c {
        return Err(Error::ShapeMismatch {
            op: "conv3d_pointwise",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let co_n = weight.shape()[0];
    let pos = t * h * w;
    let mut out = vec![T::zero(); n * co_n * pos];
    for ni in 0..n {
        let xs = &x.data()[ni * c * pos..(ni + 1) * c * pos];
        let os = &mut out[ni * co_n * pos..(ni + 1) * co_n * pos];
        for co in 0..co_n {
            let orow = &mut os[co * pos..(co + 1) * pos];
            for ci in 0..c {
                let wv = weight.data()[co * c + ci];
                for (o, &xv) in orow.iter_mut().zip(&xs[ci * pos..(ci + 1) * pos]) {
                    *o = *o + wv * xv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, co_n, t, h, w], out))
}

pub(crate) fn conv3d_pointwise_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let co_n = weight.shape()[0];
    let pos = x.numel() / (n * c);
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_w.then(|| vec![T::zero(); weight.numel()]);
    for ni in 0..n {
        let xs = &x.data()[ni * c * pos..(ni + 1) * c * pos];
        let gs = &g.data()[ni * co_n * pos..(ni + 1) * co_n * pos];
        if let Some(dx) = dx.as_mut() {
            let ds = &mut dx[ni * c * pos..(ni + 1) * c * pos];
            for ci in 0..c {
                let drow = &mut ds[ci * pos..(ci + 1) * pos];
                for co in 0..co_n {
                    let wv = weight.data()[co * c + ci];
                    for (d, &gv) in drow.iter_mut().zip(&gs[co * pos..(co + 1) * pos]) {
                        *d = *d + wv * gv;
                    }
                }
            }
        }
        if let Some(dw) = dw.as_mut() {
            for co in 0..co_n {
                let grow = &gs[co * pos..(co + 1) * pos];
                for ci in 0..c {
                    let dot = grow
                        .iter()
                        .zip(&xs[ci * pos..(ci + 1) * pos])
                        .fold(T::zero(), |s, (&a, &b)| s + a * b);
                    dw[co * c + ci] = dw[co * c + ci] + dot;
                }
            }
        }
    }
    (
        dx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
        dw.map(|v| Tensor::from_parts(weight.shape().to_vec(), v)),
    )
}

// ---------------------------------------------------------------- pooling

/// Mean over `H×W` of each frame: `N×C×T×H×W -> N×T×C`.
pub fn avg_pool_per_frame<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, t, h, w] = video_dims("avg_pool_per_frame", x)?;
    let hw = h * w;
    let denom = T::of(hw as f64);
    let mut out = vec![T::zero(); n * t * c];
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                let base = ((ni * c + ci) * t + ti) * hw;
                let s = x.data()[base..base + hw]
                    .iter()
                    .fold(T::zero(), |s, &v| s + v);
                out[(ni * t + ti) * c + ci] = s / denom;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, t, c], out))
}

pub(crate) fn avg_pool_per_frame_backward<T: Scalar>(
    in_shape: &[usize],
    g: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, t, h, w]: [usize; 5] = in_shape.try_into().expect("rank 5");
    let hw = h * w;
    let denom = T::of(hw as f64);
    let mut out = vec![T::zero(); n * c * t * hw];
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                let v = g.data()[(ni * t + ti) * c + ci] / denom;
                let base = ((ni * c + ci) * t + ti) * hw;
                out[base..base + hw].fill(v);
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

/// Mean over `T×H×W`: `N×C×T×H×W -> N×C`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, t, h, w] = video_dims("global_avg_pool", x)?;
    let vol = t * h * w;
    let denom = T::of(vol as f64);
    let out = x
        .data()
        .chunks(vol)
        .map(|plane| plane.iter().fold(T::zero(), |s, &v| s + v) / denom)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(in_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let vol: usize = in_shape[2..].iter().product();
    let denom = T::of(vol as f64);
    let mut out = Vec::with_capacity(g.numel() * vol);
    for &v in g.data() {
        out.extend(std::iter::repeat_n(v / denom, vol));
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

// ---------------------------------------------------------------- dynamic ReLU

/// Coefficient ranges of the dynamic ReLU: `a = init + λa(2σ(u) − 1)`,
/// `b = λb(2σ(u) − 1)`, with `init = (1, 0)` for the two pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DyReluRange {
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl Default for DyReluRange {
    fn default() -> Self {
        Self {
            lambda_a: 1.0,
            lambda_b: 0.5,
        }
    }
}

/// Raw generator output `[..., 4C]` to coefficients `[..., C, 4]` laid out
/// as `(a1, b1, a2, b2)` per channel.
pub fn dyrelu_coeffs<T: Scalar>(u: &Tensor<T>, range: DyReluRange) -> Result<Tensor<T>> {
    let last = *u.shape().last().unwrap_or(&0);
    if u.rank() == 0 || !last.is_multiple_of(4) {
        return Err(Error::InvalidShape {
            op: "dyrelu_coeffs",
            msg: format!("last axis must be a multiple of 4, got {:?}", u.shape()),
        });
    }
    let (la, lb) = (T::of(range.lambda_a), T::of(range.lambda_b));
    let two = T::of(2.0);
    let data = u
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = two * sigmoid(v) - T::one();
            match i % 4 {
                0 => T::one() + la * s,
                2 => la * s,
                _ => lb * s,
            }
        })
        .collect();
    let mut shape = u.shape().to_vec();
    *shape.last_mut().unwrap() = last / 4;
    shape.push(4);
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn dyrelu_coeffs_backward<T: Scalar>(
    u: &Tensor<T>,
    range: DyReluRange,
    g: &Tensor<T>,
) -> Tensor<T> {
    let (la, lb) = (T::of(range.lambda_a), T::of(range.lambda_b));
    let two = T::of(2.0);
    let data = u
        .data()
        .iter()
        .zip(g.data())
        .enumerate()
        .map(|(i, (&v, &gv))| {
            let s = sigmoid(v);
            let ds = two * s * (T::one() - s);
            let lambda = if i % 2 == 0 { la } else { lb };
            gv * lambda * ds
        })
        .collect();
    Tensor::from_parts(u.shape().to_vec(), data)
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn dyrelu_dims<T: Scalar>(x: &Tensor<T>, coeffs: &Tensor<T>) -> Result<[usize; 6]> {
    let [n, c, t, h, w] = video_dims("dyrelu_apply", x)?;
    let cs = coeffs.shape();
    if cs.len() != 4 || cs[0] != n || (cs[1] != t && cs[1] != 1) || cs[2] != c || cs[3] != 4 {
        return Err(Error::ShapeMismatch {
            op: "dyrelu_apply",
            lhs: x.shape().to_vec(),
            rhs: cs.to_vec(),
        });
    }
    Ok([n, c, t, h * w, cs[1], 0])
}

/// `y = max(a1 x + b1, a2 x + b2)` with coefficients per (sample, frame,
/// channel). `coeffs` is `N×T×C×4`, or `N×1×C×4` to share across frames.
pub fn dyrelu_apply<T: Scalar>(x: &Tensor<T>, coeffs: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, t, hw, tc, _] = dyrelu_dims(x, coeffs)?;
    let mut out = vec![T::zero(); x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                let k = ((ni * tc + ti.min(tc - 1)) * c + ci) * 4;
                let cf = &coeffs.data()[k..k + 4];
                let base = ((ni * c + ci) * t + ti) * hw;
                for i in base..base + hw {
                    let v = x.data()[i];
                    let y1 = cf[0] * v + cf[1];
                    let y2 = cf[2] * v + cf[3];
                    out[i] = if y1 >= y2 { y1 } else { y2 };
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn dyrelu_apply_backward<T: Scalar>(
    x: &Tensor<T>,
    coeffs: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
    need_c: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, c, t, hw, tc, _] = dyrelu_dims(x, coeffs).expect("validated");
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dc = need_c.then(|| vec![T::zero(); coeffs.numel()]);
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                let k = ((ni * tc + ti.min(tc - 1)) * c + ci) * 4;
                let cf = [
                    coeffs.data()[k],
                    coeffs.data()[k + 1],
                    coeffs.data()[k + 2],
                    coeffs.data()[k + 3],
                ];
                let base = ((ni * c + ci) * t + ti) * hw;
                let mut acc = [T::zero(); 4];
                for i in base..base + hw {
                    let v = x.data()[i];
                    let gv = g.data()[i];
                    let first = cf[0] * v + cf[1] >= cf[2] * v + cf[3];
                    let slot = if first { 0 } else { 2 };
                    if let Some(dx) = dx.as_mut() {
                        dx[i] = gv * cf[slot];
                    }
                    acc[slot] = acc[slot] + gv * v;
                    acc[slot + 1] = acc[slot + 1] + gv;
                }
                if let Some(dc) = dc.as_mut() {
                    for j in 0..4 {
                        dc[k + j] = dc[k + j] + acc[j];
                    }
                }
            }
        }
    }
    (
        dx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
        dc.map(|v| Tensor::from_parts(coeffs.shape().to_vec(), v)),
    )
}

// ---------------------------------------------------------------- loss

/// Mean softmax cross-entropy over rows of `logits` (`N×K`). Returns the
/// loss and the row-wise probabilities.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            msg: format!("logits {:?} with {} labels", logits.shape(), labels.len()),
        });
    }
    let k = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            msg: format!("label {bad} out of range for {k} classes"),
        });
    }
    let probs = softmax(logits, 1)?;
    let mut loss = T::zero();
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
        loss = loss + (lse - row[l]);
    }
    Ok((loss / T::of(labels.len() as f64), probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_cases() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &id).unwrap(), a);
        let i3 = Tensor::<f64>::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::<f64>::from_fn(vec![3, 5], |i| i as f64 * 0.5 - 2.0);
        assert_eq!(matmul(&i3, &b).unwrap(), b);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_shared_rhs() {
        let a = Tensor::<f64>::from_fn(vec![2, 3, 2, 4], |i| (i % 7) as f64);
        let b = Tensor::<f64>::from_fn(vec![3, 4, 5], |i| (i % 5) as f64 - 1.0);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2, 5]);
        // batch (1, 2) uses b[2]
        let a12 = index_axis(&index_axis(&a, 0, 1).unwrap(), 0, 2).unwrap();
        let b2 = index_axis(&b, 0, 2).unwrap();
        let expect = matmul(&a12, &b2).unwrap();
        let got = index_axis(&index_axis(&out, 0, 1).unwrap(), 0, 2).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn softmax_small_cases() {
        let s = softmax(&t(&[3], &[0.0, 0.0, 0.0]), 0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&t(&[1], &[42.0]), 0).unwrap().data(), &[1.0]);
        assert!(softmax(&t(&[3], &[0.0; 3]), 1).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::<f64>::from_fn(vec![3, 5], |i| (i as f64 * 0.37).sin() * 3.0);
        let shifted = map(&x, |v| v + 17.25);
        for axis in 0..2 {
            let a = softmax(&x, axis).unwrap();
            let b = softmax(&shifted, axis).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    #[test]
    fn extent_formula_and_rejection() {
        let g = Conv3dGeometry::new([3, 3, 3], [4, 2, 1], [1, 1, 1]);
        assert_eq!(g.out_extents([64, 7, 5]).unwrap(), [16, 4, 5]);
        let g = Conv3dGeometry::new([3, 3, 3], [1, 1, 1], [0, 0, 0]);
        assert!(matches!(
            g.out_extents([2, 5, 5]),
            Err(Error::NonPositiveExtent { axis: 0, .. })
        ));
    }

    #[test]
    fn depthwise_identity_and_counting() {
        let x = Tensor::<f64>::from_fn(vec![1, 2, 3, 4, 5], |i| i as f64 * 0.1);
        let mut k = Tensor::<f64>::zeros(vec![2, 3, 3, 3]);
        k.set(&[0, 1, 1, 1], 1.0);
        k.set(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv3d_depthwise(&x, &k, [1, 1, 1], [1, 1, 1]).unwrap(), x);

        let ones = Tensor::<f64>::ones(vec![1, 1, 4, 4, 4]);
        let k = Tensor::<f64>::ones(vec![1, 3, 3, 3]);
        let y = conv3d_depthwise(&ones, &k, [1, 1, 1], [1, 1, 1]).unwrap();
        assert_eq!(y.get(&[0, 0, 1, 1, 1]), 27.0);
        assert_eq!(y.get(&[0, 0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn pointwise_small_cases() {
        let x = Tensor::<f64>::from_fn(vec![2, 2, 1, 2, 2], |i| i as f64);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(conv3d_pointwise(&x, &id).unwrap(), x);
        let sum = conv3d_pointwise(&x, &t(&[1, 2], &[1.0, 1.0])).unwrap();
        assert_eq!(sum.shape(), &[2, 1, 1, 2, 2]);
        assert_eq!(
            sum.get(&[1, 0, 0, 1, 0]),
            x.get(&[1, 0, 0, 1, 0]) + x.get(&[1, 1, 0, 1, 0])
        );
        assert!(conv3d_pointwise(&x, &t(&[1, 3], &[1.0; 3])).is_err());
    }

    #[test]
    fn frame_pool_small_cases() {
        let x = Tensor::<f64>::full(vec![2, 3, 4, 5, 6], 2.5);
        let p = avg_pool_per_frame(&x).unwrap();
        assert_eq!(p.shape(), &[2, 4, 3]);
        assert!(p.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        let x = Tensor::<f64>::from_fn(vec![1, 3, 2, 1, 1], |i| i as f64);
        let p = avg_pool_per_frame(&x).unwrap();
        assert_eq!(p.get(&[0, 1, 2]), x.get(&[0, 2, 1, 0, 0]));
    }

    #[test]
    fn dyrelu_identity_and_relu() {
        let x = Tensor::<f64>::from_fn(vec![1, 2, 2, 2, 2], |i| i as f64 - 7.5);
        let id = Tensor::<f64>::from_fn(vec![1, 2, 2, 4], |i| [1.0, 0.0, 1.0, 0.0][i % 4]);
        assert_eq!(dyrelu_apply(&x, &id).unwrap(), x);
        let u = Tensor::<f64>::zeros(vec![1, 1, 8]);
        let c = dyrelu_coeffs(&u, DyReluRange::default()).unwrap();
        assert_eq!(c.shape(), &[1, 1, 2, 4]);
        assert_eq!(c.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(dyrelu_apply(&x, &c).unwrap(), relu(&x));
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        let axes = [2, 0, 1];
        let y = permute(&x, &axes).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        assert_eq!(permute(&y, &inverse_permutation(&axes)).unwrap(), x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = Tensor::<f64>::zeros(vec![2, 4]);
        let (loss, _) = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-14);
        assert!(cross_entropy(&logits, &[0, 4]).is_err());
    }
}
