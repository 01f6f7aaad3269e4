//! Naive-loop oracles and finite-difference helpers shared by the
//! integration tests. Nothing here calls the library's kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmf_core::{Graph, Result, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `[-1, 1)`.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// `max|a − b| / max(‖a‖∞, ‖b‖∞)`, 0 when both are zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let err = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        0.0
    } else {
        err / scale
    }
}

pub fn idx(shape: &[usize], at: &[usize]) -> usize {
    shape.iter().zip(at).fold(0, |acc, (&s, &i)| acc * s + i)
}

/// Batched product over the last two axes; `b` may have fewer leading axes
/// and is then shared.
pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (ash, bsh) = (a.shape(), b.shape());
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = bsh[bsh.len() - 1];
    assert_eq!(bsh[bsh.len() - 2], k);
    let batch: usize = ash[..ash.len() - 2].iter().product();
    let b_batch: usize = bsh[..bsh.len() - 2].iter().product();
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let bj = bi % b_batch;
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[(bi * m + i) * k + p] * b.data()[(bj * k + p) * n + j];
                }
                out[(bi * m + i) * n + j] = s;
            }
        }
    }
    let mut shape = ash[..ash.len() - 2].to_vec();
    shape.extend([m, n]);
    Tensor::new(shape, out).unwrap()
}

fn out_len(l: usize, k: usize, s: usize, p: usize) -> usize {
    (l + 2 * p - k) / s + 1
}

/// Input coordinate read by output `o` at tap `k`, if inside the input.
fn src(o: usize, k: usize, s: usize, p: usize, l: usize) -> Option<usize> {
    let i = (o * s + k) as isize - p as isize;
    (0..l as isize).contains(&i).then_some(i as usize)
}

/// Dense convolution, weight `Co×Ci×kt×kh×kw`, zero padding.
pub fn conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor<f64> {
    let &[n, ci, t, h, wd] = x.shape() else {
        panic!("rank 5")
    };
    let &[co, wci, kt, kh, kw] = w.shape() else {
        panic!("rank 5")
    };
    assert_eq!(ci, wci);
    let (ot, oh, ow) = (
        out_len(t, kt, stride[0], pad[0]),
        out_len(h, kh, stride[1], pad[1]),
        out_len(wd, kw, stride[2], pad[2]),
    );
    let shape = vec![n, co, ot, oh, ow];
    let mut out = Tensor::zeros(shape.clone());
    for b in 0..n {
        for o in 0..co {
            for a in 0..ot {
                for y in 0..oh {
                    for z in 0..ow {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for dt in 0..kt {
                                for dy in 0..kh {
                                    for dz in 0..kw {
                                        let (Some(it), Some(iy), Some(iz)) = (
                                            src(a, dt, stride[0], pad[0], t),
                                            src(y, dy, stride[1], pad[1], h),
                                            src(z, dz, stride[2], pad[2], wd),
                                        ) else {
                                            continue;
                                        };
                                        s +=
                                            x.get(&[b, c, it, iy, iz]) * w.get(&[o, c, dt, dy, dz]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, o, a, y, z], s);
                    }
                }
            }
        }
    }
    out
}

/// Depthwise convolution, kernel `C×kt×kh×kw`.
pub fn conv3d_depthwise(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor<f64> {
    let c = x.shape()[1];
    let ks = k.shape();
    // A depthwise kernel is a dense one that is zero off the diagonal.
    let mut dense = Tensor::zeros(vec![c, c, ks[1], ks[2], ks[3]]);
    for ch in 0..c {
        for a in 0..ks[1] {
            for b in 0..ks[2] {
                for d in 0..ks[3] {
                    dense.set(&[ch, ch, a, b, d], k.get(&[ch, a, b, d]));
                }
            }
        }
    }
    conv3d(x, &dense, stride, pad)
}

/// 1×1×1 convolution, weight `Co×Ci`.
pub fn conv3d_pointwise(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let s = w.shape();
    let w5 = w.clone().reshape(vec![s[0], s[1], 1, 1, 1]).unwrap();
    conv3d(x, &w5, [1, 1, 1], [0, 0, 0])
}

/// Row-wise layer normalisation over the last axis, eps 1e-5, no affine.
pub fn layer_norm(x: &Tensor<f64>) -> Tensor<f64> {
    let d = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mu) * rs);
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Single-head scaled dot-product attention on `[Lq, D]`, `[Lk, D]`,
/// `[Lk, Dv]` row slices.
fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor<f64>, batch: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
    (0..l)
        .map(|i| t.data()[(batch * l + i) * d..(batch * l + i + 1) * d].to_vec())
        .collect()
}

fn from_rows(batches: Vec<Vec<Vec<f64>>>, lead: &[usize]) -> Tensor<f64> {
    let (l, d) = (batches[0].len(), batches[0][0].len());
    let mut shape = lead.to_vec();
    shape.extend([l, d]);
    Tensor::new(shape, batches.into_iter().flatten().flatten().collect()).unwrap()
}

/// `softmax(QKᵀ/√D)V` over any number of leading batch axes.
pub fn attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let lead = &q.shape()[..q.rank() - 2];
    let batch: usize = lead.iter().product();
    let out = (0..batch)
        .map(|b| attend(&rows(q, b), &rows(k, b), &rows(v, b)))
        .collect();
    from_rows(out, lead)
}

/// Columns `[h·w, (h+1)·w)` of every row.
fn head_cols(r: &[Vec<f64>], h: usize, w: usize) -> Vec<Vec<f64>> {
    r.iter()
        .map(|row| row[h * w..(h + 1) * w].to_vec())
        .collect()
}

fn project(r: &[Vec<f64>], w: &Tensor<f64>, head: usize) -> Vec<Vec<f64>> {
    let s = w.shape();
    let (din, dout) = (s[s.len() - 2], s[s.len() - 1]);
    let off = if s.len() == 3 { head * din * dout } else { 0 };
    r.iter()
        .map(|row| {
            (0..dout)
                .map(|j| {
                    (0..din)
                        .map(|i| row[i] * w.data()[off + i * dout + j])
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Local→token bridge: tokens `z` `[B, M, d]` read features `x` `[B, L, C]`.
/// `w_q` is `H × d/H × C/H`, `w_o` is `C × d`.
pub fn bridge_in(
    z: &Tensor<f64>,
    x: &Tensor<f64>,
    w_q: &Tensor<f64>,
    w_o: &Tensor<f64>,
    heads: usize,
) -> Tensor<f64> {
    let (b, d, c) = (z.shape()[0], z.shape()[2], x.shape()[2]);
    let zn = layer_norm(z);
    let out = (0..b)
        .map(|bi| {
            let (zr, xr) = (rows(&zn, bi), rows(x, bi));
            let mut merged = vec![Vec::with_capacity(c); zr.len()];
            for h in 0..heads {
                let q = project(&head_cols(&zr, h, d / heads), w_q, h);
                let xh = head_cols(&xr, h, c / heads);
                for (m, a) in merged.iter_mut().zip(attend(&q, &xh, &xh)) {
                    m.extend(a);
                }
            }
            project(&merged, w_o, 0)
        })
        .collect();
    from_rows(out, &[b])
}

/// Token→local bridge: features `x` `[B, L, C]` query tokens `z`
/// `[B, M, d]`. `w_k`, `w_v` are `H × d/H × C/H`.
pub fn bridge_out(
    x: &Tensor<f64>,
    z: &Tensor<f64>,
    w_k: &Tensor<f64>,
    w_v: &Tensor<f64>,
    heads: usize,
) -> Tensor<f64> {
    let (b, d, c) = (z.shape()[0], z.shape()[2], x.shape()[2]);
    let zn = layer_norm(z);
    let out = (0..b)
        .map(|bi| {
            let (zr, xr) = (rows(&zn, bi), rows(x, bi));
            let mut merged = vec![Vec::with_capacity(c); xr.len()];
            for h in 0..heads {
                let zh = head_cols(&zr, h, d / heads);
                let (k, v) = (project(&zh, w_k, h), project(&zh, w_v, h));
                for (m, a) in merged
                    .iter_mut()
                    .zip(attend(&head_cols(&xr, h, c / heads), &k, &v))
                {
                    m.extend(a);
                }
            }
            merged
        })
        .collect();
    from_rows(out, &[b])
}

/// Central differences of `f` with respect to every element of every input.
pub fn numeric_grads(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&[Tensor<f64>]) -> f64,
) -> Vec<Tensor<f64>> {
    let mut work = inputs.to_vec();
    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Tensor::from_fn(t.shape().to_vec(), |e| {
                let orig = work[i].data()[e];
                work[i].data_mut()[e] = orig + h;
                let fp = f(&work);
                work[i].data_mut()[e] = orig - h;
                let fm = f(&work);
                work[i].data_mut()[e] = orig;
                (fp - fm) / (2.0 * h)
            })
        })
        .collect()
}

/// Scalar probe `Σ gelu(y + r)` with a fixed random offset `r`, so the
/// upstream gradient varies from element to element.
fn probe(g: &mut Graph<f64>, y: Var, salt: u64) -> Result<Var> {
    let mut r = rng(salt);
    let offset = rand_tensor(&mut r, g.shape(y));
    let o = g.input(offset);
    let s = g.add(y, o)?;
    let a = g.gelu(s);
    Ok(g.sum(a))
}

/// Worst relative error between autodiff and central differences for a
/// graph built by `build` from `inputs`, over every input tensor.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |ts: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::with_params(ts);
        let vars: Vec<Var> = (0..ts.len()).map(|i| g.param_var(i)).collect();
        let y = build(&mut g, &vars).unwrap();
        let loss = probe(&mut g, y, 99).unwrap();
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss).unwrap().params(&g);
        (value, grads)
    };
    let (_, analytic) = eval(inputs);
    let numeric = numeric_grads(inputs, 1e-5, |ts| eval(ts).0);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a.data(), n.data()))
        .fold(0.0, f64::max)
}
