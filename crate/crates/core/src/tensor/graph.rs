use super::ops::{self, Conv3dGeometry, DyReluRange, NormStats};
use super::{Scalar, Tensor};
use crate::category::{Category, Tally};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        stats: NormStats<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: NormStats<T>,
    },
    Conv3d(Var, Var, Conv3dGeometry),
    Depthwise(Var, Var, Conv3dGeometry),
    Pointwise(Var, Var),
    AvgPoolFrames(Var),
    GlobalAvgPool(Var),
    Concat(Var, Var),
    IndexAxis {
        x: Var,
        axis: usize,
        index: usize,
    },
    ExpandAxis {
        x: Var,
        axis: usize,
        count: usize,
    },
    DyReluCoeffs(Var, DyReluRange),
    DyReluApply(Var, Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations recorded during a forward pass.
///
/// Every op adds its arithmetic cost (one unit per multiply-accumulate for
/// products and convolutions, one unit per output element for elementwise,
/// normalisation and softmax ops, one per input element for pooling; layout
/// ops are free) to the tally under the current category.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    category: Category,
    tally: Tally,
    num_params: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            category: Category::Stem,
            tally: Tally::default(),
            num_params: 0,
        }
    }

    /// A graph whose first nodes are the given parameters, so parameter `i`
    /// is always `Var(i)`.
    pub fn with_params<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let mut g = Self::new();
        for p in params {
            g.param(p.clone());
        }
        g.num_params = g.nodes.len();
        g
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Handle of parameter `i` of a graph made by [`Graph::with_params`].
    pub fn param_var(&self, i: usize) -> Var {
        assert!(
            i < self.num_params,
            "parameter {i} out of range ({})",
            self.num_params
        );
        Var(i)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn set_category(&mut self, cat: Category) -> Category {
        std::mem::replace(&mut self.category, cat)
    }

    pub fn category(&self) -> Category {
        self.category
    }

    pub fn tally(&self) -> &Tally {
        &self.tally
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], cost: usize) -> Var {
        self.tally.add(self.category, cost as u64);
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let cost = ops::matmul_macs(self.shape(a), self.shape(b)) as usize;
        Ok(self.record(out, Op::MatMul(a, b), &[a, b], cost))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(x), axes)?;
        Ok(self.record(out, Op::Permute(x, axes.to_vec()), &[x], 0))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: format!("rank {r} < 2"),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.record(out, Op::Reshape(x), &[x], 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let n = out.numel();
        Ok(self.record(out, Op::Add(a, b), &[a, b], n))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(self.value(x), self.value(bias))?;
        let n = out.numel();
        Ok(self.record(out, Op::AddBias(x, bias), &[x, bias], n))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = ops::map(self.value(x), |v| v * s);
        let n = out.numel();
        self.record(out, Op::Scale(x, s), &[x], n)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let n = out.numel();
        self.record(out, Op::Relu(x), &[x], n)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let n = out.numel();
        self.record(out, Op::Gelu(x), &[x], n)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        let n = out.numel();
        Ok(self.record(out, Op::Softmax(x, axis), &[x], n))
    }

    /// Layer normalisation over the last axis; `affine = (gamma, beta)`.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        let (out, stats) = ops::layer_norm(
            self.value(x),
            affine.map(|(g, b)| (self.value(g), self.value(b))),
        )?;
        let n = out.numel();
        let inputs: Vec<Var> = std::iter::once(x)
            .chain(affine.into_iter().flat_map(|(g, b)| [g, b]))
            .collect();
        Ok(self.record(out, Op::LayerNorm { x, affine, stats }, &inputs, n))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (out, stats) =
            ops::group_norm(self.value(x), groups, self.value(gamma), self.value(beta))?;
        let n = out.numel();
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            stats,
        };
        Ok(self.record(out, op, &[x, gamma, beta], n))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let out = ops::conv3d(self.value(x), self.value(w), stride, pad)?;
        let ws = self.shape(w);
        let geom = Conv3dGeometry::new([ws[2], ws[3], ws[4]], stride, pad);
        let cost = out.numel() * ws[1] * geom.volume();
        Ok(self.record(out, Op::Conv3d(x, w, geom), &[x, w], cost))
    }

    pub fn conv3d_depthwise(
        &mut self,
        x: Var,
        k: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let out = ops::conv3d_depthwise(self.value(x), self.value(k), stride, pad)?;
        let ks = self.shape(k);
        let geom = Conv3dGeometry::new([ks[1], ks[2], ks[3]], stride, pad);
        let cost = out.numel() * geom.volume();
        Ok(self.record(out, Op::Depthwise(x, k, geom), &[x, k], cost))
    }

    pub fn conv3d_pointwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::conv3d_pointwise(self.value(x), self.value(w))?;
        let cost = out.numel() * self.shape(w)[1];
        Ok(self.record(out, Op::Pointwise(x, w), &[x, w], cost))
    }

    pub fn avg_pool_per_frame(&mut self, x: Var) -> Result<Var> {
        let out = ops::avg_pool_per_frame(self.value(x))?;
        let cost = self.value(x).numel();
        Ok(self.record(out, Op::AvgPoolFrames(x), &[x], cost))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        let cost = self.value(x).numel();
        Ok(self.record(out, Op::GlobalAvgPool(x), &[x], cost))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_last(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::Concat(a, b), &[a, b], 0))
    }

    pub fn index_axis(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let out = ops::index_axis(self.value(x), axis, index)?;
        Ok(self.record(out, Op::IndexAxis { x, axis, index }, &[x], 0))
    }

    pub fn expand_axis(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let out = ops::expand_axis(self.value(x), axis, count)?;
        Ok(self.record(out, Op::ExpandAxis { x, axis, count }, &[x], 0))
    }

    pub fn dyrelu_coeffs(&mut self, u: Var, range: DyReluRange) -> Result<Var> {
        let out = ops::dyrelu_coeffs(self.value(u), range)?;
        let n = out.numel();
        Ok(self.record(out, Op::DyReluCoeffs(u, range), &[u], n))
    }

    pub fn dyrelu_apply(&mut self, x: Var, coeffs: Var) -> Result<Var> {
        let out = ops::dyrelu_apply(self.value(x), self.value(coeffs))?;
        let n = out.numel();
        Ok(self.record(out, Op::DyReluApply(x, coeffs), &[x, coeffs], n))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let n = self.value(x).numel();
        self.record(out, Op::Sum(x), &[x], n)
    }

    /// Mean softmax cross-entropy of `N×K` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        let n = probs.numel();
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.record(Tensor::scalar(loss), op, &[logits], n))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(Error::NotScalar(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_val.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        grads.truncate(loss.0 + 1);
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e = *e + *d;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) =
                    ops::matmul_backward(val(*a), val(*b), g, self.needs(*a), self.needs(*b));
                da.into_iter().for_each(|t| acc(*a, t));
                db.into_iter().for_each(|t| acc(*b, t));
            }
            Op::Permute(x, axes) => {
                let inv = ops::inverse_permutation(axes);
                acc(*x, ops::permute(g, &inv).expect("valid permutation"));
            }
            Op::Reshape(x) => {
                acc(
                    *x,
                    g.clone()
                        .reshape(val(*x).shape().to_vec())
                        .expect("same numel"),
                );
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                acc(*b, ops::bias_backward(g, val(*b).numel()));
            }
            Op::Scale(x, s) => acc(*x, ops::map(g, |v| v * *s)),
            Op::Relu(x) => {
                let d = ops::zip_map("relu", val(*x), g, |v, gv| {
                    if v > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                })
                .expect("same shape");
                acc(*x, d);
            }
            Op::Gelu(x) => {
                let d = ops::zip_map("gelu", val(*x), g, |v, gv| gv * ops::gelu_grad(v))
                    .expect("same shape");
                acc(*x, d);
            }
            Op::Softmax(x, axis) => acc(*x, ops::softmax_backward(&node.value, g, *axis)),
            Op::LayerNorm { x, affine, stats } => {
                let gamma = affine.map(|(gm, _)| val(gm));
                let (dx, daff) = ops::layer_norm_backward(val(*x), gamma, stats, g);
                acc(*x, dx);
                if let (Some((gm, bt)), Some((dg, db))) = (affine, daff) {
                    acc(*gm, dg);
                    acc(*bt, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (dx, dg, db) =
                    ops::group_norm_backward(val(*x), *groups, val(*gamma), stats, g);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Conv3d(x, w, geom) => {
                let (dx, dw) = ops::conv3d_backward(
                    val(*x),
                    val(*w),
                    *geom,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                dx.into_iter().for_each(|t| acc(*x, t));
                dw.into_iter().for_each(|t| acc(*w, t));
            }
            Op::Depthwise(x, k, geom) => {
                let (dx, dk) = ops::conv3d_depthwise_backward(
                    val(*x),
                    val(*k),
                    *geom,
                    g,
                    self.needs(*x),
                    self.needs(*k),
                );
                dx.into_iter().for_each(|t| acc(*x, t));
                dk.into_iter().for_each(|t| acc(*k, t));
            }
            Op::Pointwise(x, w) => {
                let (dx, dw) = ops::conv3d_pointwise_backward(
                    val(*x),
                    val(*w),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                dx.into_iter().for_each(|t| acc(*x, t));
                dw.into_iter().for_each(|t| acc(*w, t));
            }
            Op::AvgPoolFrames(x) => acc(*x, ops::avg_pool_per_frame_backward(val(*x).shape(), g)),
            Op::GlobalAvgPool(x) => acc(*x, ops::global_avg_pool_backward(val(*x).shape(), g)),
            Op::Concat(a, b) => {
                let na = *val(*a).shape().last().expect("rank >= 1");
                let (ga, gb) = ops::split_last(g, na);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::IndexAxis { x, axis, index } => {
                acc(
                    *x,
                    ops::index_axis_backward(val(*x).shape(), *axis, *index, g),
                );
            }
            Op::ExpandAxis { x, axis, count } => {
                acc(
                    *x,
                    ops::expand_axis_backward(val(*x).shape(), *axis, *count, g),
                );
            }
            Op::DyReluCoeffs(u, range) => {
                let d = ops::dyrelu_coeffs_backward(val(*u), *range, g);
                acc(*u, d.reshape(val(*u).shape().to_vec()).expect("same numel"));
            }
            Op::DyReluApply(x, c) => {
                let (dx, dc) =
                    ops::dyrelu_apply_backward(val(*x), val(*c), g, self.needs(*x), self.needs(*c));
                dx.into_iter().for_each(|t| acc(*x, t));
                dc.into_iter().for_each(|t| acc(*c, t));
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0])),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.shape()[1];
                let scale = g.data()[0] / T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (row, &l) in d.data_mut().chunks_mut(k).zip(labels) {
                    row[l] = row[l] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                acc(*logits, d);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a differentiable leaf, `None` if the loss does not reach it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when unreachable.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }

    /// Gradients of the graph's registered parameters, in order.
    pub fn params(mut self, graph: &Graph<T>) -> Vec<Tensor<T>> {
        (0..graph.num_params())
            .map(|i| match self.grads.get_mut(i).and_then(Option::take) {
                Some(t) => t,
                None => Tensor::zeros(graph.shape(Var(i)).to_vec()),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(vec![2, 3]));
    }

    #[test]
    fn matmul_sum_gradient_formula() {
        let a_t = Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64 + 1.0);
        let b_t = Tensor::<f64>::from_fn(vec![3, 4], |i| (i as f64) * 0.5 - 1.0);
        let mut g = Graph::new();
        let a = g.param(a_t.clone());
        let b = g.param(b_t.clone());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        let ones = Tensor::<f64>::ones(vec![2, 4]);
        let da = ops::matmul(&ones, &ops::transpose_last2(&b_t).unwrap()).unwrap();
        let db = ops::matmul(&ops::transpose_last2(&a_t).unwrap(), &ones).unwrap();
        assert_eq!(grads.get(a).unwrap(), &da);
        assert_eq!(grads.get(b).unwrap(), &db);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(vec![2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::<f64>::with_params([&Tensor::ones(vec![2]), &Tensor::ones(vec![3])]);
        let s = g.sum(Var(0));
        let grads = g.backward(s).unwrap().params(&g);
        assert_eq!(grads[0], Tensor::ones(vec![2]));
        assert_eq!(grads[1], Tensor::zeros(vec![3]));
    }

    #[test]
    fn tally_follows_category() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::ones(vec![2, 3]));
        let b = g.input(Tensor::ones(vec![3, 5]));
        g.set_category(Category::Head);
        let c = g.matmul(a, b).unwrap();
        g.set_category(Category::FormerFfn);
        g.relu(c);
        assert_eq!(g.tally().get(Category::Head), 30);
        assert_eq!(g.tally().get(Category::FormerFfn), 10);
    }
}
