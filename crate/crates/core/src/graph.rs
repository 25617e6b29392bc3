//! Reverse-mode differentiation over an append-only record of operations.
//!
//! A [`Graph`] is built during one forward pass. Every operation appends a node
//! whose inputs are earlier nodes, so the record is topologically ordered by
//! construction and [`Graph::backward`] visits each node once in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, LayerNormCache};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d { stride: usize, padding: usize, bias: bool },
    Linear { bias: bool },
    Bmm,
    ScaledScores { delta: Option<T> },
    Softmax,
    LayerNorm { cache: LayerNormCache<T> },
    Add,
    AddBroadcast,
    Mul,
    Scale(T),
    Tanh,
    Gelu,
    /// `out[i] = in[index[i]]`
    Gather { index: Arc<Vec<usize>> },
    Reshape,
    MeanTokens,
    CrossEntropy { probs: Tensor<T>, labels: Vec<usize> },
    WeightedSum { weights: Tensor<T> },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
}

/// Differentiation record for one forward pass.
#[derive(Debug)]
pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<Var>) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node { value, op, inputs });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant or differentiable input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, Vec::new())
    }

    /// Leaf bound to a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, path: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let v = self.input(store.get(path)?.clone());
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, path: &str) -> Option<Var> {
        self.params.get(path).copied()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { stride, padding, bias: b.is_some() }, inputs))
    }

    /// Affine map over the trailing axis; leading axes are flattened and restored.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let din = *xs.last().expect("rank >= 1");
        let flat = self.value(x).clone().reshape(&[xs.iter().product::<usize>() / din, din])?;
        let out = ops::linear(&flat, self.value(w), b.map(|b| self.value(b)))?;
        let mut oshape = xs;
        *oshape.last_mut().expect("rank >= 1") = out.shape()[1];
        let out = out.reshape(&oshape)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { bias: b.is_some() }, inputs))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::bmm(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Bmm, vec![a, b]))
    }

    pub fn scaled_scores(&mut self, q: Var, k: Var, delta: Option<T>) -> Result<Var> {
        let out = ops::scaled_scores(self.value(q), self.value(k), delta)?;
        Ok(self.push(out, Op::ScaledScores { delta }, vec![q, k]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = ops::softmax_rows(self.value(x));
        self.push(out, Op::Softmax, vec![x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let (out, cache) = ops::layer_norm(self.value(x), self.value(gain), self.value(shift), eps)?;
        Ok(self.push(out, Op::LayerNorm { cache }, vec![x, gain, shift]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add, vec![a, b]))
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x` (bias-style addition).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape(
                "add_broadcast",
                format!("{bs:?} is not a trailing block of {xs:?}"),
            ));
        }
        let bl = self.value(b).len();
        let mut out = self.value(x).clone();
        let bd = self.value(b).data();
        for chunk in out.data_mut().chunks_mut(bl) {
            for (o, &v) in chunk.iter_mut().zip(bd) {
                *o = *o + v;
            }
        }
        Ok(self.push(out, Op::AddBroadcast, vec![x, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(bd) {
            *o = *o * v;
        }
        Ok(self.push(out, Op::Mul, vec![a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(s), vec![x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh, vec![x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::gelu);
        self.push(out, Op::Gelu, vec![x])
    }

    /// Index gather producing a tensor of `shape`: `out[i] = x[index[i]]`.
    ///
    /// Used for every pure layout change (re-view, window partition, spatial
    /// permutation).
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if index.len() != shape.iter().product::<usize>() || index.iter().any(|&i| i >= src.len()) {
            return Err(Error::shape(
                "gather",
                format!("index of length {} into {:?} as {shape:?}", index.len(), self.shape(x)),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather { index }, vec![x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape, vec![x]))
    }

    /// Mean over axis 1 of `[N, L, C]`, giving `[N, C]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let &[n, l, c] = self.shape(x) else {
            return Err(Error::shape("mean_tokens", format!("expected [N,L,C], got {:?}", self.shape(x))));
        };
        let lf = T::lit(l as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for t in 0..l {
                for j in 0..c {
                    out[b * c + j] = out[b * c + j] + xd[(b * l + t) * c + j];
                }
            }
        }
        for v in &mut out {
            *v = *v / lf;
        }
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(out, Op::MeanTokens, vec![x]))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, k] = self.shape(logits) else {
            return Err(Error::shape("cross_entropy", format!("expected [N,K], got {:?}", self.shape(logits))));
        };
        if labels.len() != n || labels.iter().any(|&y| y >= k) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} labels for {n} rows of {k} classes", labels.len()),
            ));
        }
        let probs = ops::softmax_rows(self.value(logits));
        let mut loss = T::zero();
        for (row, &y) in probs.data().chunks(k).zip(labels) {
            loss = loss - row[y].ln();
        }
        let loss = loss / T::lit(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { probs, labels: labels.to_vec() },
            vec![logits],
        ))
    }

    /// `sum_i x[i] * weights[i]`, a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", weights.shape(), self.shape(x)),
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |a, (&x, &w)| a + x * w);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { weights }, vec![x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let w = Tensor::ones(self.shape(x));
        self.weighted_sum(x, w).expect("shape matches by construction")
    }

    /// Gradients of scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let contribs = self.node_backward(node, &g)?;
            grads[id] = Some(g);
            for (input, contrib) in node.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let val = |i: usize| self.value(node.inputs[i]);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { stride, padding, bias } => {
                let (gx, gw, gb) = ops::conv2d_backward(val(0), val(1), *bias, *stride, *padding, g)?;
                vec![Some(gx), Some(gw), gb]
            }
            Op::Linear { bias } => {
                let x = val(0);
                let din = *x.shape().last().expect("rank >= 1");
                let flat = x.clone().reshape(&[x.len() / din, din])?;
                let dout = *g.shape().last().expect("rank >= 1");
                let gflat = g.clone().reshape(&[g.len() / dout, dout])?;
                let (gx, gw, gb) = ops::linear_backward(&flat, val(1), *bias, &gflat);
                vec![Some(gx.reshape(x.shape())?), Some(gw), gb]
            }
            Op::Bmm => {
                let (ga, gb) = ops::bmm_backward(val(0), val(1), g);
                vec![Some(ga), Some(gb)]
            }
            Op::ScaledScores { delta } => {
                let (gq, gk) = ops::scaled_scores_backward(val(0), val(1), *delta, g);
                vec![Some(gq), Some(gk)]
            }
            Op::Softmax => vec![Some(ops::softmax_rows_backward(&node.value, g))],
            Op::LayerNorm { cache } => {
                let (gx, gg, gs) = ops::layer_norm_backward(cache, val(1), g);
                vec![Some(gx), Some(gg), Some(gs)]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::AddBroadcast => {
                let bshape = val(1).shape().to_vec();
                let bl = val(1).len();
                let mut gb = vec![T::zero(); bl];
                for chunk in g.data().chunks(bl) {
                    for (o, &v) in gb.iter_mut().zip(chunk) {
                        *o = *o + v;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::new(bshape, gb)?)]
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(b.data()).map(|(&g, &b)| g * b).collect(),
                )?;
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(a.data()).map(|(&g, &a)| g * a).collect(),
                )?;
                vec![Some(ga), Some(gb)]
            }
            Op::Scale(s) => vec![Some(g.map(|v| v * *s))],
            Op::Tanh => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Gelu => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(0).data())
                    .map(|(&g, &x)| g * ops::gelu_grad(x))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Gather { index } => {
                let mut gx = vec![T::zero(); val(0).len()];
                for (&i, &v) in index.iter().zip(g.data()) {
                    gx[i] = gx[i] + v;
                }
                vec![Some(Tensor::new(val(0).shape().to_vec(), gx)?)]
            }
            Op::Reshape => vec![Some(g.clone().reshape(val(0).shape())?)],
            Op::MeanTokens => {
                let &[n, l, c] = val(0).shape() else { unreachable!("checked in forward") };
                let lf = T::lit(l as f64);
                let mut gx = Vec::with_capacity(n * l * c);
                for b in 0..n {
                    for _ in 0..l {
                        gx.extend(g.data()[b * c..][..c].iter().map(|&v| v / lf));
                    }
                }
                vec![Some(Tensor::new(vec![n, l, c], gx)?)]
            }
            Op::CrossEntropy { probs, labels } => {
                let k = probs.shape()[1];
                let scale = g.data()[0] / T::lit(labels.len() as f64);
                let mut gx = probs.data().to_vec();
                for (row, &y) in gx.chunks_mut(k).zip(labels) {
                    row[y] = row[y] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                vec![Some(Tensor::new(probs.shape().to_vec(), gx)?)]
            }
            Op::WeightedSum { weights } => {
                let s = g.data()[0];
                vec![Some(weights.map(|w| w * s))]
            }
        })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, or `None` when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; zeros of `like`'s shape when unreached.
    pub fn wrt(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// Gradient for every parameter in `store`, zero where the parameter was
    /// never used or does not reach the loss.
    pub fn for_params(&self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        store
            .iter()
            .map(|(path, value)| {
                let g = self
                    .params
                    .get(path)
                    .and_then(|&v| self.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (path.to_string(), g)
            })
            .collect()
    }
}
