//! Reverse-mode operator graph.
//!
//! A [`Graph`] records one forward pass. Nodes are appended after their inputs,
//! so reverse insertion order is a valid reverse topological order and
//! [`Graph::backward`] visits each node once. Parameter leaves are bound to a
//! [`ParamStore`] entry and receive their gradient there.

use std::collections::{HashMap, HashSet};

use super::array::Tensor;
use super::conv::{conv_backward, conv_forward, ConvGeometry};
use super::param::{ParamId, ParamStore};
use super::scalar::{gemm, Scalar};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<Vec<T>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    WeightNorm {
        v: Var,
        g: Var,
        norms: Vec<T>,
    },
    GlobalAvgPool(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    Bce {
        logits: Var,
        target: Vec<T>,
        pos_weight: T,
        neg_weight: T,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L1 {
        pred: Var,
        target: Vec<T>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
    track_frozen: bool,
    only: Option<HashSet<ParamId>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
            track_frozen: true,
            only: None,
        }
    }

    /// Graph that skips gradient work for non-trainable parameters.
    ///
    /// Training loops use this; analysis code that needs gradients of frozen
    /// weights uses [`Graph::new`].
    pub fn trainable_only() -> Self {
        Self {
            track_frozen: false,
            ..Self::new()
        }
    }

    /// Graph that computes gradients for the listed parameters only.
    pub fn for_params(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            only: Some(ids.into_iter().collect()),
            ..Self::new()
        }
    }

    /// Drop all recorded nodes so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.backward_done = false;
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Graph("variable does not belong to this graph".into()))
        }
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("input"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf bound to a stored parameter. Loading a parameter twice yields the
    /// same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let requires_grad = match &self.only {
            Some(set) => set.contains(&id),
            None => self.track_frozen || p.trainable(),
        };
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (n, c_in, h, wd) = self.value(x).dims4("conv2d")?;
        let (c_out, wc_in, kh, kw) = self.value(w).dims4("conv2d")?;
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {wc_in} input channels, input has {c_in}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.value(b).len() != c_out {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias has {} entries, need {c_out}", self.value(b).len()),
                ));
            }
        }
        let geom = ConvGeometry::new(c_in, h, wd, kh, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {kh}, stride {stride}, padding {padding} invalid for {h}x{wd} input"),
            )
        })?;
        let bias = b.map(|b| self.value(b).data().to_vec());
        let (out, cols) = conv_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            c_out,
            bias.as_deref(),
            &geom,
        );
        let value = Tensor::new([n, c_out, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, "conv2d", &inputs)
    }

    /// Batch norm using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        self.check_channel_vec(gamma, c, "batch_norm")?;
        self.check_channel_vec(beta, c, "batch_norm")?;
        let hw = h * w;
        let count = n * hw;
        if count == 0 {
            return Err(Error::shape("batch_norm", "empty batch"));
        }
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let inv_count = T::one() / T::from_usize(count).unwrap();
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let m = s * inv_count;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    sq += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = sq * inv_count;
        }
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let denom = var[ch] + eps;
            if denom <= T::zero() {
                return Err(Error::Degenerate(format!(
                    "batch norm channel {ch} has zero variance and eps is 0"
                )));
            }
            inv_std[ch] = T::one() / denom.sqrt();
        }
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gs[ch] * xh + bs[ch];
                }
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        let stats = BatchStats { mean, var, count };
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "batch_norm",
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Batch norm with fixed statistics: `gamma·(x − mean)/sqrt(var + eps) + beta`.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        self.check_channel_vec(gamma, c, "batch_norm")?;
        self.check_channel_vec(beta, c, "batch_norm")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let denom = running_var[ch] + eps;
            if denom <= T::zero() {
                return Err(Error::Degenerate(format!(
                    "batch norm channel {ch} has zero running variance and eps is 0"
                )));
            }
            inv_std[ch] = T::one() / denom.sqrt();
        }
        let hw = h * w;
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = gs[ch] * (xs[i] - running_mean[ch]) * inv_std[ch] + bs[ch];
                }
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        self.push(
            value,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            "batch_norm",
            &[x, gamma, beta],
        )
    }

    fn check_channel_vec(&self, v: Var, c: usize, op: &'static str) -> Result<()> {
        self.check(v)?;
        if self.value(v).len() != c {
            return Err(Error::shape(
                op,
                format!("expected {c} channel values, got {}", self.value(v).len()),
            ));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), "relu", &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b), "add", &[a, b])
    }

    /// Elementwise product; `b` may also be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let broadcast = self.value(b).len() == 1 && self.value(a).shape() != self.value(b).shape();
        let value = if broadcast {
            let s = self.value(b).data()[0];
            self.value(a).scale(s)
        } else {
            self.value(a).zip_map(self.value(b), |x, y| x * y)?
        };
        self.push(value, Op::Mul { a, b, broadcast }, "mul", &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale(x, s), "scale", &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), "sum", &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        self.push(value, Op::Mean(x), "mean", &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x), "reshape", &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul", &[a, b])
    }

    /// Row-wise `g_i · v_i / ‖v_i‖` for `v` of shape `[rows, cols]` and `g` of
    /// length `rows`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        self.check(v)?;
        self.check(g)?;
        let (rows, cols) = self.value(v).dims2("weight_norm")?;
        if self.value(g).len() != rows {
            return Err(Error::shape(
                "weight_norm",
                format!("{} scales for {rows} rows", self.value(g).len()),
            ));
        }
        let vs = self.value(v).data();
        let gs = self.value(g).data();
        let mut norms = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &vs[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(Error::Degenerate(format!("weight-norm row {r} has zero norm")));
            }
            norms[r] = norm;
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = gs[r] * x / norm;
            }
        }
        let value = Tensor::new([rows, cols], out)?;
        self.push(value, Op::WeightNorm { v, g, norms }, "weight_norm", &[v, g])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let xs = self.value(x).data();
        let out: Vec<T> = (0..n * c)
            .map(|i| xs[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new([n, c, 1, 1], out)?;
        self.push(value, Op::GlobalAvgPool(x), "global_avg_pool", &[x])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check(x)?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let (n, c, h, w) = self.value(x).dims4("upsample")?;
        let (oh, ow) = (h * factor, w * factor);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = xs[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        self.push(value, Op::Upsample { x, factor }, "upsample", &[x])
    }

    /// Class-weighted binary cross-entropy on logits, averaged over the
    /// (masked) elements.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        target: &Tensor<T>,
        pos_weight: T,
        neg_weight: T,
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        self.check(logits)?;
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::shape("bce", format!("{:?} vs {:?}", z.shape(), target.shape())));
        }
        if let Some(m) = &mask {
            if m.len() != z.len() {
                return Err(Error::shape("bce", "mask length"));
            }
        }
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, (&zi, &ti)) in z.data().iter().zip(target.data()).enumerate() {
            if mask.as_ref().is_some_and(|m| !m[i]) {
                continue;
            }
            total += pos_weight * ti * softplus(-zi) + neg_weight * (T::one() - ti) * softplus(zi);
            count += 1;
        }
        if count == 0 {
            return Err(Error::shape("bce", "no elements selected by mask"));
        }
        let value = Tensor::scalar(total / T::from_usize(count).unwrap());
        self.push(
            value,
            Op::Bce {
                logits,
                target: target.data().to_vec(),
                pos_weight,
                neg_weight,
                mask,
                count,
            },
            "bce",
            &[logits],
        )
    }

    /// Softmax cross-entropy over the channel axis of `[n, c, h, w]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (n, c, h, w) = self.value(logits).dims4("cross_entropy")?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} positions", labels.len(), n * hw),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let zs = self.value(logits).data();
        let mut probs = vec![T::zero(); zs.len()];
        let mut total = T::zero();
        for b in 0..n {
            for p in 0..hw {
                let idx = |ch: usize| (b * c + ch) * hw + p;
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(zs[idx(ch)]);
                }
                let mut s = T::zero();
                for ch in 0..c {
                    let e = (zs[idx(ch)] - mx).exp();
                    probs[idx(ch)] = e;
                    s += e;
                }
                for ch in 0..c {
                    probs[idx(ch)] /= s;
                }
                let label = labels[b * hw + p];
                total += s.ln() + mx - zs[idx(label)];
            }
        }
        let value = Tensor::scalar(total / T::from_usize(n * hw).unwrap());
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
            &[logits],
        )
    }

    /// Mean absolute error over the (masked) elements.
    pub fn l1(&mut self, pred: Var, target: &Tensor<T>, mask: Option<Vec<bool>>) -> Result<Var> {
        self.check(pred)?;
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("l1", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        if let Some(m) = &mask {
            if m.len() != p.len() {
                return Err(Error::shape("l1", "mask length"));
            }
        }
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, (&a, &b)) in p.data().iter().zip(target.data()).enumerate() {
            if mask.as_ref().is_some_and(|m| !m[i]) {
                continue;
            }
            total += (a - b).abs();
            count += 1;
        }
        if count == 0 {
            return Err(Error::shape("l1", "no elements selected by mask"));
        }
        let value = Tensor::scalar(total / T::from_usize(count).unwrap());
        self.push(
            value,
            Op::L1 {
                pred,
                target: target.data().to_vec(),
                mask,
                count,
            },
            "l1",
            &[pred],
        )
    }

    /// Propagate from a scalar loss and write `∂loss/∂p` into every reachable
    /// parameter of `store`. Existing grads of reachable parameters are
    /// replaced; unreachable parameters are left untouched.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; reset it first".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph("backward called before the forward pass".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, gout, &mut grads, store)?;
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        i: usize,
        gout: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let gd = gout.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                if !gout.is_finite() {
                    return Err(Error::NonFinite("backward"));
                }
                store.set_grad(*id, gout)?;
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (n, c_out) = (node.value.shape()[0], node.value.shape()[1]);
                let (dx, dw, db) = conv_backward(
                    gd,
                    n,
                    self.value(*w).data(),
                    c_out,
                    cols,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?)?;
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw)?)?;
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = node.value.dims4("batch_norm")?;
                let hw = h * w;
                let m = T::from_usize(n * hw).unwrap();
                let gs = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for idx in base..base + hw {
                            dgamma[ch] += gd[idx] * xhat[idx];
                            dbeta[ch] += gd[idx];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for ch in 0..c {
                        // Σ dxhat = γ Σ dy and Σ dxhat·xhat = γ Σ dy·xhat.
                        let sum_dxhat = gs[ch] * dbeta[ch];
                        let sum_dxhat_xhat = gs[ch] * dgamma[ch];
                        let k = inv_std[ch] / m;
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for idx in base..base + hw {
                                let dxhat = gd[idx] * gs[ch];
                                dx[idx] = k * (m * dxhat - sum_dxhat - xhat[idx] * sum_dxhat_xhat);
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?)?;
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dgamma)?)?;
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), dbeta)?)?;
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, h, w) = node.value.dims4("batch_norm")?;
                let hw = h * w;
                let xs = self.value(*x).data();
                let gs = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for idx in base..base + hw {
                            dgamma[ch] += gd[idx] * (xs[idx] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += gd[idx];
                            dx[idx] = gd[idx] * gs[ch] * inv_std[ch];
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?)?;
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dgamma)?)?;
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), dbeta)?)?;
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let dx: Vec<T> = gd
                    .iter()
                    .zip(xs)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?)?;
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gout.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gout.clone())?;
                }
            }
            Op::Mul { a, b, broadcast } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if *broadcast {
                    let s = bv.data()[0];
                    if self.wants(*a) {
                        accumulate(grads, *a, gout.scale(s))?;
                    }
                    if self.wants(*b) {
                        let d: T = gd.iter().zip(av.data()).map(|(&g, &x)| g * x).sum();
                        accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), vec![d])?)?;
                    }
                } else {
                    if self.wants(*a) {
                        accumulate(grads, *a, gout.zip_map(bv, |g, y| g * y)?)?;
                    }
                    if self.wants(*b) {
                        accumulate(grads, *b, gout.zip_map(av, |g, x| g * x)?)?;
                    }
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, gout.scale(*s))?,
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(shape, gd[0]))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = gd[0] / T::from_usize(xv.len()).unwrap();
                accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), g))?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, gout.into_reshape(shape)?)?;
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2("matmul")?;
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut da, false);
                    accumulate(grads, *a, Tensor::new([m, k], da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    accumulate(grads, *b, Tensor::new([k, n], db)?)?;
                }
            }
            Op::WeightNorm { v, g, norms } => {
                let vv = self.value(*v);
                let gv = self.value(*g);
                let (rows, cols) = vv.dims2("weight_norm")?;
                let mut dv = vec![T::zero(); rows * cols];
                let mut dg = vec![T::zero(); rows];
                for r in 0..rows {
                    let row = &vv.data()[r * cols..(r + 1) * cols];
                    let dw = &gd[r * cols..(r + 1) * cols];
                    let norm = norms[r];
                    let proj: T = dw.iter().zip(row).map(|(&d, &x)| d * x).sum::<T>() / norm;
                    dg[r] = proj;
                    let k = gv.data()[r] / norm;
                    for c in 0..cols {
                        dv[r * cols + c] = k * (dw[c] - proj * row[c] / norm);
                    }
                }
                if self.wants(*v) {
                    accumulate(grads, *v, Tensor::new([rows, cols], dv)?)?;
                }
                if self.wants(*g) {
                    accumulate(grads, *g, Tensor::new(gv.shape().to_vec(), dg)?)?;
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let hw = shape[2] * shape[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut dx = vec![T::zero(); shape.iter().product()];
                for (p, &g) in gd.iter().enumerate() {
                    dx[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d = g * inv);
                }
                accumulate(grads, *x, Tensor::new(shape, dx)?)?;
            }
            Op::Upsample { x, factor } => {
                let shape = self.value(*x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (h * factor, w * factor);
                let planes = shape[0] * shape[1];
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[(p * h + y / factor) * w + xx / factor] += gd[(p * oh + y) * ow + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(shape, dx)?)?;
            }
            Op::Bce {
                logits,
                target,
                pos_weight,
                neg_weight,
                mask,
                count,
            } => {
                let z = self.value(*logits);
                let scale = gd[0] / T::from_usize(*count).unwrap();
                let dz: Vec<T> = z
                    .data()
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(i, (&zi, &ti))| {
                        if mask.as_ref().is_some_and(|m| !m[i]) {
                            return T::zero();
                        }
                        let s = sigmoid(zi);
                        scale * (*pos_weight * ti * (s - T::one()) + *neg_weight * (T::one() - ti) * s)
                    })
                    .collect();
                accumulate(grads, *logits, Tensor::new(z.shape().to_vec(), dz)?)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (n, c, h, w) = self.value(*logits).dims4("cross_entropy")?;
                let hw = h * w;
                let scale = gd[0] / T::from_usize(n * hw).unwrap();
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for b in 0..n {
                    for p in 0..hw {
                        let label = labels[b * hw + p];
                        dz[(b * c + label) * hw + p] -= scale;
                    }
                }
                accumulate(grads, *logits, Tensor::new([n, c, h, w], dz)?)?;
            }
            Op::L1 {
                pred,
                target,
                mask,
                count,
            } => {
                let p = self.value(*pred);
                let scale = gd[0] / T::from_usize(*count).unwrap();
                let dp: Vec<T> = p
                    .data()
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(i, (&a, &b))| {
                        if mask.as_ref().is_some_and(|m| !m[i]) || a == b {
                            T::zero()
                        } else if a > b {
                            scale
                        } else {
                            -scale
                        }
                    })
                    .collect();
                accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), dp)?)?;
            }
        }
        Ok(())
    }
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (T::one() + (-z.abs()).exp()).ln()
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, t, true).unwrap();
        s
    }

    #[test]
    fn scalar_weight_times_input_gradient_is_input_sum() {
        let mut store = store_with("w", Tensor::scalar(0.7));
        let mut g = Graph::new();
        let x = g
            .input(Tensor::from_f64([4], &[1.0, -2.0, 3.5, 0.25]).unwrap())
            .unwrap();
        let w = g.param(&store, "w").unwrap();
        let y = g.mul(x, w).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        let grad = store.grad("w").unwrap().unwrap();
        assert_eq!(grad.data(), &[2.75]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = store_with("w", Tensor::scalar(1.0));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let loss = g.sum(w).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(matches!(g.backward(loss, &mut store), Err(Error::Graph(_))));
        g.reset();
        let w = g.param(&store, "w").unwrap();
        let loss = g.sum(w).unwrap();
        assert!(g.backward(loss, &mut store).is_ok());
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut store = store_with("w", Tensor::scalar(1.0));
        let mut recorded = Graph::new();
        let w = recorded.param(&store, "w").unwrap();
        let loss = recorded.sum(w).unwrap();
        let mut fresh = Graph::<f64>::new();
        assert!(matches!(fresh.backward(loss, &mut store), Err(Error::Graph(_))));
    }

    #[test]
    fn unreachable_parameters_get_no_grad() {
        let mut store = ParamStore::<f64>::new();
        store.insert("used", Tensor::scalar(2.0), true).unwrap();
        store.insert("loaded_unused", Tensor::scalar(3.0), true).unwrap();
        store.insert("absent", Tensor::scalar(4.0), true).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "used").unwrap();
        let _b = g.param(&store, "loaded_unused").unwrap();
        let loss = g.sum(a).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(store.grad("used").unwrap().is_some());
        assert!(store.grad("loaded_unused").unwrap().is_none());
        assert!(store.grad("absent").unwrap().is_none());
    }

    #[test]
    fn frozen_parameters_still_receive_grads_by_default() {
        let mut store = ParamStore::<f64>::new();
        store.insert("frozen", Tensor::scalar(2.0), false).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "frozen").unwrap();
        let loss = g.sum(a).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("frozen").unwrap().unwrap().data(), &[1.0]);

        store.zero_grads();
        let mut g = Graph::trainable_only();
        let a = g.param(&store, "frozen").unwrap();
        let loss = g.sum(a).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(store.grad("frozen").unwrap().is_none());
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut g = Graph::<f32>::new();
        let t = Tensor::new([2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(g.input(t), Err(Error::NonFinite(_))));
    }

    #[test]
    fn two_stacked_pointwise_convs_follow_the_chain_rule() {
        // x ∈ R², y = B·(A·x), loss = Σ y. ∂loss/∂A = Bᵀ·1·xᵀ.
        let a = [1.0, 2.0, -1.0, 0.5];
        let b = [0.3, -0.2, 0.7, 1.1];
        let x = [2.0, -3.0];
        let mut store = ParamStore::<f64>::new();
        store
            .insert("a", Tensor::from_f64([2, 2, 1, 1], &a).unwrap(), true)
            .unwrap();
        store
            .insert("b", Tensor::from_f64([2, 2, 1, 1], &b).unwrap(), true)
            .unwrap();
        let mut g = Graph::new();
        let xv = g.input(Tensor::from_f64([1, 2, 1, 1], &x).unwrap()).unwrap();
        let av = g.param(&store, "a").unwrap();
        let bv = g.param(&store, "b").unwrap();
        let h = g.conv2d(xv, av, None, 1, 0).unwrap();
        let y = g.conv2d(h, bv, None, 1, 0).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        let col = [b[0] + b[2], b[1] + b[3]];
        let expected = [col[0] * x[0], col[0] * x[1], col[1] * x[0], col[1] * x[1]];
        let got = store.grad("a").unwrap().unwrap();
        for (g, e) in got.data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }
}
