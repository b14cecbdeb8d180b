//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and the handles of its inputs. Nodes are appended in
//! evaluation order, so parents always precede children and the backward pass
//! is a single reverse sweep. The tape is discarded after `backward`; only
//! first-order gradients are supported.

use super::{gemm, mismatch, Result, Scalar, Tensor, TensorError, Trans};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of a backward rule, used to prove that the
/// gradient checker catches broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// ReLU passes the upstream gradient through unmasked.
    ReluBackwardLeak,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    Softmax {
        x: Var,
        group: usize,
    },
    GroupSum {
        x: Var,
        group: usize,
    },
    GroupMax {
        x: Var,
        arg: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        w: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    BceLogits {
        z: Var,
        y: Vec<T>,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward pass for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

/// Splits `t` into `(groups, channels)` for the neighborhood-axis ops, which
/// accept either `[g, k, d]` or a flattened `[g * k, d]`.
fn group_dims<T: Scalar>(op: &'static str, t: &Tensor<T>, group: usize) -> Result<(usize, usize)> {
    if group == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: "group size must be at least 1".into(),
        });
    }
    match t.shape() {
        [g, k, d] if *k == group => Ok((*g, *d)),
        [n, d] if n % group == 0 => Ok((n / group, *d)),
        s => Err(mismatch(op, format!("rows divisible by {group}"), format!("{s:?}"))),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
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

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds an input tensor. `requires_grad` marks it as a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("[m,k] x [k,n] from {sa:?}"), format!("{sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Trans::No,
            self.value(b).data(),
            Trans::No,
            T::zero(),
            &mut out,
        );
        let g = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), g)
    }

    /// Adds a `[d]` (or `[1, d]`) row vector to every row of `[n, d]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(b).len() != d || xv.shape().len() != 2 {
            return Err(mismatch("add_row", d, self.value(b).len()));
        }
        let bias = self.value(b).data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            add_into(row, bias);
        }
        let shape = xv.shape().to_vec();
        let g = self.needs(x) || self.needs(b);
        self.push("add_row", Tensor::new(shape, out)?, Op::AddRow(x, b), g)
    }

    /// Affine map `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, format!("{:?}", av.shape()), format!("{:?}", bv.shape())));
        }
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        let shape = av.shape().to_vec();
        let g = self.needs(a) || self.needs(b);
        self.push(name, Tensor::new(shape, out)?, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<T> = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = xv.shape().to_vec();
        let g = self.needs(x);
        self.push("relu", Tensor::new(shape, out)?, Op::Relu(x), g)
    }

    /// Selects rows of a matrix, with repetition allowed.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(xv.row(i));
        }
        let g = self.needs(x);
        self.push("gather_rows", Tensor::new(vec![idx.len(), c], out)?, Op::Gather { x, idx }, g)
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            })?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(mismatch("concat_rows", c, pv.cols()));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let g = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", Tensor::new(vec![rows, c], out)?, Op::Concat(parts.to_vec()), g)
    }

    /// Softmax over the neighborhood axis `k`, separately for every query and
    /// channel. Input is `[n, k, d]` or its flattened `[n * k, d]` form.
    pub fn channel_softmax(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (g, d) = group_dims("channel_softmax", xv, k)?;
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for gi in 0..g {
            let base = gi * k * d;
            for c in 0..d {
                let mut mx = T::neg_infinity();
                for j in 0..k {
                    mx = mx.max(src[base + j * d + c]);
                }
                let mut sum = T::zero();
                for j in 0..k {
                    let e = (src[base + j * d + c] - mx).exp();
                    out[base + j * d + c] = e;
                    sum = sum + e;
                }
                for j in 0..k {
                    out[base + j * d + c] = out[base + j * d + c] / sum;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let gr = self.needs(x);
        self.push("channel_softmax", Tensor::new(shape, out)?, Op::Softmax { x, group: k }, gr)
    }

    /// Sums each consecutive block of `k` rows: `[n * k, d] -> [n, d]`.
    pub fn group_sum(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (g, d) = group_dims("group_sum", xv, k)?;
        let src = xv.data();
        let mut out = vec![T::zero(); g * d];
        for gi in 0..g {
            let dst = &mut out[gi * d..(gi + 1) * d];
            for j in 0..k {
                let off = (gi * k + j) * d;
                add_into(dst, &src[off..off + d]);
            }
        }
        let gr = self.needs(x);
        self.push("group_sum", Tensor::new(vec![g, d], out)?, Op::GroupSum { x, group: k }, gr)
    }

    /// Per-channel maximum of each block of `k` rows. The gradient is routed
    /// to the first row attaining the maximum.
    pub fn group_max(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (g, d) = group_dims("group_max", xv, k)?;
        let src = xv.data();
        let mut out = vec![T::zero(); g * d];
        let mut arg = vec![0usize; g * d];
        for gi in 0..g {
            for c in 0..d {
                let mut best = gi * k * d + c;
                for j in 1..k {
                    let at = (gi * k + j) * d + c;
                    if src[at] > src[best] {
                        best = at;
                    }
                }
                out[gi * d + c] = src[best];
                arg[gi * d + c] = best;
            }
        }
        let gr = self.needs(x);
        self.push("group_max", Tensor::new(vec![g, d], out)?, Op::GroupMax { x, arg }, gr)
    }

    /// Per-channel maximum over all rows: `[n, d] -> [d]`.
    pub fn maxpool_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).rows();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "maxpool_rows",
                msg: "no rows".into(),
            });
        }
        let m = self.group_max(x, n)?;
        let d = self.value(m).cols();
        self.reshape(m, vec![d])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let g = self.needs(x);
        self.push("reshape", v, Op::Reshape(x), g)
    }

    /// Multiplies row `i` by the constant `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if w.len() != xv.rows() {
            return Err(mismatch("scale_rows", xv.rows(), w.len()));
        }
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for (row, &s) in out.chunks_mut(c.max(1)).zip(&w) {
            for v in row {
                *v = *v * s;
            }
        }
        let shape = xv.shape().to_vec();
        let g = self.needs(x);
        self.push("scale_rows", Tensor::new(shape, out)?, Op::ScaleRows { x, w }, g)
    }

    /// Training-mode batch normalization over the rows of `[n, d]`.
    ///
    /// Returns the output together with the batch mean and the (biased)
    /// batch variance, which callers fold into their running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if xv.shape().len() != 2 {
            return Err(mismatch("batch_norm", "[n, d]", format!("{:?}", xv.shape())));
        }
        if n < 2 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: format!("train mode needs at least 2 rows, got {n}"),
            });
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(mismatch("batch_norm", d, self.value(gamma).len()));
        }
        let src = xv.data();
        let nf = T::from_f64(n as f64);
        let mut mean = vec![T::zero(); d];
        for row in src.chunks(d) {
            add_into(&mut mean, row);
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        let mut var = vec![T::zero(); d];
        for row in src.chunks(d) {
            for c in 0..d {
                let t = row[c] - mean[c];
                var[c] = var[c] + t * t;
            }
        }
        let biased: Vec<T> = var.iter().map(|&v| v / nf).collect();
        let e = T::from_f64(eps);
        let inv_std: Vec<T> = biased.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
        let (y, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let g = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.value(x).shape().to_vec();
        let out = self.push(
            "batch_norm",
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            g,
        )?;
        Ok((out, mean, biased))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let d = self.value(x).cols();
        if mean.len() != d || var.len() != d || self.value(gamma).len() != d {
            return Err(mismatch("batch_norm", d, mean.len()));
        }
        let e = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
        let (y, xhat) = self.normalize(x, gamma, beta, mean, &inv_std);
        let g = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.value(x).shape().to_vec();
        self.push(
            "batch_norm",
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            g,
        )
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
        let d = mean.len();
        let src = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut y = vec![T::zero(); src.len()];
        for (i, &v) in src.iter().enumerate() {
            let c = i % d;
            let h = (v - mean[c]) * inv_std[c];
            xhat[i] = h;
            y[i] = h * gm[c] + bt[c];
        }
        (y, xhat)
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against 0/1 labels,
    /// evaluated stably from the logits.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[T]) -> Result<Var> {
        let zv = self.value(z);
        if zv.len() != labels.len() || labels.is_empty() {
            return Err(mismatch("bce_with_logits", zv.len(), labels.len()));
        }
        if labels.iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(TensorError::Invalid {
                op: "bce_with_logits",
                msg: "labels must be 0 or 1".into(),
            });
        }
        let mut total = 0.0f64;
        for (&zi, &yi) in zv.data().iter().zip(labels) {
            let (zf, yf) = (zi.as_f64(), yi.as_f64());
            // softplus(z) - y z, written to avoid overflow in exp.
            total += zf.max(0.0) + (-zf.abs()).exp().ln_1p() - yf * zf;
        }
        let loss = T::from_f64(total / labels.len() as f64);
        let g = self.needs(z);
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceLogits {
                z,
                y: labels.to_vec(),
            },
            g,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let g = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), g)
    }

    /// Fingerprint of every non-differentiable switch taken in the forward
    /// pass (ReLU masks and max-pool selections). Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::GroupMax { arg, .. } => arg.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", lv.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, g, Trans::No, bv.data(), Trans::Yes, T::one(), da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, av.data(), Trans::Yes, g, Trans::No, T::one(), db);
                }
            }
            Op::AddRow(x, b) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                let d = self.value(*b).len();
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (d, &s) in db.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &s), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + s * o;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &s), &o) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + s * o;
                    }
                }
            }
            Op::Relu(x) => {
                let leak = self.fault == Some(Fault::ReluBackwardLeak);
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &s), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if leak || v > T::zero() {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(dp) = self.slot(grads, *p) {
                        add_into(dp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Softmax { x, group } => {
                let k = *group;
                let y = node.value.data();
                let d = node.value.shape().last().copied().unwrap_or(1);
                let groups = y.len() / (k * d);
                if let Some(dx) = self.slot(grads, *x) {
                    for gi in 0..groups {
                        let base = gi * k * d;
                        for c in 0..d {
                            let mut dot = T::zero();
                            for j in 0..k {
                                let at = base + j * d + c;
                                dot = dot + y[at] * g[at];
                            }
                            for j in 0..k {
                                let at = base + j * d + c;
                                dx[at] = dx[at] + y[at] * (g[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::GroupSum { x, group } => {
                let d = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, row) in dx.chunks_mut(d).enumerate() {
                        let gi = r / group;
                        add_into(row, &g[gi * d..(gi + 1) * d]);
                    }
                }
            }
            Op::GroupMax { x, arg, .. } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (&a, &s) in arg.iter().zip(g) {
                        dx[a] = dx[a] + s;
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let c = node.value.cols().max(1);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((row, grow), &s) in dx.chunks_mut(c).zip(g.chunks(c)).zip(w) {
                        for (d, &v) in row.iter_mut().zip(grow) {
                            *d = *d + v * s;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let d = inv_std.len();
                let n = xhat.len() / d;
                let gm = self.value(*gamma).data().to_vec();
                let mut sum_g = vec![T::zero(); d];
                let mut sum_gx = vec![T::zero(); d];
                for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                    let c = i % d;
                    sum_g[c] = sum_g[c] + gi;
                    sum_gx[c] = sum_gx[c] + gi * h;
                }
                if let Some(dg) = self.slot(grads, *gamma) {
                    add_into(dg, &sum_gx);
                }
                if let Some(db) = self.slot(grads, *beta) {
                    add_into(db, &sum_g);
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = T::from_f64(n as f64);
                    for (i, dv) in dx.iter_mut().enumerate() {
                        let c = i % d;
                        let s = gm[c] * inv_std[c];
                        *dv = *dv
                            + if *train {
                                s * (g[i] - sum_g[c] / nf - xhat[i] * sum_gx[c] / nf)
                            } else {
                                s * g[i]
                            };
                    }
                }
            }
            Op::BceLogits { z, y } => {
                let zv = self.value(*z).data();
                let scale = g[0] / T::from_f64(y.len() as f64);
                if let Some(dz) = self.slot(grads, *z) {
                    for ((d, &zi), &yi) in dz.iter_mut().zip(zv).zip(y) {
                        let p = T::one() / (T::one() + (-zi).exp());
                        *d = *d + (p - yi) * scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
            }
        }
    }
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
