//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its
//! value immediately and pushes a node onto the tape. [`Graph::backward`]
//! walks the tape once in reverse and returns parameter gradients.
//! [`Graph::grad_of`] computes detached gradients of an intermediate scalar
//! with respect to arbitrary nodes without consuming the tape, which is how
//! refinement networks receive `∇λ L` as an input.

use std::collections::HashMap;

use crate::error::NnError;
use crate::kernels::{self, ConvGeom};
use crate::params::{Gradients, ParamStore};
use crate::real::Real;
use crate::tensor::{split_axis, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Sqr(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    Elu(Var),
    Softplus(Var),
    SoftplusInv(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, stride: usize, pad: usize },
    AvgPool(Var),
    Broadcast(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LogSumExp(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. One graph per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Differentiable leaf that is not a parameter (gradients are available
    /// through [`Graph::grad_of`]).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, NnError> {
        let id = store.id(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.get_by_id(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        Ok(v)
    }

    /// Copy of `v`'s value with no gradient connection.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise binary (numpy-style broadcasting over equal ranks) ----

    fn broadcast_pair(&mut self, a: Var, b: Var) -> (Var, Var) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return (a, b);
        }
        let (sa, sb) = (rank_pad(&sa, sb.len()), rank_pad(&sb, sa.len()));
        let a = if sa.len() != self.shape(a).len() { self.reshape(a, &sa) } else { a };
        let b = if sb.len() != self.shape(b).len() { self.reshape(b, &sb) } else { b };
        let out: Vec<usize> = sa
            .iter()
            .zip(&sb)
            .map(|(&x, &y)| {
                assert!(x == y || x == 1 || y == 1, "incompatible shapes {sa:?} and {sb:?}");
                x.max(y)
            })
            .collect();
        (self.broadcast_to(a, &out), self.broadcast_to(b, &out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = self.broadcast_pair(a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = self.broadcast_pair(a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = self.broadcast_pair(a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = self.broadcast_pair(a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), ng)
    }

    // ---- elementwise unary ----

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(v, op, ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn offset(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn sqr(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqr(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Elu(x), |v| if v > T::zero() { v } else { v.exp_m1() })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// Inverse of softplus, defined for positive inputs.
    pub fn softplus_inv(&mut self, x: Var) -> Var {
        self.unary(x, Op::SoftplusInv(x), softplus_inv)
    }

    // ---- linear algebra ----

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {sa:?} × {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// 2-D convolution. `x: [N,C,H,W]`, `w: [O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && ws[1] == xs[1] && ws[2] == ws[3], "conv2d shapes {xs:?} {ws:?}");
        let g = ConvGeom::conv(xs[1], xs[2], xs[3], ws[2], stride, pad);
        let (n, o) = (xs[0], ws[0]);
        let (rows, cols_n) = (g.col_rows(), g.col_cols());
        let mut cols = vec![T::zero(); rows * cols_n];
        let mut out = vec![T::zero(); n * o * cols_n];
        let img = xs[1] * xs[2] * xs[3];
        for s in 0..n {
            kernels::im2col(&self.value(x).data()[s * img..(s + 1) * img], &g, &mut cols);
            T::gemm(
                o,
                rows,
                cols_n,
                T::one(),
                self.value(w).data(),
                (rows as isize, 1),
                &cols,
                (cols_n as isize, 1),
                T::zero(),
                &mut out[s * o * cols_n..(s + 1) * o * cols_n],
                (cols_n as isize, 1),
            );
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(
            Tensor::from_parts(vec![n, o, g.out_h, g.out_w], out),
            Op::Conv2d { x, w, stride, pad },
            ng,
        )
    }

    /// Transposed 2-D convolution. `x: [N,Cin,H,W]`, `w: [Cin,Cout,k,k]`;
    /// output side is `(H−1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && ws[0] == xs[1] && ws[2] == ws[3], "conv_transpose2d shapes {xs:?} {ws:?}");
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        // The output grid plays the role of the "image" of a forward conv whose
        // patch grid is the input.
        let g = ConvGeom::conv(cout, oh, ow, k, stride, pad);
        assert_eq!((g.out_h, g.out_w), (h, wd), "conv_transpose2d geometry is not invertible");
        let (rows, cols_n) = (g.col_rows(), g.col_cols());
        let mut cols = vec![T::zero(); rows * cols_n];
        let mut out = vec![T::zero(); n * cout * oh * ow];
        for s in 0..n {
            // cols (Cout·k·k × HW) = Wᵀ (Cout·k·k × Cin) · x_s (Cin × HW)
            T::gemm(
                rows,
                cin,
                cols_n,
                T::one(),
                self.value(w).data(),
                (1, rows as isize),
                &self.value(x).data()[s * cin * cols_n..(s + 1) * cin * cols_n],
                (cols_n as isize, 1),
                T::zero(),
                &mut cols,
                (cols_n as isize, 1),
            );
            kernels::col2im(&cols, &g, &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow]);
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(
            Tensor::from_parts(vec![n, cout, oh, ow], out),
            Op::ConvT2d { x, w, stride, pad },
            ng,
        )
    }

    /// Adaptive average pooling of `[N,C,H,W]` to `[N,C,oh,ow]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let out = kernels::adaptive_avg_pool(self.value(x).data(), s[0] * s[1], s[2], s[3], oh, ow);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![s[0], s[1], oh, ow], out), Op::AvgPool(x), ng)
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Broadcast to `shape` (same rank; source dims must be 1 or equal).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        let src = self.shape(x).to_vec();
        if src == shape {
            return x;
        }
        let v = broadcast_forward(self.value(x), shape);
        let ng = self.ng(x);
        self.push(v, Op::Broadcast(x), ng)
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, out), Op::SumAxis(x, axis), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let v = Tensor::concat(&parts, axis);
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(v, Op::Concat(xs.to_vec(), axis), ng)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_axis(axis, start, len);
        let ng = self.ng(x);
        self.push(v, Op::Slice(x, axis, start), ng)
    }

    // ---- normalizers ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let v = softmax_forward(self.value(x), axis);
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x, axis), ng)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let t = self.value(x);
        let lse = logsumexp_forward(t, axis);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[(o * n + j) * inner + i] -= lse[o * inner + i];
                }
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.ng(x);
        self.push(v, Op::LogSoftmax(x, axis), ng)
    }

    /// log Σ exp along `axis`, keeping it as a size-1 dimension.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Var {
        let t = self.value(x);
        let lse = logsumexp_forward(t, axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, lse), Op::LogSumExp(x, axis), ng)
    }

    // ---- reverse pass ----

    /// Full reverse pass from a scalar loss. Returns gradients for every
    /// parameter bound into this graph (zeros for those the loss does not
    /// reach). May only be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, NnError> {
        if self.consumed {
            return Err(NnError::AlreadyBackpropagated);
        }
        if self.value(loss).numel() != 1 {
            return Err(NnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let grads = self.reverse(loss, None);
        let mut out = Gradients::default();
        let mut params: Vec<(usize, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        for (id, v) in params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
            out.insert(id, g);
        }
        Ok(out)
    }

    /// Detached gradients of scalar `loss` with respect to `wrt` (which may be
    /// intermediate nodes). Does not consume the graph.
    pub fn grad_of(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>, NnError> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let grads = self.reverse(loss, Some(wrt));
        Ok(wrt
            .iter()
            .map(|&v| grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(v))))
            .collect())
    }

    fn reverse(&self, loss: Var, wrt: Option<&[Var]>) -> Vec<Option<Tensor<T>>> {
        let n = loss.0 + 1;
        // With explicit targets, only descendants of a target can carry
        // gradient back to it.
        let relevant: Vec<bool> = match wrt {
            None => self.nodes[..n].iter().map(|nd| nd.needs_grad).collect(),
            Some(targets) => {
                let mut r = vec![false; n];
                for t in targets {
                    if t.0 < n {
                        r[t.0] = true;
                    }
                }
                let start = targets.iter().map(|t| t.0).min().unwrap_or(n);
                for i in start..n {
                    if !r[i] && self.parents(i).iter().any(|p| r[p.0]) {
                        r[i] = true;
                    }
                }
                r
            }
        };
        let mut keep = vec![false; n];
        match wrt {
            Some(targets) => targets.iter().filter(|t| t.0 < n).for_each(|t| keep[t.0] = true),
            None => self.params.values().filter(|v| v.0 < n).for_each(|v| keep[v.0] = true),
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if !relevant[loss.0] {
            return grads;
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..n).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &relevant, &mut grads);
            if keep[i] {
                grads[i] = Some(dy);
            }
        }
        grads
    }

    fn parents(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, .. } | Op::ConvT2d { x, w, .. } => vec![*x, *w],
            Op::Concat(xs, _) => xs.clone(),
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqr(x)
            | Op::Sqrt(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Elu(x)
            | Op::Softplus(x)
            | Op::SoftplusInv(x)
            | Op::AvgPool(x)
            | Op::Broadcast(x)
            | Op::SumAxis(x, _)
            | Op::SumAll(x)
            | Op::Reshape(x)
            | Op::Slice(x, _, _)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::LogSumExp(x, _) => vec![*x],
        }
    }

    fn propagate(&self, i: usize, dy: &Tensor<T>, relevant: &[bool], grads: &mut [Option<Tensor<T>>]) {
        let y = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let acc = |v: Var, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !relevant[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let want = |v: Var| relevant[v.0];
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if want(*a) {
                    acc(*a, dy.clone(), grads);
                }
                if want(*b) {
                    acc(*b, dy.clone(), grads);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(*a, dy.clone(), grads);
                }
                if want(*b) {
                    acc(*b, dy.map(|v| -v), grads);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(*a, dy.zip_map(val(*b), |g, y| g * y), grads);
                }
                if want(*b) {
                    acc(*b, dy.zip_map(val(*a), |g, x| g * x), grads);
                }
            }
            Op::Div(a, b) => {
                if want(*a) {
                    acc(*a, dy.zip_map(val(*b), |g, d| g / d), grads);
                }
                if want(*b) {
                    // d(a/b)/db = -y/b
                    let t = dy.zip_map(y, |g, q| g * q);
                    acc(*b, t.zip_map(val(*b), |g, d| -g / d), grads);
                }
            }
            Op::Neg(x) => acc(*x, dy.map(|g| -g), grads),
            Op::Scale(x, s) => {
                let s = *s;
                acc(*x, dy.map(|g| g * s), grads)
            }
            Op::Offset(x) => acc(*x, dy.clone(), grads),
            Op::Exp(x) => acc(*x, dy.zip_map(y, |g, e| g * e), grads),
            Op::Log(x) => acc(*x, dy.zip_map(val(*x), |g, v| g / v), grads),
            Op::Sqr(x) => {
                let two = T::from_f64(2.0);
                acc(*x, dy.zip_map(val(*x), |g, v| g * two * v), grads)
            }
            Op::Sqrt(x) => {
                let two = T::from_f64(2.0);
                acc(*x, dy.zip_map(y, |g, r| g / (two * r)), grads)
            }
            Op::Tanh(x) => acc(*x, dy.zip_map(y, |g, t| g * (T::one() - t * t)), grads),
            Op::Sigmoid(x) => acc(*x, dy.zip_map(y, |g, s| g * s * (T::one() - s)), grads),
            Op::Elu(x) => {
                let xv = val(*x);
                let d: Vec<T> = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(y.data())
                    .map(|((&g, &v), &o)| if v > T::zero() { g } else { g * (o + T::one()) })
                    .collect();
                acc(*x, Tensor::from_parts(dy.shape().to_vec(), d), grads)
            }
            Op::Softplus(x) => acc(*x, dy.zip_map(val(*x), |g, v| g * sigmoid(v)), grads),
            Op::SoftplusInv(x) => acc(*x, dy.zip_map(val(*x), |g, v| g / (-(-v).exp_m1())), grads),
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    // da = dy · bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        dy.data(),
                        (n as isize, 1),
                        val(*b).data(),
                        (1, n as isize),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    acc(*a, Tensor::from_parts(vec![m, k], da), grads);
                }
                if want(*b) {
                    // db = aᵀ · dy
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        val(*a).data(),
                        (1, k as isize),
                        dy.data(),
                        (n as isize, 1),
                        T::zero(),
                        &mut db,
                        (n as isize, 1),
                    );
                    acc(*b, Tensor::from_parts(vec![k, n], db), grads);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let xs = xv.shape();
                let ws = wv.shape();
                let g = ConvGeom::conv(xs[1], xs[2], xs[3], ws[2], *stride, *pad);
                let (n, o) = (xs[0], ws[0]);
                let (rows, cn) = (g.col_rows(), g.col_cols());
                let img = xs[1] * xs[2] * xs[3];
                let mut cols = vec![T::zero(); rows * cn];
                let mut dw = want(*w).then(|| vec![T::zero(); wv.numel()]);
                let mut dx = want(*x).then(|| vec![T::zero(); xv.numel()]);
                for s in 0..n {
                    let dys = &dy.data()[s * o * cn..(s + 1) * o * cn];
                    if let Some(dw) = dw.as_mut() {
                        kernels::im2col(&xv.data()[s * img..(s + 1) * img], &g, &mut cols);
                        // dW += dy_s (O×HW) · colsᵀ (HW×Ckk)
                        T::gemm(
                            o,
                            cn,
                            rows,
                            T::one(),
                            dys,
                            (cn as isize, 1),
                            &cols,
                            (1, cn as isize),
                            T::one(),
                            dw,
                            (rows as isize, 1),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols = Wᵀ (Ckk×O) · dy_s (O×HW)
                        T::gemm(
                            rows,
                            o,
                            cn,
                            T::one(),
                            wv.data(),
                            (1, rows as isize),
                            dys,
                            (cn as isize, 1),
                            T::zero(),
                            &mut cols,
                            (cn as isize, 1),
                        );
                        kernels::col2im(&cols, &g, &mut dx[s * img..(s + 1) * img]);
                    }
                }
                if let Some(dw) = dw {
                    acc(*w, Tensor::from_parts(ws.to_vec(), dw), grads);
                }
                if let Some(dx) = dx {
                    acc(*x, Tensor::from_parts(xs.to_vec(), dx), grads);
                }
            }
            Op::ConvT2d { x, w, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let xs = xv.shape();
                let ws = wv.shape();
                let (n, cin) = (xs[0], xs[1]);
                let ys = y.shape();
                let (cout, oh, ow) = (ys[1], ys[2], ys[3]);
                let g = ConvGeom::conv(cout, oh, ow, ws[2], *stride, *pad);
                let (rows, cn) = (g.col_rows(), g.col_cols());
                let mut cols = vec![T::zero(); rows * cn];
                let mut dw = want(*w).then(|| vec![T::zero(); wv.numel()]);
                let mut dx = want(*x).then(|| vec![T::zero(); xv.numel()]);
                let out_img = cout * oh * ow;
                for s in 0..n {
                    kernels::im2col(&dy.data()[s * out_img..(s + 1) * out_img], &g, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        // dx_s (Cin×HW) = W (Cin×Cout·kk) · cols
                        T::gemm(
                            cin,
                            rows,
                            cn,
                            T::one(),
                            wv.data(),
                            (rows as isize, 1),
                            &cols,
                            (cn as isize, 1),
                            T::zero(),
                            &mut dx[s * cin * cn..(s + 1) * cin * cn],
                            (cn as isize, 1),
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        // dW += x_s (Cin×HW) · colsᵀ
                        T::gemm(
                            cin,
                            cn,
                            rows,
                            T::one(),
                            &xv.data()[s * cin * cn..(s + 1) * cin * cn],
                            (cn as isize, 1),
                            &cols,
                            (1, cn as isize),
                            T::one(),
                            dw,
                            (rows as isize, 1),
                        );
                    }
                }
                if let Some(dw) = dw {
                    acc(*w, Tensor::from_parts(ws.to_vec(), dw), grads);
                }
                if let Some(dx) = dx {
                    acc(*x, Tensor::from_parts(xs.to_vec(), dx), grads);
                }
            }
            Op::AvgPool(x) => {
                let xs = val(*x).shape();
                let ys = y.shape();
                let mut dx = vec![T::zero(); val(*x).numel()];
                kernels::adaptive_avg_pool_backward(dy.data(), xs[0] * xs[1], xs[2], xs[3], ys[2], ys[3], &mut dx);
                acc(*x, Tensor::from_parts(xs.to_vec(), dx), grads);
            }
            Op::Broadcast(x) => acc(*x, broadcast_backward(dy, val(*x).shape()), grads),
            Op::SumAxis(x, axis) => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let mut dx = Vec::with_capacity(val(*x).numel());
                for o in 0..outer {
                    let row = &dy.data()[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        dx.extend_from_slice(row);
                    }
                }
                acc(*x, Tensor::from_parts(xs.to_vec(), dx), grads);
            }
            Op::SumAll(x) => acc(*x, Tensor::full(val(*x).shape(), dy.item()), grads),
            Op::Reshape(x) => {
                let g = dy.clone().reshape(val(*x).shape()).expect("reshape grad");
                acc(*x, g, grads)
            }
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    if want(x) {
                        acc(x, dy.slice_axis(*axis, start, len), grads);
                    }
                    start += len;
                }
            }
            Op::Slice(x, axis, start) => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = y.shape()[*axis];
                let mut dx = vec![T::zero(); val(*x).numel()];
                for o in 0..outer {
                    let src = &dy.data()[o * len * inner..(o + 1) * len * inner];
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                acc(*x, Tensor::from_parts(xs.to_vec(), dx), grads);
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), dy.data());
                let mut dx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = T::zero();
                        for j in 0..n {
                            let idx = (o * n + j) * inner + i;
                            dot += gd[idx] * yd[idx];
                        }
                        for j in 0..n {
                            let idx = (o * n + j) * inner + i;
                            dx[idx] = yd[idx] * (gd[idx] - dot);
                        }
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), dx), grads);
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), dy.data());
                let mut dx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut total = T::zero();
                        for j in 0..n {
                            total += gd[(o * n + j) * inner + i];
                        }
                        for j in 0..n {
                            let idx = (o * n + j) * inner + i;
                            dx[idx] = gd[idx] - yd[idx].exp() * total;
                        }
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), dx), grads);
            }
            Op::LogSumExp(x, axis) => {
                let xv = val(*x);
                let (outer, n, inner) = split_axis(xv.shape(), *axis);
                let (xd, yd, gd) = (xv.data(), y.data(), dy.data());
                let mut dx = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            let idx = (o * n + j) * inner + i;
                            let r = o * inner + i;
                            dx[idx] = gd[r] * (xd[idx] - yd[r]).exp();
                        }
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), dx), grads);
            }
        }
    }
}

fn rank_pad(s: &[usize], rank: usize) -> Vec<usize> {
    if s.len() >= rank {
        return s.to_vec();
    }
    let mut out = vec![1; rank - s.len()];
    out.extend_from_slice(s);
    out
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

#[inline]
pub fn softplus_inv<T: Real>(v: T) -> T {
    // log(e^v − 1) = v + log(1 − e^{−v})
    v + (-(-v).exp_m1()).ln()
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Source index in `src` for every element of the broadcast output.
fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    assert_eq!(src.len(), dst.len(), "broadcast requires equal rank: {src:?} → {dst:?}");
    for (&a, &b) in src.iter().zip(dst) {
        assert!(a == b || a == 1, "cannot broadcast {src:?} to {dst:?}");
    }
    let sstr = strides_for(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&sstr)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let total: usize = dst.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < dst[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_forward<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let map = broadcast_index_map(x.shape(), shape);
    let d = x.data();
    Tensor::from_parts(shape.to_vec(), map.iter().map(|&i| d[i]).collect())
}

fn broadcast_backward<T: Real>(dy: &Tensor<T>, src: &[usize]) -> Tensor<T> {
    let map = broadcast_index_map(src, dy.shape());
    let mut dx = vec![T::zero(); src.iter().product()];
    for (&i, &g) in map.iter().zip(dy.data()) {
        dx[i] += g;
    }
    Tensor::from_parts(src.to_vec(), dx)
}

fn logsumexp_forward<T: Real>(t: &Tensor<T>, axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let d = t.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut m = T::neg_infinity();
            for j in 0..n {
                m = m.max(d[(o * n + j) * inner + i]);
            }
            if m == T::neg_infinity() {
                out[o * inner + i] = m;
                continue;
            }
            let mut s = T::zero();
            for j in 0..n {
                s += (d[(o * n + j) * inner + i] - m).exp();
            }
            out[o * inner + i] = m + s.ln();
        }
    }
    out
}

pub(crate) fn softmax_forward<T: Real>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let lse = logsumexp_forward(t, axis);
    let d = t.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                let idx = (o * n + j) * inner + i;
                out[idx] = (d[idx] - lse[o * inner + i]).exp();
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// Softmax of a plain tensor along `axis` (no graph).
pub fn softmax<T: Real>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    softmax_forward(t, axis)
}
