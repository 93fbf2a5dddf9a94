//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation as a node holding its value and a
//! backward closure. Parameters enter the tape through [`Graph::param`] and
//! their gradients are collected with [`Graph::collect_param_grads`] after
//! [`Graph::backward`]. A graph lives for one forward/backward pass.

use std::collections::HashMap;

use rand::Rng;

use super::kernels;
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Parent values, own value, output gradient, which parents need gradients.
type BackFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
    requires_grad: bool,
}

/// Probability clamp used by [`Graph::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

fn need_rank(context: &str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::Shape {
            context: format!("{context}: expected rank {rank}"),
            expected: vec![rank],
            actual: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn same_shape(context: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, back: BackFn) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            back: requires_grad.then_some(back),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            back: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked (useful for input-gradient checks).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Brings a stored parameter onto the tape; repeated calls share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.entry(id).trainable;
        let v = self.leaf(store.get(id).clone(), trainable);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(back) = &node.back {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect();
                let parent_grads = back(&parent_vals, &node.value, &grad_out, &needs);
                let parents = node.parents.clone();
                for (p, g) in parents.into_iter().zip(parent_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match &mut self.grads[p] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&g) {
                                *a += v;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            self.grads[idx] = Some(grad_out);
        }
        Ok(())
    }

    /// Adds the gradient of every parameter used in this graph into `grads`.
    pub fn collect_param_grads(&self, grads: &mut Grads) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                grads.accumulate(id, g);
            }
        }
    }

    // ---- elementwise ------------------------------------------------------

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(
            out,
            vec![x.0],
            Box::new(move |p, y, g, _| {
                let gx = p[0]
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| c * v, move |_, _| c)
    }

    fn binary(
        &mut self,
        context: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(context, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(move |p, _, g, needs| {
                let (x, y) = (p[0].data(), p[1].data());
                let ga = needs[0].then(|| {
                    (0..g.len()).map(|i| g[i] * da(x[i], y[i], g[i])).collect()
                });
                let gb = needs[1].then(|| {
                    (0..g.len()).map(|i| g[i] * db(x[i], y[i], g[i])).collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, y, _| y, |x, _, _| x)
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(
            out,
            vec![x.0],
            Box::new(|_, _, g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Collapses all but the leading axis: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let b = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(x, &[b, rest])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        need_rank("transpose", xv, 2)?;
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let out = Tensor::new(&[n, m], kernels::transpose(xv.data(), m, n))?;
        Ok(self.push(
            out,
            vec![x.0],
            Box::new(move |_, _, g, _| vec![Some(kernels::transpose(g, n, m))]),
        ))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::OutOfRange(format!(
                "rows {start}..{} of shape {shape:?}",
                start + len
            )));
        }
        let row: usize = shape[1..].iter().product();
        let data = xv.data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let total = xv.len();
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            out,
            vec![x.0],
            Box::new(move |_, _, g, _| {
                let mut gx = vec![0.0; total];
                gx[start * row..(start + len) * row].copy_from_slice(g);
                vec![Some(gx)]
            }),
        ))
    }

    /// Selects rows by index along the leading axis (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if let Some(&bad) = idx.iter().find(|&&i| shape.is_empty() || i >= shape[0]) {
            return Err(Error::OutOfRange(format!(
                "row {bad} of shape {shape:?}"
            )));
        }
        let row: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&xv.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let total = xv.len();
        let idx = idx.to_vec();
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            out,
            vec![x.0],
            Box::new(move |_, _, g, _| {
                let mut gx = vec![0.0; total];
                for (k, &i) in idx.iter().enumerate() {
                    for (dst, src) in gx[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[k * row..(k + 1) * row])
                    {
                        *dst += src;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::Empty("concat_rows"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lens = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", &tail, &v.shape()[1..]));
            }
            lens.push(v.len());
            data.extend_from_slice(v.data());
        }
        let rows: usize = xs.iter().map(|&x| self.shape(x)[0]).sum();
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            xs.iter().map(|v| v.0).collect(),
            Box::new(move |_, _, g, needs| {
                let mut offset = 0;
                lens.iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let part = need.then(|| g[offset..offset + len].to_vec());
                        offset += len;
                        part
                    })
                    .collect()
            }),
        ))
    }

    /// Columns `start..start+len` of a 2D tensor.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        need_rank("cols", xv, 2)?;
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        if start + len > n {
            return Err(Error::OutOfRange(format!("cols {start}..{} of {n}", start + len)));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(&[m, len], data)?;
        Ok(self.push(
            out,
            vec![x.0],
            Box::new(move |_, _, g, _| {
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates 2D tensors along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::Empty("concat_cols"))?;
        let m = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.value(x);
            need_rank("concat_cols", v, 2)?;
            if v.shape()[0] != m {
                return Err(Error::shape("concat_cols rows", &[m], &[v.shape()[0]]));
            }
            widths.push(v.shape()[1]);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let v = self.value(x).data();
            for r in 0..m {
                data[r * n + offset..r * n + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(
            out,
            xs.iter().map(|v| v.0).collect(),
            Box::new(move |_, _, g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let part = need.then(|| {
                            let mut gx = Vec::with_capacity(m * w);
                            for r in 0..m {
                                gx.extend_from_slice(&g[r * n + offset..r * n + offset + w]);
                            }
                            gx
                        });
                        offset += w;
                        part
                    })
                    .collect()
            }),
        ))
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        need_rank("matmul lhs", av, 2)?;
        need_rank("matmul rhs", bv, 2)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        if bv.shape()[0] != k {
            return Err(Error::shape("matmul inner dimension", &[k], &[bv.shape()[0]]));
        }
        let out = Tensor::new(&[m, n], kernels::matmul(av.data(), bv.data(), m, k, n))?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(move |p, _, g, needs| {
                let ga = needs[0].then(|| kernels::matmul_bt(g, p[1].data(), m, n, k));
                let gb = needs[1].then(|| kernels::matmul_at(p[0].data(), g, m, k, n));
                vec![ga, gb]
            }),
        ))
    }

    /// `x W + b` for `x: [m, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        need_rank("dense input", xv, 2)?;
        need_rank("dense weight", wv, 2)?;
        let (m, k) = (xv.shape()[0], xv.shape()[1]);
        let n = wv.shape()[1];
        if wv.shape()[0] != k {
            return Err(Error::shape("dense input width", &[wv.shape()[0]], &[k]));
        }
        if bv.shape() != [n] {
            return Err(Error::shape("dense bias", &[n], bv.shape()));
        }
        let mut data = kernels::matmul(xv.data(), wv.data(), m, k, n);
        for row in data.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(
            out,
            vec![x.0, w.0, b.0],
            Box::new(move |p, _, g, needs| {
                let gx = needs[0].then(|| kernels::matmul_bt(g, p[1].data(), m, n, k));
                let gw = needs[1].then(|| kernels::matmul_at(p[0].data(), g, m, k, n));
                let gb = needs[2].then(|| {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let total = kernels::sum(xv.data());
        let n = xv.len();
        self.push(
            Tensor::scalar(total),
            vec![x.0],
            Box::new(move |_, _, g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over the leading axis of a 2D tensor: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        need_rank("mean_rows", xv, 2)?;
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        if m == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut acc = vec![0.0; n];
        for row in xv.data().chunks_exact(n) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = 1.0 / m as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(&[1, n], acc)?;
        Ok(self.push(
            out,
            vec![x.0],
            Box::new(move |_, _, g, _| {
                let mut gx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    gx.extend(g.iter().map(|v| v * inv));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row-wise softmax of a 2D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        need_rank("softmax", xv, 2)?;
        let n = xv.shape()[1];
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            kernels::softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(
            out,
            vec![x.0],
            Box::new(move |_, y, g, _| {
                let mut gx = vec![0.0; g.len()];
                for ((gxr, yr), gr) in gx
                    .chunks_exact_mut(n)
                    .zip(y.data().chunks_exact(n))
                    .zip(g.chunks_exact(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    // ---- normalization ----------------------------------------------------

    /// Layer normalization over the last axis of a 2D tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        need_rank("layer_norm", xv, 2)?;
        let n = xv.shape()[1];
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm affine", &[n], self.shape(gamma)));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.shape()[0]);
        for row in xhat.chunks_exact_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let data = xhat
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(gv).zip(bv).map(|((x, g), b)| x * g + b))
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |p, _, g, needs| {
                let gamma = p[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for (r, ((gr, xr), gxr)) in g
                    .chunks_exact(n)
                    .zip(xhat.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                    .enumerate()
                {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..n {
                        let d = gr[c] * gamma[c];
                        sum_d += d;
                        sum_dx += d * xr[c];
                        gg[c] += gr[c] * xr[c];
                        gb[c] += gr[c];
                    }
                    let inv = inv_std[r];
                    for c in 0..n {
                        let d = gr[c] * gamma[c];
                        gxr[c] = inv / n as f64 * (n as f64 * d - sum_d - xr[c] * sum_dx);
                    }
                }
                vec![needs[0].then_some(gx), needs[1].then_some(gg), needs[2].then_some(gb)]
            }),
        ))
    }

    /// Batch normalization with batch statistics over every axis except 1.
    ///
    /// Returns the output plus the per-channel batch mean and unbiased
    /// variance for running-statistics updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm input rank", &[2], &shape));
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm affine", &[c], self.shape(gamma)));
        }
        let count = (b * s) as f64;
        let xd = xv.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                mean[ci] += kernels::sum(&xd[base..base + s]);
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                var[ci] += xd[base..base + s]
                    .iter()
                    .map(|v| (v - mean[ci]) * (v - mean[ci]))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
        let unbiased: Vec<f64> = var
            .iter()
            .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
            .collect();
        let inv: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for k in base..base + s {
                    xhat[k] = (xd[k] - mean[ci]) * inv[ci];
                    out[k] = xhat[k] * gv[ci] + bv[ci];
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        let v = self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |p, _, g, needs| {
                let gamma = p[1].data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        for k in base..base + s {
                            gg[ci] += g[k] * xhat[k];
                            gb[ci] += g[k];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * s;
                            let scale = gamma[ci] * inv[ci] / count;
                            for k in base..base + s {
                                gx[k] = scale * (count * g[k] - gb[ci] - xhat[k] * gg[ci]);
                            }
                        }
                    }
                    gx
                });
                vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
            }),
        );
        Ok((v, mean, unbiased))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm input rank", &[2], &shape));
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || running_mean.len() != c {
            return Err(Error::shape("batch_norm affine", &[c], self.shape(gamma)));
        }
        let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                let (sc, sh) = (gv[ci] * inv[ci], bv[ci] - gv[ci] * inv[ci] * mean[ci]);
                for k in base..base + s {
                    out[k] = xd[k] * sc + sh;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |p, _, g, needs| {
                let (xd, gamma) = (p[0].data(), p[1].data());
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        for k in base..base + s {
                            gx[k] = g[k] * gamma[ci] * inv[ci];
                            gg[ci] += g[k] * (xd[k] - mean[ci]) * inv[ci];
                            gb[ci] += g[k];
                        }
                    }
                }
                vec![needs[0].then_some(gx), needs[1].then_some(gg), needs[2].then_some(gb)]
            }),
        ))
    }

    // ---- convolution / pooling -------------------------------------------

    /// Stride-1 "same" 3D convolution with dilation.
    ///
    /// `x: [B, Cin, D0, D1, D2]`, `w: [Cout, Cin, k0, k1, k2]` (odd kernels),
    /// `b: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, dilation: [usize; 3]) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        need_rank("conv3d input", xv, 5)?;
        need_rank("conv3d weight", wv, 5)?;
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        if xs[1] != ws[1] {
            return Err(Error::shape("conv3d input channels", &[ws[1]], &[xs[1]]));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::shape("conv3d bias", &[ws[0]], self.shape(b)));
        }
        if ws[2..].iter().any(|k| k % 2 == 0) || dilation.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "conv3d needs odd kernels and dilation >= 1, got {ws:?} / {dilation:?}"
            )));
        }
        let geo = kernels::ConvGeometry {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            dims: [xs[2], xs[3], xs[4]],
            kernel: [ws[2], ws[3], ws[4]],
            dilation,
        };
        let data = kernels::conv3d_forward(&geo, xv.data(), wv.data(), self.value(b).data());
        let out_shape = [geo.batch, geo.cout, geo.dims[0], geo.dims[1], geo.dims[2]];
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            out,
            vec![x.0, w.0, b.0],
            Box::new(move |p, _, g, needs| {
                let gx = needs[0].then(|| kernels::conv3d_grad_input(&geo, g, p[1].data()));
                let gw = needs[1].then(|| kernels::conv3d_grad_weight(&geo, g, p[0].data()));
                let gb = needs[2].then(|| kernels::conv3d_grad_bias(&geo, g));
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Non-overlapping max pooling with `window` as stride (floor mode).
    pub fn max_pool3d(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        let xv = self.value(x);
        need_rank("max_pool3d", xv, 5)?;
        let s = xv.shape().to_vec();
        let out_dims = [s[2] / window[0], s[3] / window[1], s[4] / window[2]];
        if out_dims.contains(&0) {
            return Err(Error::shape("max_pool3d window", &s[2..], &window));
        }
        let (data, argmax) = kernels::max_pool3d(xv.data(), [s[0] * s[1], s[2], s[3], s[4]], window);
        let total = xv.len();
        let out = Tensor::new(&[s[0], s[1], out_dims[0], out_dims[1], out_dims[2]], data)?;
        Ok(self.push(
            out,
            vec![x.0],
            Box::new(move |_, _, g, _| {
                let mut gx = vec![0.0; total];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(
            out,
            vec![x.0],
            Box::new(move |_, _, g, _| vec![Some(g.iter().zip(&mask).map(|(a, m)| a * m).collect())]),
        )
    }

    // ---- channel-axis helpers (spatial attention) -------------------------

    fn channel_reduce(&mut self, x: Var, use_max: bool) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 3 {
            return Err(Error::shape("channel reduction rank", &[3], &shape));
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let xd = xv.data();
        let mut out = vec![0.0; b * s];
        let mut arg = vec![0usize; if use_max { b * s } else { 0 }];
        for bi in 0..b {
            for k in 0..s {
                if use_max {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ci in 0..c {
                        let idx = (bi * c + ci) * s + k;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    out[bi * s + k] = best;
                    arg[bi * s + k] = best_idx;
                } else {
                    let sum: f64 = (0..c).map(|ci| xd[(bi * c + ci) * s + k]).sum();
                    out[bi * s + k] = sum / c as f64;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[1] = 1;
        let total = xv.len();
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            out,
            vec![x.0],
            Box::new(move |_, _, g, _| {
                let mut gx = vec![0.0; total];
                if use_max {
                    for (&src, &gv) in arg.iter().zip(g) {
                        gx[src] += gv;
                    }
                } else {
                    for bi in 0..b {
                        for ci in 0..c {
                            for k in 0..s {
                                gx[(bi * c + ci) * s + k] = g[bi * s + k] / c as f64;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Max over axis 1, keeping it as a singleton.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        self.channel_reduce(x, true)
    }

    /// Mean over axis 1, keeping it as a singleton.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        self.channel_reduce(x, false)
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        if sa.len() < 2 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", &sa, &sb));
        }
        let (batch, ca, cb) = (sa[0], sa[1], sb[1]);
        let s: usize = sa[2..].iter().product();
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for bi in 0..batch {
            data.extend_from_slice(&av.data()[bi * ca * s..(bi + 1) * ca * s]);
            data.extend_from_slice(&bv.data()[bi * cb * s..(bi + 1) * cb * s]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(move |_, _, g, needs| {
                let mut ga = Vec::with_capacity(batch * ca * s);
                let mut gb = Vec::with_capacity(batch * cb * s);
                for bi in 0..batch {
                    let base = bi * (ca + cb) * s;
                    ga.extend_from_slice(&g[base..base + ca * s]);
                    gb.extend_from_slice(&g[base + ca * s..base + (ca + cb) * s]);
                }
                vec![needs[0].then_some(ga), needs[1].then_some(gb)]
            }),
        ))
    }

    /// `x [B, C, ...] * m [B, 1, ...]` with `m` broadcast over channels.
    pub fn mul_channel_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xv, mv) = (self.value(x), self.value(m));
        let (sx, sm) = (xv.shape().to_vec(), mv.shape().to_vec());
        if sx.len() < 2 || sm.len() != sx.len() || sm[1] != 1 || sm[0] != sx[0] || sm[2..] != sx[2..] {
            return Err(Error::shape("channel broadcast", &sx, &sm));
        }
        let (b, c) = (sx[0], sx[1]);
        let s: usize = sx[2..].iter().product();
        let (xd, md) = (xv.data(), mv.data());
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for k in 0..s {
                    out[base + k] = xd[base + k] * md[bi * s + k];
                }
            }
        }
        let out = Tensor::new(&sx, out)?;
        Ok(self.push(
            out,
            vec![x.0, m.0],
            Box::new(move |p, _, g, needs| {
                let (xd, md) = (p[0].data(), p[1].data());
                let mut gx = vec![0.0; g.len()];
                let mut gm = vec![0.0; b * s];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        for k in 0..s {
                            gx[base + k] = g[base + k] * md[bi * s + k];
                            gm[bi * s + k] += g[base + k] * xd[base + k];
                        }
                    }
                }
                vec![needs[0].then_some(gx), needs[1].then_some(gm)]
            }),
        ))
    }

    // ---- losses -----------------------------------------------------------

    /// Mean binary cross-entropy of probabilities `p` against `labels`.
    ///
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`; the
    /// gradient is evaluated at the clamped value.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() {
            return Err(Error::shape("bce labels", &[pv.len()], &[labels.len()]));
        }
        let n = labels.len().max(1) as f64;
        let clamped: Vec<f64> = pv
            .data()
            .iter()
            .map(|&v| v.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP))
            .collect();
        let loss = clamped
            .iter()
            .zip(labels)
            .map(|(&q, &y)| -(y * q.ln() + (1.0 - y) * (1.0 - q).ln()))
            .sum::<f64>()
            / n;
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![p.0],
            Box::new(move |_, _, g, _| {
                let gp = clamped
                    .iter()
                    .zip(&labels)
                    .map(|(&q, &y)| g[0] * (-(y / q) + (1.0 - y) / (1.0 - q)) / n)
                    .collect();
                vec![Some(gp)]
            }),
        ))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        same_shape("mse", pv, target)?;
        let n = pv.len().max(1) as f64;
        let diff: Vec<f64> = pv.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        Ok(self.push(
            Tensor::scalar(loss),
            vec![pred.0],
            Box::new(move |_, _, g, _| {
                vec![Some(diff.iter().map(|d| g[0] * 2.0 * d / n).collect())]
            }),
        ))
    }
}
