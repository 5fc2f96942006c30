//! Append-only tape with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes that depend on a
//! `requires_grad` leaf are marked as needing gradients; `backward` walks the
//! tape in reverse from a scalar loss and accumulates vector-Jacobian
//! products into those nodes only.

use std::collections::HashSet;

use statrs::function::gamma::{digamma, ln_gamma};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied inside `log`.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Pow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    PowScalar(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    LnGamma(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Max(Var),
    Min(Var),
    Dot(Var, Var),
    MatMul(Var, Var),
    Softmax(Var),
    SpatialSoftmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    BilinearResize(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape. Rebuilt for every forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    retained: HashSet<usize>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::contract(op, format!("shape mismatch {a:?} vs {b:?}"))
}

/// Shapes of a rank-1 or rank-2 matmul operand as (rows, cols).
fn as_matrix(shape: &[usize], is_left: bool) -> Option<(usize, usize)> {
    match shape.len() {
        1 if is_left => Some((1, shape[0])),
        1 => Some((shape[0], 1)),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
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

    /// Adds an input tensor to the tape.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// Present for `requires_grad` leaves and for retained interior nodes.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.any_grad(&[a]);
        self.push(value, op, ng)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        };
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `a^b` for a non-negative base. `0^b` is 0 and contributes no gradient.
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::contract("pow", "negative base"));
        }
        self.binary("pow", a, b, Op::Pow(a, b), |x, y| {
            if x == 0.0 {
                0.0
            } else {
                x.powf(y)
            }
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a^p` for a constant exponent.
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::PowScalar(a, p), |x| x.powf(p))
    }

    /// Rectifier. The subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log with the input clamped at [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.max(LOG_CLAMP).ln())
    }

    /// Absolute value. The subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// ln Γ(x), elementwise, for positive inputs.
    pub fn ln_gamma(&mut self, a: Var) -> Var {
        self.unary(a, Op::LnGamma(a), ln_gamma)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    fn axis_reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::contract(
                "sum_axis",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += t.data()[base + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut new_shape: Vec<usize> = shape.to_vec();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        let op = if mean {
            Op::MeanAxis(a, axis)
        } else {
            Op::SumAxis(a, axis)
        };
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, op, ng))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.axis_reduce(a, axis, false)
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.axis_reduce(a, axis, true)
    }

    /// Maximum over all elements. Ties route the gradient to the first maximiser.
    pub fn max(&mut self, a: Var) -> Var {
        let m = self.value(a).max_value();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Max(a), ng)
    }

    pub fn min(&mut self, a: Var) -> Var {
        let m = self.value(a).min_value();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Min(a), ng)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("dot", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), ng))
    }

    /// Matrix product of rank-1/rank-2 operands. A rank-1 left operand is a
    /// row vector, a rank-1 right operand a column vector; the corresponding
    /// output dimension is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((k2, n))) = (as_matrix(ta.shape(), true), as_matrix(tb.shape(), false))
        else {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        };
        if k != k2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = Vec::new();
        if ta.rank() == 2 {
            shape.push(m);
        }
        if tb.rank() == 2 {
            shape.push(n);
        }
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    // ---- normalisers -------------------------------------------------

    /// Softmax of a rank-1 tensor, or of every row of a rank-2 tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => return Err(Error::contract("softmax", format!("expected rank 1 or 2, got {s:?}"))),
        };
        let mut out = t.data().to_vec();
        for r in 0..rows {
            softmax_strided(&mut out, r * cols, 1, cols);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax(a), ng))
    }

    /// Softmax over the H×W positions of an `[H, W, C]` tensor, per channel.
    pub fn spatial_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [h, w, c] = *t.shape() else {
            return Err(Error::contract(
                "spatial_softmax",
                format!("expected [H, W, C], got {:?}", t.shape()),
            ));
        };
        let mut out = t.data().to_vec();
        for ch in 0..c {
            softmax_strided(&mut out, ch, c, h * w);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::SpatialSoftmax(a), ng))
    }

    // ---- convolution and resampling ------------------------------------

    /// Stride-1 convolution with symmetric zero padding.
    ///
    /// `x` is `[H, W, Cin]`, `w` is `[KH, KW, Cin, Cout]`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let ([h, wd, cin], [kh, kw, kcin, cout]) = (tx.shape(), tw.shape()) else {
            return Err(shape_err("conv2d", tx.shape(), tw.shape()));
        };
        let (h, wd, cin, kh, kw, cout) = (*h, *wd, *cin, *kh, *kw, *cout);
        if *kcin != cin || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(shape_err("conv2d", tx.shape(), tw.shape()));
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [cout] {
                return Err(shape_err("conv2d", tw.shape(), tb.shape()));
            }
        }
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            pad,
        };
        let mut out = vec![0.0; geom.oh() * geom.ow() * cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for px in out.chunks_exact_mut(cout) {
                px.copy_from_slice(bias);
            }
        }
        conv_forward(&geom, tx.data(), tw.data(), &mut out);
        let value = Tensor::new(vec![geom.oh(), geom.ow(), cout], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any_grad(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, ng))
    }

    /// Bilinear resampling of an `[H, W]` or `[H, W, C]` map with
    /// half-pixel centres and edge clamping.
    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(a);
        let (h, w, c) = match *t.shape() {
            [h, w] => (h, w, 1),
            [h, w, c] => (h, w, c),
            _ => {
                return Err(Error::contract(
                    "bilinear_resize",
                    format!("expected [H, W] or [H, W, C], got {:?}", t.shape()),
                ))
            }
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::contract("bilinear_resize", "zero target size"));
        }
        let plan = ResizePlan::new(h, w, out_h, out_w);
        let mut out = vec![0.0; out_h * out_w * c];
        plan.forward(t.data(), &mut out, c);
        let mut shape = vec![out_h, out_w];
        if t.rank() == 3 {
            shape.push(c);
        }
        let value = Tensor::new(shape, out)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::BilinearResize(a), ng))
    }

    // ---- structural --------------------------------------------------

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat", "no inputs"));
        };
        let tail: Vec<usize> = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(shape_err("concat", self.shape(first), t.shape()));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let ng = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let rows = t.shape()[0];
        if start >= end || end > rows {
            return Err(Error::contract(
                "slice",
                format!("range {start}..{end} invalid for shape {:?}", t.shape()),
            ));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * inner..end * inner].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, data)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::Slice(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    ///
    /// Afterwards [`grad`](Self::grad) returns gradients for every
    /// `requires_grad` leaf and for each node in `retain`. Gradients from
    /// multiple paths accumulate additively. Calling again replaces the
    /// previous results.
    pub fn backward(&mut self, loss: Var, retain: &[Var]) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward", "empty graph"));
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", lt.shape()),
            ));
        }
        self.retained = retain.iter().map(|v| v.0).collect();

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        self.grads = vec![None; self.nodes.len()];
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let keep = (matches!(node.op, Op::Leaf) && node.needs_grad) || self.retained.contains(&i);
            if keep {
                let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                self.grads[i] = Some(Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;

        // Accumulate an elementwise contribution, reducing broadcast scalars.
        let mut acc = |v: Var, contrib: &mut dyn Iterator<Item = f64>| {
            if !needs(v) {
                return;
            }
            let len = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            if len == 1 {
                slot[0] += contrib.sum::<f64>();
            } else {
                for (s, c) in slot.iter_mut().zip(contrib) {
                    *s += c;
                }
            }
        };

        // Broadcast-aware element access for binary ops.
        let bget = |data: &[f64], k: usize| if data.len() == 1 { data[0] } else { data[k] };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut g.iter().copied());
                acc(*b, &mut g.iter().copied());
            }
            Op::Sub(a, b) => {
                acc(*a, &mut g.iter().copied());
                acc(*b, &mut g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut g.iter().enumerate().map(|(k, &gk)| gk * bget(vb, k)));
                acc(*b, &mut g.iter().enumerate().map(|(k, &gk)| gk * bget(va, k)));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut g.iter().enumerate().map(|(k, &gk)| gk / bget(vb, k)));
                acc(
                    *b,
                    &mut g.iter().enumerate().map(|(k, &gk)| {
                        let y = bget(vb, k);
                        -gk * bget(va, k) / (y * y)
                    }),
                );
            }
            Op::Pow(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(
                    *a,
                    &mut g.iter().enumerate().map(|(k, &gk)| {
                        let x = bget(va, k);
                        if x == 0.0 {
                            0.0
                        } else {
                            gk * bget(vb, k) * out[k] / x
                        }
                    }),
                );
                acc(
                    *b,
                    &mut g.iter().enumerate().map(|(k, &gk)| {
                        let x = bget(va, k);
                        if x == 0.0 {
                            0.0
                        } else {
                            gk * out[k] * x.ln()
                        }
                    }),
                );
            }
            Op::Scale(a, c) => acc(*a, &mut g.iter().map(|x| x * c)),
            Op::AddScalar(a) => acc(*a, &mut g.iter().copied()),
            Op::PowScalar(a, p) => {
                let va = val(*a);
                acc(
                    *a,
                    &mut g.iter().zip(va).map(|(&gk, &x)| gk * p * x.powf(p - 1.0)),
                );
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut g.iter().zip(va).map(|(&gk, &x)| if x > 0.0 { gk } else { 0.0 }));
            }
            Op::Exp(a) => acc(*a, &mut g.iter().zip(out).map(|(gk, y)| gk * y)),
            Op::Log(a) => {
                let va = val(*a);
                acc(
                    *a,
                    &mut g
                        .iter()
                        .zip(va)
                        .map(|(&gk, &x)| if x > LOG_CLAMP { gk / x } else { 0.0 }),
                );
            }
            Op::Abs(a) => {
                let va = val(*a);
                acc(
                    *a,
                    &mut g.iter().zip(va).map(|(&gk, &x)| {
                        if x > 0.0 {
                            gk
                        } else if x < 0.0 {
                            -gk
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Softplus(a) => {
                let va = val(*a);
                acc(*a, &mut g.iter().zip(va).map(|(&gk, &x)| gk * sigmoid(x)));
            }
            Op::LnGamma(a) => {
                let va = val(*a);
                acc(*a, &mut g.iter().zip(va).map(|(&gk, &x)| gk * digamma(x)));
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                acc(*a, &mut std::iter::repeat_n(g[0], n));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                acc(*a, &mut std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = self.nodes[a.0].value.shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let div = if matches!(node.op, Op::MeanAxis(..)) {
                    n as f64
                } else {
                    1.0
                };
                let mut it = (0..outer * n * inner).map(|idx| {
                    let o = idx / (n * inner);
                    let i = idx % inner;
                    g[o * inner + i] / div
                });
                acc(*a, &mut it);
            }
            Op::Max(a) | Op::Min(a) => {
                let va = val(*a);
                let target = out[0];
                let pos = va.iter().position(|&x| x == target).unwrap_or(0);
                let mut it = (0..va.len()).map(|k| if k == pos { g[0] } else { 0.0 });
                acc(*a, &mut it);
            }
            Op::Dot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut vb.iter().map(|y| g[0] * y));
                acc(*b, &mut va.iter().map(|x| g[0] * x));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape(),
                );
                let (m, k) = as_matrix(sa, true).expect("checked in forward");
                let (_, n) = as_matrix(sb, false).expect("checked in forward");
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let brow = &vb[kk * n..(kk + 1) * n];
                            da[r * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, &mut da.into_iter());
                }
                if needs(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let x = va[r * k + kk];
                            if x == 0.0 {
                                continue;
                            }
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                    acc(*b, &mut db.into_iter());
                }
            }
            Op::Softmax(a) => {
                let cols = *node.value.shape().last().expect("non-empty shape");
                let mut dx = vec![0.0; out.len()];
                for r in 0..out.len() / cols {
                    softmax_backward_strided(out, g, &mut dx, r * cols, 1, cols);
                }
                acc(*a, &mut dx.into_iter());
            }
            Op::SpatialSoftmax(a) => {
                let [h, w, c] = *node.value.shape() else {
                    unreachable!("checked in forward")
                };
                let mut dx = vec![0.0; out.len()];
                for ch in 0..c {
                    softmax_backward_strided(out, g, &mut dx, ch, c, h * w);
                }
                acc(*a, &mut dx.into_iter());
            }
            Op::Conv2d { x, w, b, pad } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let geom = ConvGeom {
                    h: sx[0],
                    w: sx[1],
                    cin: sx[2],
                    kh: sw[0],
                    kw: sw[1],
                    cout: sw[3],
                    pad: *pad,
                };
                if needs(*x) {
                    let mut dx = vec![0.0; sx.iter().product()];
                    conv_backward_input(&geom, val(*w), g, &mut dx);
                    acc(*x, &mut dx.into_iter());
                }
                if needs(*w) {
                    let mut dw = vec![0.0; sw.iter().product()];
                    conv_backward_weight(&geom, val(*x), g, &mut dw);
                    acc(*w, &mut dw.into_iter());
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut db = vec![0.0; geom.cout];
                        for px in g.chunks_exact(geom.cout) {
                            for (d, v) in db.iter_mut().zip(px) {
                                *d += v;
                            }
                        }
                        acc(*b, &mut db.into_iter());
                    }
                }
            }
            Op::BilinearResize(a) => {
                let sa = self.nodes[a.0].value.shape();
                let c = if sa.len() == 3 { sa[2] } else { 1 };
                let so = node.value.shape();
                let plan = ResizePlan::new(sa[0], sa[1], so[0], so[1]);
                let mut dx = vec![0.0; self.nodes[a.0].value.numel()];
                plan.backward(g, &mut dx, c);
                acc(*a, &mut dx.into_iter());
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(*p, &mut g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::Slice(a, start) => {
                let src = &self.nodes[a.0].value;
                let inner: usize = src.shape()[1..].iter().product();
                let lo = start * inner;
                let hi = lo + g.len();
                let mut it = (0..src.numel()).map(|k| if k >= lo && k < hi { g[k - lo] } else { 0.0 });
                acc(*a, &mut it);
            }
            Op::Reshape(a) => acc(*a, &mut g.iter().copied()),
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let x = a[r * k + kk];
            if x == 0.0 {
                continue;
            }
            for (o, y) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += x * y;
            }
        }
    }
}

fn softmax_strided(data: &mut [f64], start: usize, stride: usize, len: usize) {
    let idx = |k: usize| start + k * stride;
    let mut m = f64::NEG_INFINITY;
    for k in 0..len {
        m = m.max(data[idx(k)]);
    }
    let mut s = 0.0;
    for k in 0..len {
        let e = (data[idx(k)] - m).exp();
        data[idx(k)] = e;
        s += e;
    }
    for k in 0..len {
        data[idx(k)] /= s;
    }
}

fn softmax_backward_strided(
    y: &[f64],
    g: &[f64],
    dx: &mut [f64],
    start: usize,
    stride: usize,
    len: usize,
) {
    let idx = |k: usize| start + k * stride;
    let inner: f64 = (0..len).map(|k| y[idx(k)] * g[idx(k)]).sum();
    for k in 0..len {
        dx[idx(k)] = y[idx(k)] * (g[idx(k)] - inner);
    }
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    pad: usize,
}

impl ConvGeom {
    fn oh(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    fn ow(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    /// Calls `f(out_pixel, in_pixel, kernel_tap)` for every valid pairing.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.oh(), self.ow());
        for oy in 0..oh {
            for ky in 0..self.kh {
                let iy = oy + ky;
                if iy < self.pad || iy >= self.h + self.pad {
                    continue;
                }
                let iy = iy - self.pad;
                for ox in 0..ow {
                    for kx in 0..self.kw {
                        let ix = ox + kx;
                        if ix < self.pad || ix >= self.w + self.pad {
                            continue;
                        }
                        let ix = ix - self.pad;
                        f(oy * ow + ox, iy * self.w + ix, ky * self.kw + kx);
                    }
                }
            }
        }
    }
}

fn conv_forward(geom: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (cin, cout) = (geom.cin, geom.cout);
    geom.for_each_tap(|op, ip, tap| {
        let xs = &x[ip * cin..(ip + 1) * cin];
        let wblock = &w[tap * cin * cout..(tap + 1) * cin * cout];
        let os = &mut out[op * cout..(op + 1) * cout];
        for (ci, &xv) in xs.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in os.iter_mut().zip(&wblock[ci * cout..(ci + 1) * cout]) {
                *o += xv * wv;
            }
        }
    });
}

fn conv_backward_input(geom: &ConvGeom, w: &[f64], g: &[f64], dx: &mut [f64]) {
    let (cin, cout) = (geom.cin, geom.cout);
    geom.for_each_tap(|op, ip, tap| {
        let gs = &g[op * cout..(op + 1) * cout];
        let wblock = &w[tap * cin * cout..(tap + 1) * cin * cout];
        let ds = &mut dx[ip * cin..(ip + 1) * cin];
        for (ci, d) in ds.iter_mut().enumerate() {
            *d += gs
                .iter()
                .zip(&wblock[ci * cout..(ci + 1) * cout])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    });
}

fn conv_backward_weight(geom: &ConvGeom, x: &[f64], g: &[f64], dw: &mut [f64]) {
    let (cin, cout) = (geom.cin, geom.cout);
    geom.for_each_tap(|op, ip, tap| {
        let gs = &g[op * cout..(op + 1) * cout];
        let xs = &x[ip * cin..(ip + 1) * cin];
        let dblock = &mut dw[tap * cin * cout..(tap + 1) * cin * cout];
        for (ci, &xv) in xs.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (d, gv) in dblock[ci * cout..(ci + 1) * cout].iter_mut().zip(gs) {
                *d += xv * gv;
            }
        }
    });
}

/// Precomputed source coordinates for bilinear resampling.
struct ResizePlan {
    in_w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

impl ResizePlan {
    fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                        .clamp(0.0, (n_in - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(n_in - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect()
        };
        ResizePlan {
            in_w,
            rows: axis(in_h, out_h),
            cols: axis(in_w, out_w),
        }
    }

    fn taps(&self, oy: usize, ox: usize) -> [(usize, f64); 4] {
        let (y0, y1, fy) = self.rows[oy];
        let (x0, x1, fx) = self.cols[ox];
        [
            (y0 * self.in_w + x0, (1.0 - fy) * (1.0 - fx)),
            (y0 * self.in_w + x1, (1.0 - fy) * fx),
            (y1 * self.in_w + x0, fy * (1.0 - fx)),
            (y1 * self.in_w + x1, fy * fx),
        ]
    }

    fn forward(&self, src: &[f64], dst: &mut [f64], c: usize) {
        let ow = self.cols.len();
        for oy in 0..self.rows.len() {
            for ox in 0..ow {
                let o = (oy * ow + ox) * c;
                for (p, wt) in self.taps(oy, ox) {
                    for ch in 0..c {
                        dst[o + ch] += wt * src[p * c + ch];
                    }
                }
            }
        }
    }

    fn backward(&self, g: &[f64], dsrc: &mut [f64], c: usize) {
        let ow = self.cols.len();
        for oy in 0..self.rows.len() {
            for ox in 0..ow {
                let o = (oy * ow + ox) * c;
                for (p, wt) in self.taps(oy, ox) {
                    for ch in 0..c {
                        dsrc[p * c + ch] += wt * g[o + ch];
                    }
                }
            }
        }
    }
}
