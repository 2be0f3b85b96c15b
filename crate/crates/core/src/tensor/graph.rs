use std::collections::BTreeMap;

use super::conv::{self, ConvGeometry};
use super::{Real, Tensor};
use crate::error::{arg_err, shape_err, Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Axes {
    All,
    List(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    PowScalar(Var, T),
    LogShift(Var, T),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reduce {
        input: Var,
        index_map: Vec<usize>,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Tape of one forward pass. Nodes are appended in evaluation order, so the
/// reverse of insertion order is a valid reverse topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bindings: BTreeMap<String, Var>,
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
            bindings: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf registered under `name`. Binding the same name twice returns the
    /// first handle, so a weight used several times in a pass has one node and
    /// its gradient contributions sum.
    pub fn bind(&mut self, name: &str, value: impl FnOnce() -> Tensor<T>) -> Var {
        if let Some(&v) = self.bindings.get(name) {
            return v;
        }
        let v = self.leaf(value(), true);
        self.bindings.insert(name.to_string(), v);
        v
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bindings.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    // ---- convolution -------------------------------------------------------

    /// Cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,k,k]` plus per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [b, c_in, h, w] = self.value(input).dims4("conv2d input")?;
        let [c_out, wc_in, kh, kw] = self.value(weight).dims4("conv2d weight")?;
        if wc_in != c_in || kh != kw {
            return Err(shape_err!(
                "conv2d: weight {:?} incompatible with input {:?}",
                self.shape(weight),
                self.shape(input)
            ));
        }
        if let Some(bias) = bias {
            if self.shape(bias) != [c_out] {
                return Err(shape_err!(
                    "conv2d: bias {:?}, expected [{c_out}]",
                    self.shape(bias)
                ));
            }
        }
        let geom = ConvGeometry::new(c_in, h, w, kh, stride, padding)?;
        let data = conv::conv_forward(
            &geom,
            b,
            c_out,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|v| self.value(v).data()),
        );
        let value = Tensor::new(&[b, c_out, geom.out_height, geom.out_width], data)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution of `[B,Cin,H,W]` with `[Cin,Cout,k,k]`; output
    /// extent `(H-1)*stride - 2*padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [b, c_in, h, w] = self.value(input).dims4("conv_transpose2d input")?;
        let [wc_in, c_out, kh, kw] = self.value(weight).dims4("conv_transpose2d weight")?;
        if wc_in != c_in || kh != kw {
            return Err(shape_err!(
                "conv_transpose2d: weight {:?} incompatible with input {:?}",
                self.shape(weight),
                self.shape(input)
            ));
        }
        if stride == 0 {
            return Err(arg_err!("convolution stride must be positive"));
        }
        if let Some(bias) = bias {
            if self.shape(bias) != [c_out] {
                return Err(shape_err!(
                    "conv_transpose2d: bias {:?}, expected [{c_out}]",
                    self.shape(bias)
                ));
            }
        }
        let out_h = ((h - 1) * stride + kh)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| shape_err!("conv_transpose2d: padding {padding} too large"))?;
        let out_w = ((w - 1) * stride + kw)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| shape_err!("conv_transpose2d: padding {padding} too large"))?;
        let geom = ConvGeometry::new(c_out, out_h, out_w, kh, stride, padding)?;
        debug_assert_eq!((geom.out_height, geom.out_width), (h, w));
        let data = conv::conv_transpose_forward(
            &geom,
            b,
            c_in,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|v| self.value(v).data()),
        );
        let value = Tensor::new(&[b, c_out, out_h, out_w], data)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    // ---- normalization -----------------------------------------------------

    /// Batch normalization over `(B, H, W)` per channel. In train mode the
    /// running statistics in `state` move toward the batch statistics by
    /// `momentum`; in eval mode they are used as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: NormMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("batch_norm2d input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return Err(shape_err!(
                "batch_norm2d: affine/state channels do not match input channels {c}"
            ));
        }
        let plane = h * w;
        let count = b * plane;
        let x = self.value(input).data();
        let eps = T::lit(eps);
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        s += x[base..base + plane].iter().copied().sum::<T>();
                    }
                    let m = s / T::lit(count as f64);
                    let mut v = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for &xv in &x[base..base + plane] {
                            v += (xv - m) * (xv - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / T::lit(count as f64);
                }
                (mean, var)
            }
            NormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        if mode == NormMode::Train {
            let m = T::lit(momentum);
            let unbias = if count > 1 {
                T::lit(count as f64 / (count as f64 - 1.0))
            } else {
                T::one()
            };
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * mean[ch];
                state.running_var[ch] =
                    (T::one() - m) * state.running_var[ch] + m * var[ch] * unbias;
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == NormMode::Train,
            },
            rg,
        ))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            Op::Relu(x),
            |v| if v > T::zero() { v } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, Op::MulScalar(x, c), |v| v * c)
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Var {
        let neg = self.mul_scalar(x, -1.0);
        self.add_scalar(neg, c)
    }

    /// `x^exponent` with a constant exponent; differentiated w.r.t. `x` only.
    pub fn pow_scalar(&mut self, x: Var, exponent: f64) -> Var {
        let e = T::lit(exponent);
        self.unary(x, Op::PowScalar(x, e), |v| v.powf(e))
    }

    /// `ln(x + eps)`; fails if any `x + eps <= 0`.
    pub fn log_shift(&mut self, x: Var, eps: f64) -> Result<Var> {
        let e = T::lit(eps);
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v + e <= T::zero()) {
            return Err(Error::Domain(format!(
                "log_shift: argument {} + {eps} is not positive",
                bad
            )));
        }
        Ok(self.unary(x, Op::LogShift(x, e), |v| (v + e).ln()))
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&values, axis)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::Narrow {
                input: x,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axes: Axes) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: Axes) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    fn reduce(&mut self, x: Var, axes: Axes, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let reduced: Vec<usize> = match axes {
            Axes::All => (0..shape.len()).collect(),
            Axes::List(list) => {
                let mut list = list;
                list.sort_unstable();
                list.dedup();
                if let Some(&bad) = list.iter().find(|&&a| a >= shape.len()) {
                    return Err(arg_err!("reduce axis {bad} out of range for {:?}", shape));
                }
                list
            }
        };
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !reduced.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let count: usize = reduced.iter().map(|&a| shape[a]).product();
        let index_map = reduction_index_map(&shape, &reduced);
        let out_len: usize = out_shape.iter().product();
        // Accumulate in f64 so long f32 reductions stay accurate.
        let mut acc = vec![0.0f64; out_len];
        for (v, &o) in self.value(x).data().iter().zip(&index_map) {
            acc[o] += v.as_f64();
        }
        let divisor = if mean { count as f64 } else { 1.0 };
        let out: Vec<T> = acc.iter().map(|&v| T::lit(v / divisor)).collect();
        let scale = T::lit(1.0 / divisor);
        let value = Tensor {
            shape: out_shape,
            data: out,
        };
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::Reduce {
                input: x,
                index_map,
                scale,
            },
            rg,
        ))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires
    /// gradients. Calling it again adds to the existing leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).rank() != 0 {
            return Err(arg_err!(
                "backward needs a scalar-shaped loss, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += *g),
                    None => node.grad = Some(grad),
                }
                continue;
            }
            for (var, g) in self.local_grads(idx, &grad) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match grads[var.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => grads[var.0] = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let [b, c_out, _, _] = node.value.dims4("conv").expect("rank checked in forward");
                let gr = conv::conv_backward(
                    geom,
                    b,
                    c_out,
                    val(*input),
                    val(*weight),
                    dy,
                    rg(*input),
                    rg(*weight),
                    bias.is_some_and(rg),
                );
                let mut out = Vec::new();
                out.extend(gr.input.map(|g| (*input, g)));
                out.extend(gr.weight.map(|g| (*weight, g)));
                if let (Some(bv), Some(g)) = (bias, gr.bias) {
                    out.push((*bv, g));
                }
                out
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let [b, c_in, _, _] = self.nodes[input.0].value.dims4("conv_t").expect("checked");
                let gr = conv::conv_transpose_backward(
                    geom,
                    b,
                    c_in,
                    val(*input),
                    val(*weight),
                    dy,
                    rg(*input),
                    rg(*weight),
                    bias.is_some_and(rg),
                );
                let mut out = Vec::new();
                out.extend(gr.input.map(|g| (*input, g)));
                out.extend(gr.weight.map(|g| (*weight, g)));
                if let (Some(bv), Some(g)) = (bias, gr.bias) {
                    out.push((*bv, g));
                }
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [b, c, h, w] = node.value.dims4("bn").expect("checked");
                let plane = h * w;
                let count = T::lit((b * plane) as f64);
                let g = val(*gamma);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for i in base..base + plane {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                let mut out = Vec::new();
                if rg(*input) {
                    let mut dx = vec![T::zero(); dy.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            let k = g[ch] * inv_std[ch];
                            for i in base..base + plane {
                                dx[i] = if *train {
                                    k * (dy[i]
                                        - sum_dy[ch] / count
                                        - xhat[i] * sum_dy_xhat[ch] / count)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, sum_dy_xhat));
                }
                if rg(*beta) {
                    out.push((*beta, sum_dy));
                }
                out
            }
            Op::Relu(x) => {
                let xs = val(*x);
                let g = dy
                    .iter()
                    .zip(xs)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*x, g)]
            }
            Op::Sigmoid(x) => {
                let ys = node.value.data();
                let g = dy
                    .iter()
                    .zip(ys)
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect();
                vec![(*x, g)]
            }
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Sub(a, b) => vec![(*a, dy.to_vec()), (*b, dy.iter().map(|&d| -d).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, dy.iter().zip(vb).map(|(&d, &y)| d * y).collect()),
                    (*b, dy.iter().zip(va).map(|(&d, &x)| d * x).collect()),
                ]
            }
            Op::AddScalar(x) => vec![(*x, dy.to_vec())],
            Op::MulScalar(x, c) => vec![(*x, dy.iter().map(|&d| d * *c).collect())],
            Op::PowScalar(x, e) => {
                let e = *e;
                let g = dy
                    .iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| {
                        if e == T::zero() {
                            T::zero()
                        } else {
                            d * e * v.powf(e - T::one())
                        }
                    })
                    .collect();
                vec![(*x, g)]
            }
            Op::LogShift(x, eps) => {
                let g = dy
                    .iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| d / (v + *eps))
                    .collect();
                vec![(*x, g)]
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let extent = self.nodes[p.0].value.shape()[*axis];
                    if rg(p) {
                        let mut g = Vec::with_capacity(outer * extent * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            g.extend_from_slice(&dy[base..base + extent * inner]);
                        }
                        out.push((p, g));
                    }
                    offset += extent;
                }
                out
            }
            Op::Reshape(x) => vec![(*x, dy.to_vec())],
            Op::Narrow { input, axis, start } => {
                let in_shape = self.nodes[input.0].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let extent = in_shape[*axis];
                let len = node.value.shape()[*axis];
                let mut g = vec![T::zero(); self.nodes[input.0].value.numel()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&dy[src..src + len * inner]);
                }
                vec![(*input, g)]
            }
            Op::Reduce {
                input,
                index_map,
                scale,
            } => {
                let g = index_map.iter().map(|&o| dy[o] * *scale).collect();
                vec![(*input, g)]
            }
        }
    }
}

/// For each flat input index, the flat output index after dropping `reduced` axes.
fn reduction_index_map(shape: &[usize], reduced: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for axis in (0..shape.len()).rev() {
        if !reduced.contains(&axis) {
            out_strides[axis] = stride;
            stride *= shape[axis];
        }
    }
    let mut idx = vec![0usize; shape.len()];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for axis in (0..shape.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    map
}
