//! Recorded computation for reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Each operation evaluates
//! eagerly and records its inputs, so node order is already a topological
//! order and the backward sweep simply walks the list in reverse.

use std::str::FromStr;

use super::{ops, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::training::loss::focal_value_and_slope;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    SoftmaxOverChannels,
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "softmax" | "softmax_over_channels" => Ok(Self::SoftmaxOverChannels),
            other => Err(Error::UnknownActivation(other.to_string())),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool(Var),
    Resize(Var),
    Concat(Vec<Var>),
    ElementMax {
        inputs: Vec<Var>,
        winners: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MulConst(Var, Tensor<T>),
    Focal {
        probs: Var,
        targets: Vec<usize>,
        gamma: T,
        alpha: Vec<T>,
    },
    BinaryFocal {
        probs: Var,
        targets: Tensor<T>,
        gamma: T,
        alpha: [T; 2],
    },
    GradScale(Var, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Whether any trainable parameter or differentiable input feeds this node.
    needs_grad: bool,
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            }
            | Op::Depthwise {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let mut v = vec![*input, *weights];
                v.extend(bias);
                v
            }
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::AvgPool(x)
            | Op::Resize(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::MulConst(x, _)
            | Op::GradScale(x, _) => vec![*x],
            Op::MaxPool { input, .. } => vec![*input],
            Op::Concat(xs) | Op::ElementMax { inputs: xs, .. } => xs.clone(),
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Focal { probs, .. } | Op::BinaryFocal { probs, .. } => vec![*probs],
        }
    }
}

/// Computation record: values plus the operations that produced them.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn leaf(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf whose gradient is reported by [`Graph::gradients`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Op::Input, true)
    }

    /// Records a leaf that receives no gradient (e.g. a training image).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Op::Input, false)
    }

    /// Records a leaf bound to a named parameter in `store`. Frozen
    /// parameters receive no gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        let p = store.by_id(id);
        Ok(self.leaf(p.value.clone(), Op::Param(id), !p.frozen))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let y = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let y = ops::depthwise_conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            y,
            Op::Depthwise {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Depthwise convolution followed by a 1×1 pointwise convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn depthwise_separable_conv(
        &mut self,
        input: Var,
        depthwise: Var,
        depthwise_bias: Option<Var>,
        pointwise: Var,
        pointwise_bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let mid = self.depthwise_conv2d(input, depthwise, depthwise_bias, stride, padding)?;
        self.conv2d(mid, pointwise, pointwise_bias, 1, 0)
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let y = ops::dense(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
        )?;
        Ok(self.push(
            y,
            Op::Dense {
                input,
                weights,
                bias,
            },
        ))
    }

    pub fn activation(&mut self, kind: ActivationKind, x: Var) -> Result<Var> {
        match kind {
            ActivationKind::Relu => Ok(self.relu(x)),
            ActivationKind::SoftmaxOverChannels => self.softmax(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_channels(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x)))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d(self.value(x), window, stride)?;
        Ok(self.push(y, Op::MaxPool { input: x, argmax }))
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::adaptive_avg_pool2d(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::AvgPool(x)))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Resize(x)))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat(xs.to_vec())))
    }

    pub fn elementwise_max(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let (y, winners) = ops::elementwise_max(&vals)?;
        Ok(self.push(
            y,
            Op::ElementMax {
                inputs: xs.to_vec(),
                winners,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let d = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), d)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let d = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), d)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale(x, factor))
    }

    /// Multiplies by a constant tensor of the same shape (no gradient flows to the constant).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if c.shape() != self.value(x).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                lhs: self.value(x).shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let d = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let y = Tensor::new(c.shape().to_vec(), d)?;
        Ok(self.push(y, Op::MulConst(x, c)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `factor`.
    pub fn grad_scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).clone();
        self.push(y, Op::GradScale(x, factor))
    }

    /// Mean focal loss over rows of an `N×k` probability tensor (a rank-1
    /// tensor is a single row). `targets[n]` is row `n`'s true class.
    pub fn focal_loss(
        &mut self,
        probs: Var,
        targets: &[usize],
        gamma: T,
        alpha: &[T],
    ) -> Result<Var> {
        let p = self.value(probs);
        let (n, k) = match *p.shape() {
            [k] => (1, k),
            [n, k] => (n, k),
            _ => {
                return Err(Error::invalid(format!(
                    "focal loss expects N×k probabilities, got {:?}",
                    p.shape()
                )))
            }
        };
        if targets.len() != n {
            return Err(Error::invalid(format!(
                "{} targets for {n} rows",
                targets.len()
            )));
        }
        if alpha.len() != k {
            return Err(Error::invalid(format!(
                "{} class weights for {k} classes",
                alpha.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("class index {bad} outside 0..{k}")));
        }
        let mut total = T::zero();
        for (row, &y) in targets.iter().enumerate() {
            total += focal_value_and_slope(p.data()[row * k + y], gamma, alpha[y]).0;
        }
        let loss = Tensor::scalar(total / T::lit(n as f64));
        Ok(self.push(
            loss,
            Op::Focal {
                probs,
                targets: targets.to_vec(),
                gamma,
                alpha: alpha.to_vec(),
            },
        ))
    }

    /// Mean per-element binary focal loss; `targets` holds 0/1 labels and
    /// `alpha` the weights of the negative and positive class.
    pub fn binary_focal_loss(
        &mut self,
        probs: Var,
        targets: Tensor<T>,
        gamma: T,
        alpha: [T; 2],
    ) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != targets.shape() {
            return Err(Error::ShapeMismatch {
                op: "binary_focal_loss",
                lhs: p.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let mut total = T::zero();
        for (&pv, &tv) in p.data().iter().zip(targets.data()) {
            let (py, a) = if tv > T::lit(0.5) {
                (pv, alpha[1])
            } else {
                (T::one() - pv, alpha[0])
            };
            total += focal_value_and_slope(py, gamma, a).0;
        }
        let loss = Tensor::scalar(total / T::lit(p.len() as f64));
        Ok(self.push(
            loss,
            Op::BinaryFocal {
                probs,
                targets,
                gamma,
                alpha,
            },
        ))
    }

    /// Gradients of the scalar `output` with respect to every recorded node.
    pub fn gradients(&self, output: Var) -> Result<Vec<Option<Tensor<T>>>> {
        if self.value(output).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !needs[output.0] {
            return Ok(grads);
        }
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let (gx, gk, gb) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *padding,
                        needs[input.0],
                    );
                    if let Some(gx) = gx {
                        add_grad(&mut grads, &needs, *input, gx);
                    }
                    add_grad(&mut grads, &needs, *kernel, gk);
                    if let Some(b) = bias {
                        add_grad(&mut grads, &needs, *b, gb);
                    }
                }
                Op::Depthwise {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let (gx, gk, gb) = ops::depthwise_conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *padding,
                        needs[input.0],
                    );
                    if let Some(gx) = gx {
                        add_grad(&mut grads, &needs, *input, gx);
                    }
                    add_grad(&mut grads, &needs, *kernel, gk);
                    if let Some(b) = bias {
                        add_grad(&mut grads, &needs, *b, gb);
                    }
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let (gx, gw, gb) =
                        ops::dense_backward(self.value(*input), self.value(*weights), &g);
                    add_grad(&mut grads, &needs, *input, gx);
                    add_grad(&mut grads, &needs, *weights, gw);
                    if let Some(b) = bias {
                        add_grad(&mut grads, &needs, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    add_grad(&mut grads, &needs, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Sigmoid(x) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &s)| gv * s * (T::one() - s))
                        .collect();
                    add_grad(&mut grads, &needs, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Softmax(x) => {
                    add_grad(
                        &mut grads,
                        &needs,
                        *x,
                        ops::softmax_channels_backward(&node.value, &g),
                    );
                }
                Op::MaxPool { input, argmax } => {
                    let mut gx = Tensor::zeros(self.value(*input).shape());
                    let d = gx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src] += gv;
                    }
                    add_grad(&mut grads, &needs, *input, gx);
                }
                Op::AvgPool(x) => {
                    add_grad(
                        &mut grads,
                        &needs,
                        *x,
                        ops::adaptive_avg_pool2d_backward(self.value(*x).shape(), &g),
                    );
                }
                Op::Resize(x) => {
                    add_grad(
                        &mut grads,
                        &needs,
                        *x,
                        ops::bilinear_resize_backward(self.value(*x).shape(), &g),
                    );
                }
                Op::Concat(xs) => {
                    let shapes: Vec<Vec<usize>> =
                        xs.iter().map(|&v| self.value(v).shape().to_vec()).collect();
                    for (&v, part) in xs.iter().zip(ops::split_channels(&g, &shapes)) {
                        add_grad(&mut grads, &needs, v, part);
                    }
                }
                Op::ElementMax { inputs, winners } => {
                    for (vi, &v) in inputs.iter().enumerate() {
                        let d = g
                            .data()
                            .iter()
                            .zip(winners)
                            .map(|(&gv, &w)| if w == vi { gv } else { T::zero() })
                            .collect();
                        add_grad(&mut grads, &needs, v, Tensor::new(g.shape().to_vec(), d)?);
                    }
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, &needs, *a, g.clone());
                    add_grad(&mut grads, &needs, *b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    let gb = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    add_grad(&mut grads, &needs, *a, Tensor::new(g.shape().to_vec(), ga)?);
                    add_grad(&mut grads, &needs, *b, Tensor::new(g.shape().to_vec(), gb)?);
                }
                Op::Scale(x, f) | Op::GradScale(x, f) => {
                    add_grad(&mut grads, &needs, *x, g.map(|v| v * *f));
                }
                Op::MulConst(x, c) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(c.data())
                        .map(|(&a, &b)| a * b)
                        .collect();
                    add_grad(&mut grads, &needs, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    add_grad(
                        &mut grads,
                        &needs,
                        *x,
                        Tensor::full(self.value(*x).shape(), gv),
                    );
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gv = g.data()[0] / T::lit(xv.len() as f64);
                    add_grad(&mut grads, &needs, *x, Tensor::full(xv.shape(), gv));
                }
                Op::Reshape(x) => {
                    add_grad(&mut grads, &needs, *x, g.reshape(self.value(*x).shape())?);
                }
                Op::Focal {
                    probs,
                    targets,
                    gamma,
                    alpha,
                } => {
                    let p = self.value(*probs);
                    let k = alpha.len();
                    let scale = g.data()[0] / T::lit(targets.len() as f64);
                    let mut gp = Tensor::zeros(p.shape());
                    for (row, &y) in targets.iter().enumerate() {
                        let idx = row * k + y;
                        let slope = focal_value_and_slope(p.data()[idx], *gamma, alpha[y]).1;
                        gp.data_mut()[idx] = slope * scale;
                    }
                    add_grad(&mut grads, &needs, *probs, gp);
                }
                Op::BinaryFocal {
                    probs,
                    targets,
                    gamma,
                    alpha,
                } => {
                    let p = self.value(*probs);
                    let scale = g.data()[0] / T::lit(p.len() as f64);
                    let d = p
                        .data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&pv, &tv)| {
                            if tv > T::lit(0.5) {
                                focal_value_and_slope(pv, *gamma, alpha[1]).1 * scale
                            } else {
                                -focal_value_and_slope(T::one() - pv, *gamma, alpha[0]).1 * scale
                            }
                        })
                        .collect();
                    add_grad(
                        &mut grads,
                        &needs,
                        *probs,
                        Tensor::new(p.shape().to_vec(), d)?,
                    );
                }
            }
        }
        Ok(grads)
    }

    /// Gradient of `output` with respect to each parameter of a store with
    /// `num_params` entries, indexed by parameter id.
    pub fn param_gradients(
        &self,
        output: Var,
        num_params: usize,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let node_grads = self.gradients(output)?;
        let mut out: Vec<Option<Tensor<T>>> = (0..num_params).map(|_| None).collect();
        for (node, g) in self.nodes.iter().zip(node_grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                match &mut out[*id] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }

    /// Accumulates `∂output/∂p` into every parameter gradient of `store`.
    pub fn backward(&self, output: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.param_gradients(output, store.len())?;
        store.accumulate(&grads);
        Ok(())
    }
}

fn add_grad<T: Real>(grads: &mut [Option<Tensor<T>>], needs: &[bool], v: Var, g: Tensor<T>) {
    if !needs[v.0] {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}
