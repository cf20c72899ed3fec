//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation together with its forward value.
//! [`Graph::backward`] walks the tape in reverse creation order.

use crate::conv::{self, ConvGeometry};
use crate::error::{Result, TensorError};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvParams { stride, padding, groups: 1 }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geometry: ConvGeometry },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Upsample2x(Var),
    Reshape(Var),
    SliceFlat { input: Var, start: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D convolution: input `N×C×H×W`, weight `O×(C/groups)×kH×kW`, optional bias `O`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, p: ConvParams) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("expected rank-4 input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        if p.stride == 0 || p.groups == 0 {
            return Err(TensorError::config("conv2d", "stride and groups must be at least 1"));
        }
        if !xs[1].is_multiple_of(p.groups) || !ws[0].is_multiple_of(p.groups) || ws[1] * p.groups != xs[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "input channels {} / weight {:?} inconsistent with groups {}",
                    xs[1], ws, p.groups
                ),
            ));
        }
        if xs[2] + 2 * p.padding < ws[2] || xs[3] + 2 * p.padding < ws[3] {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {:?}", ws[2], ws[3], xs),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), ws[0]),
                ));
            }
        }
        let geometry = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_channels: ws[0],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride: p.stride,
            padding: p.padding,
            groups: p.groups,
        };
        let out = conv::forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = vec![xs[0], ws[0], geometry.out_h(), geometry.out_w()];
        let rg = self.any_grad(&[Some(input), Some(weight), bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { input, weight, bias, geometry }, rg))
    }

    /// Affine map: input `N×I`, weight `O×I`, optional bias `O`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(TensorError::shape(
                    "linear",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), ws[0]),
                ));
            }
        }
        let (n, i_dim, o_dim) = (xs[0], xs[1], ws[0]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![T::zero(); n * o_dim];
        for r in 0..n {
            let xr = &x[r * i_dim..(r + 1) * i_dim];
            for o in 0..o_dim {
                let wr = &w[o * i_dim..(o + 1) * i_dim];
                let mut acc = bias.map(|b| self.value(b).data()[o]).unwrap_or_else(T::zero);
                for (a, b) in xr.iter().zip(wr) {
                    acc = acc + *a * *b;
                }
                out[r * o_dim + o] = acc;
            }
        }
        let rg = self.any_grad(&[Some(input), Some(weight), bias]);
        Ok(self.push(Tensor::new(vec![n, o_dim], out)?, Op::Linear { input, weight, bias }, rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a).map(f);
        let rg = self.nodes[a.0].requires_grad;
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.nodes[a.0].requires_grad;
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / T::of_f64(v.numel() as f64));
        let rg = self.nodes[a.0].requires_grad;
        self.push(t, Op::Mean(a), rg)
    }

    /// Nearest-neighbour ×2 upsampling of an `N×C×H×W` tensor.
    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("upsample_nearest2x", format!("expected rank 4, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len() * 4);
        for plane in src.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(t, Op::Upsample2x(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Contiguous run of the flattened input, viewed with `shape`.
    pub fn slice_flat(&mut self, a: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let src = self.value(a).data();
        if start + len > src.len() {
            return Err(TensorError::shape(
                "slice_flat",
                format!("range {start}..{} exceeds {} elements", start + len, src.len()),
            ));
        }
        let t = Tensor::new(shape.to_vec(), src[start..start + len].to_vec())?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(t, Op::SliceFlat { input: a, start }, rg))
    }

    /// Mean absolute error between two equally shaped nodes.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Mean squared error between two equally shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.square(d);
        Ok(self.mean(d))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must have one element, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| {
                    g.filter(|_| n.requires_grad)
                        .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("gradient shape"))
                })
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut Vec<T>)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn accumulate_elementwise(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl Fn(usize) -> T) {
        self.accumulate(grads, v, |slot| {
            for (i, s) in slot.iter_mut().enumerate() {
                *s = *s + contrib(i);
            }
        });
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geometry } => {
                let need = (
                    self.nodes[input.0].requires_grad,
                    self.nodes[weight.0].requires_grad,
                    bias.is_some_and(|b| self.nodes[b.0].requires_grad),
                );
                let cg = conv::backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    need,
                );
                add_into(self, grads, *input, cg.input);
                add_into(self, grads, *weight, cg.weight);
                if let Some(b) = bias {
                    add_into(self, grads, *b, cg.bias);
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.shape(*input);
                let (n, i_dim) = (xs[0], xs[1]);
                let o_dim = self.shape(*weight)[0];
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                self.accumulate(grads, *input, |gx| {
                    for r in 0..n {
                        for o in 0..o_dim {
                            let go = g[r * o_dim + o];
                            let wr = &w[o * i_dim..(o + 1) * i_dim];
                            for (d, &wv) in gx[r * i_dim..(r + 1) * i_dim].iter_mut().zip(wr) {
                                *d = *d + go * wv;
                            }
                        }
                    }
                });
                self.accumulate(grads, *weight, |gw| {
                    for r in 0..n {
                        let xr = &x[r * i_dim..(r + 1) * i_dim];
                        for o in 0..o_dim {
                            let go = g[r * o_dim + o];
                            for (d, &xv) in gw[o * i_dim..(o + 1) * i_dim].iter_mut().zip(xr) {
                                *d = *d + go * xv;
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    self.accumulate(grads, *b, |gb| {
                        for r in 0..n {
                            for (o, d) in gb.iter_mut().enumerate() {
                                *d = *d + g[r * o_dim + o];
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate_elementwise(grads, *a, |i| g[i]);
                self.accumulate_elementwise(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate_elementwise(grads, *a, |i| g[i]);
                self.accumulate_elementwise(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_elementwise(grads, *a, |i| g[i] * bv[i]);
                self.accumulate_elementwise(grads, *b, |i| g[i] * av[i]);
            }
            Op::Scale(a, s) => self.accumulate_elementwise(grads, *a, |i| g[i] * *s),
            Op::AddScalar(a) => self.accumulate_elementwise(grads, *a, |i| g[i]),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate_elementwise(grads, *a, |i| if x[i] > T::zero() { g[i] } else { T::zero() });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate_elementwise(grads, *a, |i| g[i] * y[i] * (T::one() - y[i]));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate_elementwise(grads, *a, |i| g[i] * (T::one() - y[i] * y[i]));
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                self.accumulate_elementwise(grads, *a, |i| {
                    if x[i] > T::zero() {
                        g[i]
                    } else if x[i] < T::zero() {
                        -g[i]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = T::of_f64(2.0);
                self.accumulate_elementwise(grads, *a, |i| g[i] * two * x[i]);
            }
            Op::Sum(a) => self.accumulate_elementwise(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = T::of_f64(self.value(*a).numel() as f64);
                self.accumulate_elementwise(grads, *a, |_| g[0] / n);
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (h, w) = (s[2], s[3]);
                self.accumulate(grads, *a, |ga| {
                    for (p, plane) in ga.chunks_mut(h * w).enumerate() {
                        let up = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                let d = &mut plane[(y / 2) * w + x / 2];
                                *d = *d + up[y * 2 * w + x];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate_elementwise(grads, *a, |i| g[i]),
            Op::SliceFlat { input, start } => {
                let start = *start;
                self.accumulate(grads, *input, |gi| {
                    for (d, &s) in gi[start..start + g.len()].iter_mut().zip(g) {
                        *d = *d + s;
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(graph: &Graph<T>, grads: &mut [Option<Vec<T>>], v: Var, contrib: Option<Vec<T>>) {
    if let Some(c) = contrib {
        graph.accumulate(grads, v, |slot| {
            for (d, s) in slot.iter_mut().zip(c) {
                *d = *d + s;
            }
        });
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let y = g.square(x);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2], 1.0), true);
        let c = g.constant(Tensor::full(&[2], 3.0));
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1], 2.0), true);
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap();
        let l = g.sum(z);
        // z = 2x^2 -> dz/dx = 4x
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn conv_reports_offending_dims() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let err = g.conv2d(x, w, None, ConvParams::new(1, 1)).unwrap_err();
        assert!(err.to_string().contains("input channels 3"), "{err}");
    }

    #[test]
    fn upsample_repeats_pixels() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = g.upsample_nearest2x(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
