use alloc::vec;
use alloc::vec::Vec;

use super::conv::ConvGeom;
use super::{dims4, numel_of, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise op against a scalar. `RSub` computes `s − x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarOp {
    Add,
    Sub,
    RSub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Mean,
    Sum,
    MeanAbs,
    MeanSq,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    AddBias { input: Var, bias: Var },
    Upsample2x { input: Var },
    Activate { input: Var, kind: Activation },
    Binary { lhs: Var, rhs: Var, kind: BinaryOp },
    Scalar { input: Var, value: T, kind: ScalarOp },
    Reduce { input: Var, kind: ReduceOp },
    Concat { parts: Vec<Var> },
    Narrow { input: Var, start: usize },
    Ln { input: Var, eps: T },
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in creation order and replays them in reverse.
///
/// A tape is single-threaded and append-only; every entry's inputs precede
/// it, so the creation order is already a topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel_of(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Leaf that will receive gradients in [`Tape::backward`].
    pub fn variable(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        super::validate_shape(&shape)?;
        if numel_of(&shape) != data.len() {
            return Err(TensorError::DataLength { len: data.len(), shape });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is valid")
    }

    pub fn item(&self, v: Var) -> Result<T> {
        let n = self.node(v);
        if n.value.len() == 1 {
            Ok(n.value[0])
        } else {
            Err(TensorError::NonScalarLoss { shape: n.shape.clone() })
        }
    }

    /// Accumulated gradient of a leaf created with [`Tape::variable`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(
            dims4("conv2d input", self.shape(input))?,
            dims4("conv2d kernel", self.shape(kernel))?,
            stride,
            padding,
        )?;
        let value = geom.forward(self.data(input), self.data(kernel));
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(geom.output_shape(), value, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// Adds a per-channel bias of shape `[C]` to a `B×C×H×W` tensor.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let [_, c, h, w] = dims4("add_bias", self.shape(input))?;
        if self.shape(bias) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let plane = h * w;
        let b = self.data(bias);
        let value: Vec<T> = self
            .data(input)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[(i / plane) % c])
            .collect();
        let rg = self.any_grad(&[input, bias]);
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, value, Op::AddBias { input, bias }, rg))
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("upsample_nearest2x", self.shape(input))?;
        let src = self.data(input);
        let (oh, ow) = (2 * h, 2 * w);
        let mut value = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut value[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    d[y * ow + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(vec![b, c, oh, ow], value, Op::Upsample2x { input }, rg))
    }

    pub fn activate(&mut self, input: Var, kind: Activation) -> Result<Var> {
        if let Activation::LeakyRelu { slope } = kind {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(TensorError::Invalid {
                    op: "activate",
                    msg: alloc::format!("leaky_relu slope {slope} outside (0,1)"),
                });
            }
        }
        let f = |x: T| -> T {
            match kind {
                Activation::Relu => x.max(T::zero()),
                Activation::LeakyRelu { slope } => {
                    if x > T::zero() {
                        x
                    } else {
                        x * T::of(slope)
                    }
                }
                Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
                Activation::Tanh => x.tanh(),
            }
        };
        let value: Vec<T> = self.data(input).iter().map(|&x| f(x)).collect();
        let rg = self.any_grad(&[input]);
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, value, Op::Activate { input, kind }, rg))
    }

    pub fn binary(&mut self, lhs: Var, rhs: Var, kind: BinaryOp) -> Result<Var> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: self.shape(lhs).to_vec(),
                rhs: self.shape(rhs).to_vec(),
            });
        }
        let (a, b) = (self.data(lhs), self.data(rhs));
        if kind == BinaryOp::Div {
            if let Some(index) = b.iter().position(|&v| v == T::zero()) {
                return Err(TensorError::DivisionByZero { index });
            }
        }
        let value: Vec<T> = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| match kind {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
            })
            .collect();
        let rg = self.any_grad(&[lhs, rhs]);
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(shape, value, Op::Binary { lhs, rhs, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div)
    }

    pub fn scalar(&mut self, input: Var, value: T, kind: ScalarOp) -> Result<Var> {
        let x = self.data(input);
        match kind {
            ScalarOp::Div if value == T::zero() => return Err(TensorError::DivisionByZero { index: 0 }),
            ScalarOp::RSub | ScalarOp::Add | ScalarOp::Sub | ScalarOp::Mul | ScalarOp::Div => {}
        }
        let out: Vec<T> = x
            .iter()
            .map(|&v| match kind {
                ScalarOp::Add => v + value,
                ScalarOp::Sub => v - value,
                ScalarOp::RSub => value - v,
                ScalarOp::Mul => v * value,
                ScalarOp::Div => v / value,
            })
            .collect();
        let rg = self.any_grad(&[input]);
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, out, Op::Scalar { input, value, kind }, rg))
    }

    pub fn mul_scalar(&mut self, input: Var, value: T) -> Result<Var> {
        self.scalar(input, value, ScalarOp::Mul)
    }

    pub fn reduce(&mut self, input: Var, kind: ReduceOp) -> Result<Var> {
        let x = self.data(input);
        if x.is_empty() {
            return Err(TensorError::Empty { op: "reduce" });
        }
        let n = T::of(x.len() as f64);
        let v = match kind {
            ReduceOp::Sum => x.iter().copied().sum(),
            ReduceOp::Mean => x.iter().copied().sum::<T>() / n,
            ReduceOp::MeanAbs => x.iter().map(|v| v.abs()).sum::<T>() / n,
            ReduceOp::MeanSq => x.iter().map(|&v| v * v).sum::<T>() / n,
        };
        let rg = self.any_grad(&[input]);
        Ok(self.push(Vec::new(), vec![v], Op::Reduce { input, kind }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat_channels" })?;
        let [b, _, h, w] = dims4("concat_channels", self.shape(first))?;
        let mut total_c = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = dims4("concat_channels", self.shape(p))?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut value = Vec::with_capacity(b * total_c * plane);
        for bi in 0..b {
            for &p in parts {
                let pc = self.shape(p)[1];
                let src = self.data(p);
                value.extend_from_slice(&src[bi * pc * plane..(bi + 1) * pc * plane]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(vec![b, total_c, h, w], value, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Channels `start..start+len` of a `B×C×H×W` tensor.
    pub fn narrow_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = dims4("narrow_channels", self.shape(input))?;
        if len == 0 || start + len > c {
            return Err(TensorError::Dimension {
                op: "narrow_channels",
                axis: "C",
                expected: c,
                found: start + len,
            });
        }
        let plane = h * w;
        let src = self.data(input);
        let mut value = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let off = (bi * c + start) * plane;
            value.extend_from_slice(&src[off..off + len * plane]);
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(vec![b, len, h, w], value, Op::Narrow { input, start }, rg))
    }

    /// `ln(clamp(x, eps, 1 − eps))`; the clamped region has zero derivative.
    pub fn ln_clamped(&mut self, input: Var, eps: T) -> Result<Var> {
        let hi = T::one() - eps;
        let value: Vec<T> = self.data(input).iter().map(|&x| x.max(eps).min(hi).ln()).collect();
        let rg = self.any_grad(&[input]);
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, value, Op::Ln { input, eps }, rg))
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.shape.clone(),
            });
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Helper for the common case of accumulating an elementwise mapped gradient.
        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl Fn(usize) -> T) {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            buf.iter_mut().enumerate().for_each(|(k, d)| *d += f(k));
        }
        match &node.op {
            Op::Leaf => {
                let buf = self.leaf_grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                buf.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            Op::Conv2d { input, kernel, geom } => {
                let take = |grads: &mut [Option<Vec<T>>], v: Var| -> Option<Vec<T>> {
                    nodes[v.0].requires_grad.then(|| {
                        grads[v.0]
                            .take()
                            .unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.len()])
                    })
                };
                let mut gi = take(grads, *input);
                let mut gk = if kernel == input {
                    gi.as_ref().map(|b| vec![T::zero(); b.len()])
                } else {
                    take(grads, *kernel)
                };
                geom.backward(
                    &nodes[input.0].value,
                    &nodes[kernel.0].value,
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if kernel == input {
                    if let (Some(a), Some(b)) = (gi.as_mut(), gk.as_ref()) {
                        a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
                    }
                    grads[input.0] = gi;
                } else {
                    grads[input.0] = gi.or(grads[input.0].take());
                    grads[kernel.0] = gk.or(grads[kernel.0].take());
                }
            }
            Op::AddBias { input, bias } => {
                acc(grads, nodes, *input, |k| g[k]);
                if nodes[bias.0].requires_grad {
                    let shape = &node.shape;
                    let (c, plane) = (shape[1], shape[2] * shape[3]);
                    let mut db = vec![T::zero(); c];
                    for (k, chunk) in g.chunks(plane).enumerate() {
                        db[k % c] += chunk.iter().copied().sum::<T>();
                    }
                    acc(grads, nodes, *bias, |k| db[k]);
                }
            }
            Op::Upsample2x { input } => {
                let s = &nodes[input.0].shape;
                let (h, w) = (s[2], s[3]);
                let ow = 2 * w;
                acc(grads, nodes, *input, |k| {
                    let (p, r) = (k / (h * w), k % (h * w));
                    let (y, x) = (r / w, r % w);
                    let base = p * 4 * h * w;
                    let at = |yy: usize, xx: usize| g[base + yy * ow + xx];
                    at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)
                });
            }
            Op::Activate { input, kind } => {
                let x = &nodes[input.0].value;
                let y = &node.value;
                acc(grads, nodes, *input, |k| {
                    let d = match kind {
                        Activation::Relu => {
                            if x[k] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Activation::LeakyRelu { slope } => {
                            if x[k] > T::zero() {
                                T::one()
                            } else {
                                T::of(*slope)
                            }
                        }
                        Activation::Sigmoid => y[k] * (T::one() - y[k]),
                        Activation::Tanh => T::one() - y[k] * y[k],
                    };
                    g[k] * d
                });
            }
            Op::Binary { lhs, rhs, kind } => {
                let a = &nodes[lhs.0].value;
                let b = &nodes[rhs.0].value;
                match kind {
                    BinaryOp::Add => {
                        acc(grads, nodes, *lhs, |k| g[k]);
                        acc(grads, nodes, *rhs, |k| g[k]);
                    }
                    BinaryOp::Sub => {
                        acc(grads, nodes, *lhs, |k| g[k]);
                        acc(grads, nodes, *rhs, |k| -g[k]);
                    }
                    BinaryOp::Mul => {
                        acc(grads, nodes, *lhs, |k| g[k] * b[k]);
                        acc(grads, nodes, *rhs, |k| g[k] * a[k]);
                    }
                    BinaryOp::Div => {
                        acc(grads, nodes, *lhs, |k| g[k] / b[k]);
                        acc(grads, nodes, *rhs, |k| -g[k] * a[k] / (b[k] * b[k]));
                    }
                }
            }
            Op::Scalar { input, value, kind } => {
                let s = *value;
                acc(grads, nodes, *input, |k| match kind {
                    ScalarOp::Add | ScalarOp::Sub => g[k],
                    ScalarOp::RSub => -g[k],
                    ScalarOp::Mul => g[k] * s,
                    ScalarOp::Div => g[k] / s,
                });
            }
            Op::Reduce { input, kind } => {
                let x = &nodes[input.0].value;
                let n = T::of(x.len() as f64);
                let g0 = g[0];
                let two = T::of(2.0);
                acc(grads, nodes, *input, |k| match kind {
                    ReduceOp::Sum => g0,
                    ReduceOp::Mean => g0 / n,
                    ReduceOp::MeanAbs => {
                        let s = if x[k] > T::zero() {
                            T::one()
                        } else if x[k] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        g0 * s / n
                    }
                    ReduceOp::MeanSq => g0 * two * x[k] / n,
                });
            }
            Op::Concat { parts } => {
                let shape = &node.shape;
                let (b, total_c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut c0 = 0;
                for &p in parts {
                    let pc = nodes[p.0].shape[1];
                    acc(grads, nodes, p, |k| {
                        let (bi, r) = (k / (pc * plane), k % (pc * plane));
                        g[(bi * total_c + c0) * plane + r]
                    });
                    c0 += pc;
                }
                debug_assert_eq!(c0 * b * plane, g.len());
            }
            Op::Narrow { input, start } => {
                let s = &nodes[input.0].shape;
                let (c, plane) = (s[1], s[2] * s[3]);
                let len = node.shape[1];
                let start = *start;
                acc(grads, nodes, *input, |k| {
                    let (bi, r) = (k / (c * plane), k % (c * plane));
                    let ch = r / plane;
                    if ch >= start && ch < start + len {
                        g[(bi * len + ch - start) * plane + r % plane]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Ln { input, eps } => {
                let x = &nodes[input.0].value;
                let hi = T::one() - *eps;
                acc(grads, nodes, *input, |k| {
                    if x[k] >= *eps && x[k] <= hi {
                        g[k] / x[k]
                    } else {
                        T::zero()
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[1, 1, 2, 3], &[1., -2., 3., 4., 5., -6.]));
        let k = tape.constant(&t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn conv_all_ones_forced_sum() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let k = tape.constant(&Tensor::full(vec![1, 1, 2, 2], 1.0).unwrap());
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[10.0]);
    }

    #[test]
    fn upsample_replicates() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap());
        let y = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.data(y), &[5.0; 4]);
    }

    #[test]
    fn sigmoid_value_and_derivative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(&Tensor::scalar(0.0));
        let y = tape.activate(x, Activation::Sigmoid).unwrap();
        assert_eq!(tape.data(y), &[0.5]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn relu_negative_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(&Tensor::scalar(-3.0));
        let y = tape.activate(x, Activation::Relu).unwrap();
        assert_eq!(tape.data(y), &[0.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn leaky_slope_validated() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(&Tensor::scalar(1.0));
        assert!(tape.activate(x, Activation::LeakyRelu { slope: 1.5 }).is_err());
    }

    #[test]
    fn self_subtraction_is_zero() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::new(vec![3], vec![1.5, -2.0, 7.25]).unwrap());
        let z = tape.sub(a, a).unwrap();
        assert_eq!(tape.data(z), &[0.0; 3]);
    }

    #[test]
    fn scalar_inverse_pair() {
        let vals = [0.1f32, -3.7, 1e3, 2.5e-4];
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::new(vec![4], vals.to_vec()).unwrap());
        let b = tape.mul_scalar(a, 2.0).unwrap();
        let c = tape.mul_scalar(b, 0.5).unwrap();
        for (x, y) in tape.data(c).iter().zip(vals) {
            assert!((x - y).abs() <= 1e-7 * y.abs().max(1.0));
        }
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::<f64>::new();
        let a = tape.variable(&t(&[3], &[1., 2., 3.]));
        let b = tape.variable(&t(&[3], &[-4., 5., 0.5]));
        let p = tape.mul(a, b).unwrap();
        let s = tape.reduce(p, ReduceOp::Sum).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[-4., 5., 0.5]);
        assert_eq!(tape.grad(b).unwrap(), &[1., 2., 3.]);
    }

    #[test]
    fn division_by_exact_zero_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&t(&[2], &[1., 1.]));
        let b = tape.constant(&t(&[2], &[2., 0.]));
        assert_eq!(tape.div(a, b), Err(TensorError::DivisionByZero { index: 1 }));
        assert!(tape.scalar(a, 0.0, ScalarOp::Div).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&t(&[2], &[1., 1.]));
        let b = tape.constant(&t(&[3], &[1., 1., 1.]));
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::<f64>::new();
        let a = tape.variable(&t(&[4], &[1., 2., 3., 4.]));
        let m = tape.reduce(a, ReduceOp::Mean).unwrap();
        assert_eq!(tape.data(m), &[2.5]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.25; 4]);
        let z = tape.constant(&t(&[3], &[0., 0., 0.]));
        let ms = tape.reduce(z, ReduceOp::MeanSq).unwrap();
        assert_eq!(tape.data(ms), &[0.0]);
    }

    #[test]
    fn concat_then_narrow_roundtrip() {
        let mut tape = Tape::<f32>::new();
        let parts: Vec<Var> = (0..3)
            .map(|c| {
                let data = (0..8).map(|i| (c * 100 + i) as f32 * 0.37).collect();
                tape.constant(&Tensor::new(vec![2, 1, 2, 2], data).unwrap())
            })
            .collect();
        let cat = tape.concat_channels(&parts).unwrap();
        assert_eq!(tape.shape(cat), &[2, 3, 2, 2]);
        for (c, &p) in parts.iter().enumerate() {
            let s = tape.narrow_channels(cat, c, 1).unwrap();
            assert_eq!(tape.data(s), tape.data(p));
        }
    }

    #[test]
    fn concat_rejects_mismatched_spatial() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::zeros(vec![1, 1, 2, 2]).unwrap());
        let b = tape.constant(&Tensor::zeros(vec![1, 1, 2, 3]).unwrap());
        assert!(tape.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn backward_accumulates_without_zeroing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(&t(&[2], &[0.3, -1.2]));
        let y = tape.activate(x, Activation::Tanh).unwrap();
        let l = tape.reduce(y, ReduceOp::Sum).unwrap();
        tape.backward(l).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(l).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(&t(&[2], &[0.3, -1.2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn detached_values_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(&t(&[2], &[0.3, -1.2]));
        let y = tape.mul_scalar(x, 3.0).unwrap();
        let d = tape.detach(y);
        let l = tape.reduce(d, ReduceOp::Sum).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(d).is_none());
    }

    #[test]
    fn conv_with_shared_input_and_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(&t(&[1, 1, 1, 1], &[3.0]));
        let y = tape.conv2d(x, x, 1, 0).unwrap();
        let l = tape.reduce(y, ReduceOp::Sum).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.data(y), &[9.0]);
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }
}
