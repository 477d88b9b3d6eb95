//! Parameter containers and forward passes for the six networks.
//!
//! Every network owns a [`ParamSet`] of dotted-name tensors. A forward pass
//! first binds the set onto a [`Tape`] (as trainable leaves or as constants)
//! and then records its layers against the returned [`Bound`] handles, so
//! the forward function is pure in `(params, input)`.

mod discriminator;
mod generator;
mod unet;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{config_err, Result};
use crate::rng;
use crate::tensor::{Activation, Scalar, Tape, Tensor, TensorError, Var};

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig, GENERATOR_DOWNSAMPLES};
pub use unet::{UNet, UNetConfig};

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Tape handles for a bound [`ParamSet`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles recorded elsewhere, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, index: usize) -> Var {
        self.0[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(config_err(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape`; trainable binds receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| if trainable { tape.variable(t) } else { tape.constant(t) })
                .collect(),
        )
    }

    /// Adds the tape's leaf gradients into each tensor's gradient buffer.
    ///
    /// Tensors that received no gradient get an explicit zero buffer so the
    /// optimizer sees every parameter.
    pub fn pull_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![T::zero(); t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Replaces values from another set with identical names and shapes.
    pub fn load_from(&mut self, other: impl Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other(name).ok_or_else(|| config_err(format!("missing parameter `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load parameters",
                    lhs: t.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                }
                .into());
            }
            *t = src;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Convolution plus per-channel bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.var(self.weight), self.stride, self.pad)?;
        Ok(tape.add_bias(y, p.var(self.bias))?)
    }
}

/// Builds layers while drawing weights ±√(1/fan_in) and zero biases.
pub(crate) struct Builder<T> {
    params: ParamSet<T>,
    rng: rng::Rng,
}

impl<T: Scalar> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: ParamSet::new(),
            rng: rng::stream(seed, 0),
        }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Conv> {
        let fan_in = cin * k * k;
        let bound = libm::sqrt(1.0 / fan_in as f64);
        let data: Vec<T> = (0..cout * fan_in)
            .map(|_| T::of(self.rng.random_range(-bound..bound)))
            .collect();
        let weight = self
            .params
            .push(format!("{name}.weight"), Tensor::new(vec![cout, cin, k, k], data)?)?;
        let bias = self.params.push(format!("{name}.bias"), Tensor::zeros(vec![cout])?)?;
        Ok(Conv {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn finish(self) -> ParamSet<T> {
        self.params
    }
}

pub(crate) fn check_divisible(op: &'static str, shape: &[usize], factor: usize) -> Result<()> {
    let dims = crate::tensor::TensorError::Rank {
        op,
        expected: 4,
        shape: shape.to_vec(),
    };
    let [_, _, h, w] = <[usize; 4]>::try_from(shape).map_err(|_| dims)?;
    for (axis, v) in [("H", h), ("W", w)] {
        if v % factor != 0 {
            return Err(TensorError::Dimension {
                op,
                axis,
                expected: v.next_multiple_of(factor),
                found: v,
            }
            .into());
        }
    }
    Ok(())
}

pub(crate) fn check_channels(op: &'static str, shape: &[usize], expected: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != expected {
        return Err(TensorError::Dimension {
            op,
            axis: "C",
            expected,
            found: shape.get(1).copied().unwrap_or(0),
        }
        .into());
    }
    Ok(())
}

/// Common surface of the six networks.
pub trait Network<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;

    /// Records the forward pass of `x` against previously bound parameters.
    fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var>;

    /// Forward pass with parameters recorded as constants.
    fn forward_frozen(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let p = self.params().bind(tape, false);
        self.forward(tape, &p, x)
    }

    /// Tape-free evaluation on a concrete input.
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = self.forward_frozen(&mut tape, xv)?;
        Ok(tape.tensor(y))
    }
}

pub(crate) fn act<T: Scalar>(tape: &mut Tape<T>, x: Var, kind: Activation) -> Result<Var> {
    Ok(tape.activate(x, kind)?)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.push("a", Tensor::zeros(vec![1]).unwrap()).unwrap();
        assert!(p.push("a", Tensor::zeros(vec![1]).unwrap()).is_err());
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let mut a = Builder::<f32>::new(7);
        a.conv("c", 3, 4, 3, 1, 1).unwrap();
        let mut b = Builder::<f32>::new(7);
        b.conv("c", 3, 4, 3, 1, 1).unwrap();
        let (a, b) = (a.finish(), b.finish());
        assert_eq!(a, b);
        assert!(a.get("c.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let bound = libm::sqrtf(1.0 / 27.0);
        assert!(a.get("c.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_spread_matches_uniform_moments() {
        // 10k+ weights: fan_in = 100·3·3 = 900, 12·900 = 10800 samples.
        let mut b = Builder::<f64>::new(3);
        b.conv("c", 100, 12, 3, 1, 1).unwrap();
        let p = b.finish();
        let w = p.get("c.weight").unwrap().data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = libm::sqrt(w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n);
        let expected = (1.0 / libm::sqrt(900.0)) / libm::sqrt(3.0);
        assert!((sd - expected).abs() < 0.2 * expected, "sd {sd} vs {expected}");
    }
}
