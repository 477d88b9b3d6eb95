use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one parameter list, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
            .unzip();
        Self { config, step: 0, m, v }
    }
}

/// One bias-corrected adaptive-moment update over `(name, param)` pairs.
///
/// Gradients are read, never cleared. Fails before touching any parameter
/// when one of them has no gradient.
pub fn adam_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    state: &mut AdamState<T>,
) -> Result<()> {
    let params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
    if params.len() != state.m.len() {
        return Err(TensorError::Invalid {
            op: "adam_step",
            msg: alloc::format!(
                "{} parameters but optimizer state holds {}",
                params.len(),
                state.m.len()
            ),
        });
    }
    for (i, (name, p)) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(TensorError::MissingGrad {
                name: String::from(*name),
            });
        }
        if state.m[i].len() != p.numel() {
            return Err(TensorError::DataLength {
                len: state.m[i].len(),
                shape: p.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::of(1.0 - libm::pow(c.beta1, t));
    let bc2 = T::of(1.0 - libm::pow(c.beta2, t));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    for (i, (_, p)) in params.into_iter().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (T::one() - b1) * g[k];
            v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
