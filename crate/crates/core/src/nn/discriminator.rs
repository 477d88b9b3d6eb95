use alloc::format;
use alloc::vec::Vec;

use super::{act, check_channels, check_divisible, Bound, Builder, Conv, Network, ParamSet};
use crate::error::{config_err, Result};
use crate::tensor::{Activation, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub n_downsamples: usize,
    pub final_sigmoid: bool,
    pub activation: Activation,
}

impl DiscriminatorConfig {
    pub fn with_inputs(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_width: 16,
            n_downsamples: 3,
            final_sigmoid: true,
            activation: Activation::LeakyRelu { slope: 0.2 },
        }
    }
}

/// Patch discriminator: stride-2 4×4 convolutions and a 3×3 score head.
#[derive(Clone, Debug)]
pub struct Discriminator<T = f32> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
    down: Vec<Conv>,
    head: Conv,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.n_downsamples == 0 || config.in_channels == 0 || config.base_width == 0 {
            return Err(config_err(
                "discriminator: downsamples and channel counts must be positive",
            ));
        }
        let mut b = Builder::new(seed);
        let mut cin = config.in_channels;
        let mut down = Vec::with_capacity(config.n_downsamples);
        for k in 0..config.n_downsamples {
            let cout = config.base_width << k;
            down.push(b.conv(&format!("down{k}"), cin, cout, 4, 2, 1)?);
            cin = cout;
        }
        let head = b.conv("head", cin, 1, 3, 1, 1)?;
        Ok(Self {
            config,
            params: b.finish(),
            down,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }
}

impl<T: Scalar> Network<T> for Discriminator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        check_divisible("discriminator_forward", tape.shape(x), 1 << self.config.n_downsamples)?;
        check_channels("discriminator_forward", tape.shape(x), self.config.in_channels)?;
        let mut h = x;
        for d in &self.down {
            h = d.forward(tape, p, h)?;
            h = act(tape, h, self.config.activation)?;
        }
        let s = self.head.forward(tape, p, h)?;
        if self.config.final_sigmoid {
            Ok(tape.activate(s, Activation::Sigmoid)?)
        } else {
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_util::{audit_gradient_flow, ramp};

    #[test]
    fn patch_map_shape_and_range() {
        let d = Discriminator::<f32>::new(DiscriminatorConfig::with_inputs(1), 3).unwrap();
        let y = d.infer(&ramp(&[2, 1, 64, 64], 5).cast()).unwrap();
        assert_eq!(y.shape(), &[2, 1, 8, 8]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let cfg = DiscriminatorConfig {
            base_width: 4,
            ..DiscriminatorConfig::with_inputs(3)
        };
        let d = Discriminator::<f64>::new(cfg, 1).unwrap();
        audit_gradient_flow(&d, &ramp(&[1, 3, 16, 16], 8));
    }

    #[test]
    fn default_parameter_count_locked() {
        let d1 = Discriminator::<f32>::new(DiscriminatorConfig::with_inputs(1), 0).unwrap();
        // 1·16·16+16, 16·32·16+32, 32·64·16+64, 64·9+1
        assert_eq!(d1.params().count(), 272 + 8224 + 32832 + 577);
        let d3 = Discriminator::<f32>::new(DiscriminatorConfig::with_inputs(3), 0).unwrap();
        assert_eq!(d3.params().count() - d1.params().count(), 2 * 16 * 16);
    }
}
