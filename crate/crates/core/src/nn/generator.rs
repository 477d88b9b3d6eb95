use alloc::format;
use alloc::vec::Vec;

use super::{act, check_channels, check_divisible, Bound, Builder, Conv, Network, ParamSet};
use crate::error::{config_err, Result};
use crate::tensor::{Activation, Scalar, Tape, Var};

/// Number of stride-2 stages in the generator encoder.
pub const GENERATOR_DOWNSAMPLES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_residual_blocks: usize,
    pub activation: Activation,
}

impl GeneratorConfig {
    /// CXR → DRR translator (1 → 1 channel).
    pub fn cxr_to_drr() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_width: 16,
            n_residual_blocks: 2,
            activation: Activation::LeakyRelu { slope: 0.2 },
        }
    }

    /// Component stack → CXR reconstructor (3 → 1 channels).
    pub fn components_to_cxr() -> Self {
        Self {
            in_channels: 3,
            ..Self::cxr_to_drr()
        }
    }
}

#[derive(Clone, Debug)]
struct Residual {
    a: Conv,
    b: Conv,
}

/// Encoder, residual trunk, nearest-upsample decoder, sigmoid output.
#[derive(Clone, Debug)]
pub struct Generator<T = f32> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    stem: Conv,
    down: Vec<Conv>,
    trunk: Vec<Residual>,
    up: Vec<Conv>,
    head: Conv,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.in_channels == 0 || config.out_channels == 0 || config.base_width == 0 {
            return Err(config_err("generator: channel counts must be positive"));
        }
        let w = |l: usize| config.base_width << l;
        let mut b = Builder::new(seed);
        let stem = b.conv("stem", config.in_channels, w(0), 3, 1, 1)?;
        let down = (0..GENERATOR_DOWNSAMPLES)
            .map(|l| b.conv(&format!("down{l}"), w(l), w(l + 1), 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let trunk_w = w(GENERATOR_DOWNSAMPLES);
        let trunk = (0..config.n_residual_blocks)
            .map(|r| {
                Ok(Residual {
                    a: b.conv(&format!("res{r}.conv0"), trunk_w, trunk_w, 3, 1, 1)?,
                    b: b.conv(&format!("res{r}.conv1"), trunk_w, trunk_w, 3, 1, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let up = (0..GENERATOR_DOWNSAMPLES)
            .rev()
            .map(|l| b.conv(&format!("up{l}"), w(l + 1), w(l), 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let head = b.conv("head", w(0), config.out_channels, 3, 1, 1)?;
        Ok(Self {
            config,
            params: b.finish(),
            stem,
            down,
            trunk,
            up,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }
}

impl<T: Scalar> Network<T> for Generator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        check_divisible("generator_forward", tape.shape(x), 1 << GENERATOR_DOWNSAMPLES)?;
        check_channels("generator_forward", tape.shape(x), self.config.in_channels)?;
        let a = self.config.activation;
        let mut h = self.stem.forward(tape, p, x)?;
        h = act(tape, h, a)?;
        for d in &self.down {
            h = d.forward(tape, p, h)?;
            h = act(tape, h, a)?;
        }
        for r in &self.trunk {
            let mut t = r.a.forward(tape, p, h)?;
            t = act(tape, t, a)?;
            t = r.b.forward(tape, p, t)?;
            h = tape.add(h, t)?;
        }
        for u in &self.up {
            h = tape.upsample_nearest2x(h)?;
            h = u.forward(tape, p, h)?;
            h = act(tape, h, a)?;
        }
        let out = self.head.forward(tape, p, h)?;
        Ok(tape.activate(out, Activation::Sigmoid)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_util::{audit_gradient_flow, ramp};

    #[test]
    fn output_in_unit_range_and_shape_preserved() {
        let net = Generator::<f32>::new(GeneratorConfig::components_to_cxr(), 9).unwrap();
        let x = ramp(&[2, 3, 32, 48], 1).cast::<f32>();
        let y = net.infer(&x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 32, 48]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let net = Generator::<f32>::new(GeneratorConfig::cxr_to_drr(), 9).unwrap();
        let x = ramp(&[1, 3, 16, 16], 1).cast::<f32>();
        assert!(net.infer(&x).is_err());
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let cfg = GeneratorConfig {
            base_width: 4,
            ..GeneratorConfig::components_to_cxr()
        };
        let net = Generator::<f64>::new(cfg, 4).unwrap();
        audit_gradient_flow(&net, &ramp(&[1, 3, 16, 16], 2));
    }

    #[test]
    fn default_parameter_counts_locked() {
        let gd = Generator::<f32>::new(GeneratorConfig::cxr_to_drr(), 0).unwrap();
        let gx = Generator::<f32>::new(GeneratorConfig::components_to_cxr(), 0).unwrap();
        // stem 160, down 4640+18496, res 2·2·36928, up 18464+4624, head 145
        assert_eq!(gd.params().count(), 160 + 4640 + 18496 + 4 * 36928 + 18464 + 4624 + 145);
        assert_eq!(gx.params().count() - gd.params().count(), 2 * 9 * 16);
    }
}
