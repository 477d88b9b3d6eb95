use alloc::format;
use alloc::vec::Vec;

use super::{act, check_channels, check_divisible, Bound, Builder, Conv, Network, ParamSet};
use crate::error::{config_err, Result};
use crate::tensor::{Activation, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub activation: Activation,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 3,
            base_width: 16,
            depth: 3,
            activation: Activation::LeakyRelu { slope: 0.2 },
        }
    }
}

#[derive(Clone, Debug)]
struct Level {
    down: Conv,
    conv: Conv,
}

/// Encoder–decoder with skip connections and a linear 1×1 head.
///
/// Encoder level 0 runs at full resolution; each further level halves the
/// resolution with a stride-2 convolution. The decoder upsamples
/// (nearest-neighbour), concatenates the matching encoder features and fuses
/// them with one 3×3 convolution.
#[derive(Clone, Debug)]
pub struct UNet<T = f32> {
    config: UNetConfig,
    params: ParamSet<T>,
    encoder: Vec<Level>,
    decoder: Vec<Conv>,
    head: Conv,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.depth == 0 || config.in_channels == 0 || config.out_channels == 0 || config.base_width == 0 {
            return Err(config_err("unet: depth and channel counts must be positive"));
        }
        let width = |l: usize| config.base_width << l;
        let mut b = Builder::new(seed);
        let mut encoder = Vec::with_capacity(config.depth + 1);
        for l in 0..=config.depth {
            let (cin, stride) = if l == 0 {
                (config.in_channels, 1)
            } else {
                (width(l - 1), 2)
            };
            encoder.push(Level {
                down: b.conv(&format!("enc{l}.conv0"), cin, width(l), 3, stride, 1)?,
                conv: b.conv(&format!("enc{l}.conv1"), width(l), width(l), 3, 1, 1)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.depth);
        for l in (0..config.depth).rev() {
            decoder.push(b.conv(&format!("dec{l}.conv"), width(l + 1) + width(l), width(l), 3, 1, 1)?);
        }
        let head = b.conv("head", width(0), config.out_channels, 1, 1, 0)?;
        Ok(Self {
            config,
            params: b.finish(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }
}

impl<T: Scalar> Network<T> for UNet<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        check_divisible("unet_forward", tape.shape(x), 1 << self.config.depth)?;
        check_channels("unet_forward", tape.shape(x), self.config.in_channels)?;
        let a = self.config.activation;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for (l, level) in self.encoder.iter().enumerate() {
            h = level.down.forward(tape, p, h)?;
            h = act(tape, h, a)?;
            h = level.conv.forward(tape, p, h)?;
            h = act(tape, h, a)?;
            if l < self.config.depth {
                skips.push(h);
            }
        }
        for fuse in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let up = tape.upsample_nearest2x(h)?;
            let cat = tape.concat_channels(&[up, skip])?;
            h = fuse.forward(tape, p, cat)?;
            h = act(tape, h, a)?;
        }
        self.head.forward(tape, p, h)
    }
}
