//! Latent assembly, loss terms, soft bone mask and component modulation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::nn::{Bound, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Network, UNet, UNetConfig};
use crate::rng::mix;
use crate::tensor::{ReduceOp, Scalar, ScalarOp, Tape, Tensor, TensorError, Var};

/// Clamp applied to discriminator scores before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

/// Default soft-mask threshold.
pub const MASK_THRESHOLD: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    FromGDec,
    GroundTruth,
}

/// The three `B×1×H×W` latent maps on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LatentMaps {
    pub bone: Var,
    pub lung: Var,
    pub other: Var,
    pub source: LatentSource,
}

impl LatentMaps {
    /// Splits a `B×3×H×W` stack into bone, lung and other channels.
    pub fn split<T: Scalar>(tape: &mut Tape<T>, z: Var, source: LatentSource) -> Result<Self> {
        let shape = tape.shape(z);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(TensorError::Dimension {
                op: "latent_split",
                axis: "C",
                expected: 3,
                found: shape.get(1).copied().unwrap_or(0),
            }
            .into());
        }
        Ok(Self {
            bone: tape.narrow_channels(z, 0, 1)?,
            lung: tape.narrow_channels(z, 1, 1)?,
            other: tape.narrow_channels(z, 2, 1)?,
            source,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ComponentWeights {
    pub alpha_b: f32,
    pub alpha_l: f32,
    pub alpha_o: f32,
}

impl ComponentWeights {
    pub const IDENTITY: Self = Self::new(1.0, 1.0, 1.0);
    pub const BONE_SUPPRESS: Self = Self::new(0.0, 1.0, 1.0);
    pub const LUNG_ENHANCE: Self = Self::new(1.0, 2.0, 1.0);

    pub const fn new(alpha_b: f32, alpha_l: f32, alpha_o: f32) -> Self {
        Self {
            alpha_b,
            alpha_l,
            alpha_o,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_b", self.alpha_b),
            ("alpha_l", self.alpha_l),
            ("alpha_o", self.alpha_o),
        ] {
            if !v.is_finite() {
                return Err(config_err(alloc::format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda_dec: f32,
    pub lambda_adv: f32,
    pub lambda_cyc: f32,
    pub lambda_mask: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dec: 1.0,
            lambda_adv: 1.0,
            lambda_cyc: 10.0,
            lambda_mask: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_dec, self.lambda_adv, self.lambda_cyc, self.lambda_mask];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(config_err("loss weights must be nonnegative and finite"));
        }
        Ok(())
    }
}

/// Form of the adversarial objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AdversarialForm {
    /// Generator minimizes `−log D(fake)`.
    #[default]
    NonSaturating,
    /// Generator minimizes `log(1 − D(fake))`.
    Saturating,
    /// Squared distance of scores to the 0/1 targets.
    LeastSquares,
}

/// Weighted stack `[α_b·z_bone, α_l·z_lung, α_o·(gd − z_bone − z_lung)]`.
///
/// Unit weights pass the channel through unchanged and zero weights give an
/// exact zero channel, so the process and bone-free stacks are the special
/// cases (1,1,1) and (0,1,1).
pub fn assemble<T: Scalar>(tape: &mut Tape<T>, z: &LatentMaps, gd_out: Var, w: ComponentWeights) -> Result<Var> {
    w.validate()?;
    let residual = tape.sub(gd_out, z.bone)?;
    let residual = tape.sub(residual, z.lung)?;
    let b = weighted(tape, z.bone, w.alpha_b)?;
    let l = weighted(tape, z.lung, w.alpha_l)?;
    let o = weighted(tape, residual, w.alpha_o)?;
    Ok(tape.concat_channels(&[b, l, o])?)
}

fn weighted<T: Scalar>(tape: &mut Tape<T>, v: Var, alpha: f32) -> Result<Var> {
    if alpha == 1.0 {
        Ok(v)
    } else if alpha == 0.0 {
        let shape = tape.shape(v).to_vec();
        let n = shape.iter().product();
        Ok(tape.constant_from(shape, vec![T::zero(); n])?)
    } else {
        Ok(tape.mul_scalar(v, T::of(alpha as f64))?)
    }
}

pub fn assemble_z_process<T: Scalar>(tape: &mut Tape<T>, z: &LatentMaps, gd_out: Var) -> Result<Var> {
    assemble(tape, z, gd_out, ComponentWeights::IDENTITY)
}

pub fn assemble_z_bonefree<T: Scalar>(tape: &mut Tape<T>, z: &LatentMaps, gd_out: Var) -> Result<Var> {
    assemble(tape, z, gd_out, ComponentWeights::BONE_SUPPRESS)
}

/// `G_X` applied to the weighted stack. Training and inference both go
/// through here.
pub fn reconstruct<T: Scalar>(
    tape: &mut Tape<T>,
    gx: &Generator<T>,
    gx_params: &Bound,
    z: &LatentMaps,
    gd_out: Var,
    w: ComponentWeights,
) -> Result<Var> {
    let stack = assemble(tape, z, gd_out, w)?;
    gx.forward(tape, gx_params, stack)
}

/// Mean squared error.
pub fn decomposition_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    Ok(tape.reduce(d, ReduceOp::MeanSq)?)
}

fn mean_abs_diff<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    Ok(tape.reduce(d, ReduceOp::MeanAbs)?)
}

/// `mean |recon − x|`.
pub fn cycle_loss_x<T: Scalar>(tape: &mut Tape<T>, recon: Var, x: Var) -> Result<Var> {
    mean_abs_diff(tape, recon, x)
}

/// `mean |G_D(G_X(I_Dec)) − d|`.
pub fn cycle_loss_d<T: Scalar>(tape: &mut Tape<T>, recon: Var, d: Var) -> Result<Var> {
    mean_abs_diff(tape, recon, d)
}

fn check_scores<T: Scalar>(tape: &Tape<T>, v: Var, term: &'static str) -> Result<()> {
    for &s in tape.data(v) {
        let s = s.as_f64();
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::OutOfRange {
                what: term,
                value: s,
                lo: 0.0,
                hi: 1.0,
            });
        }
    }
    Ok(())
}

/// `−mean log(s)`, or `mean (s − 1)²` in least-squares form.
fn score_toward_one<T: Scalar>(tape: &mut Tape<T>, s: Var, form: AdversarialForm) -> Result<Var> {
    if form == AdversarialForm::LeastSquares {
        let d = tape.scalar(s, T::one(), ScalarOp::Sub)?;
        return Ok(tape.reduce(d, ReduceOp::MeanSq)?);
    }
    let l = tape.ln_clamped(s, T::of(SCORE_EPS))?;
    let m = tape.reduce(l, ReduceOp::Mean)?;
    Ok(tape.mul_scalar(m, -T::one())?)
}

/// `−mean log(1 − s)`, or `mean s²` in least-squares form.
fn score_toward_zero<T: Scalar>(tape: &mut Tape<T>, s: Var, form: AdversarialForm) -> Result<Var> {
    if form == AdversarialForm::LeastSquares {
        return Ok(tape.reduce(s, ReduceOp::MeanSq)?);
    }
    let c = tape.scalar(s, T::one(), ScalarOp::RSub)?;
    let l = tape.ln_clamped(c, T::of(SCORE_EPS))?;
    let m = tape.reduce(l, ReduceOp::Mean)?;
    Ok(tape.mul_scalar(m, -T::one())?)
}

/// Discriminator objective: real scores pushed to 1, fake scores to 0.
pub fn adversarial_d_loss<T: Scalar>(
    tape: &mut Tape<T>,
    d_real: Var,
    d_fake: Var,
    form: AdversarialForm,
) -> Result<Var> {
    check_scores(tape, d_real, "d_real")?;
    check_scores(tape, d_fake, "d_fake")?;
    let r = score_toward_one(tape, d_real, form)?;
    let f = score_toward_zero(tape, d_fake, form)?;
    Ok(tape.add(r, f)?)
}

/// Generator objective on the discriminator's scores for its fakes.
pub fn adversarial_g_loss<T: Scalar>(tape: &mut Tape<T>, d_fake: Var, form: AdversarialForm) -> Result<Var> {
    check_scores(tape, d_fake, "d_fake")?;
    match form {
        AdversarialForm::NonSaturating | AdversarialForm::LeastSquares => score_toward_one(tape, d_fake, form),
        AdversarialForm::Saturating => {
            let c = tape.scalar(d_fake, T::one(), ScalarOp::RSub)?;
            let l = tape.ln_clamped(c, T::of(SCORE_EPS))?;
            Ok(tape.reduce(l, ReduceOp::Mean)?)
        }
    }
}

/// Per-pixel weights `1 − (z − t)/(1 − t)·δ[z ≥ t]` with `z` clamped to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask<T = f32> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub threshold: f64,
}

pub fn soft_mask_value(z: f64, t: f64) -> f64 {
    let z = z.clamp(0.0, 1.0);
    if z >= t {
        1.0 - (z - t) / (1.0 - t)
    } else {
        1.0
    }
}

pub fn soft_mask<T: Scalar>(z_bone: &Tensor<T>, t: f64) -> Result<SoftMask<T>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(config_err(alloc::format!("mask threshold must lie in (0, 1), got {t}")));
    }
    Ok(SoftMask {
        shape: z_bone.shape().to_vec(),
        values: z_bone
            .data()
            .iter()
            .map(|&z| T::of(soft_mask_value(z.as_f64(), t)))
            .collect(),
        threshold: t,
    })
}

/// `mean |recon·M − x·M|` over all pixels; the mask is a constant.
pub fn mask_loss<T: Scalar>(tape: &mut Tape<T>, recon_bonefree: Var, x: Var, mask: &SoftMask<T>) -> Result<Var> {
    let m = tape.constant_from(mask.shape.clone(), mask.values.clone())?;
    let a = tape.mul(recon_bonefree, m)?;
    let b = tape.mul(x, m)?;
    mean_abs_diff(tape, a, b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecGanConfig {
    pub g_d: GeneratorConfig,
    pub g_x: GeneratorConfig,
    pub g_dec: UNetConfig,
    pub d_d: DiscriminatorConfig,
    pub d_x: DiscriminatorConfig,
    pub d_dec: DiscriminatorConfig,
}

impl Default for DecGanConfig {
    fn default() -> Self {
        Self {
            g_d: GeneratorConfig::cxr_to_drr(),
            g_x: GeneratorConfig::components_to_cxr(),
            g_dec: UNetConfig::default(),
            d_d: DiscriminatorConfig::with_inputs(1),
            d_x: DiscriminatorConfig::with_inputs(1),
            d_dec: DiscriminatorConfig::with_inputs(3),
        }
    }
}

impl DecGanConfig {
    /// Scales every network's base width, for small test models.
    pub fn with_width(width: usize) -> Self {
        let mut c = Self::default();
        c.g_d.base_width = width;
        c.g_x.base_width = width;
        c.g_dec.base_width = width;
        c.d_d.base_width = width;
        c.d_x.base_width = width;
        c.d_dec.base_width = width;
        c
    }

    /// Required divisor of image height and width.
    pub fn size_multiple(&self) -> usize {
        let g = 1 << crate::nn::GENERATOR_DOWNSAMPLES;
        let u = 1 << self.g_dec.depth;
        let d = [self.d_d, self.d_x, self.d_dec]
            .iter()
            .map(|c| 1usize << c.n_downsamples)
            .max()
            .unwrap_or(1);
        g.max(u).max(d)
    }

    pub fn validate(&self) -> Result<()> {
        let io = [
            ("g_d", self.g_d.in_channels, 1),
            ("g_d out", self.g_d.out_channels, 1),
            ("g_x", self.g_x.in_channels, 3),
            ("g_x out", self.g_x.out_channels, 1),
            ("g_dec", self.g_dec.in_channels, 1),
            ("g_dec out", self.g_dec.out_channels, 3),
            ("d_d", self.d_d.in_channels, 1),
            ("d_x", self.d_x.in_channels, 1),
            ("d_dec", self.d_dec.in_channels, 3),
        ];
        for (name, found, expected) in io {
            if found != expected {
                return Err(config_err(alloc::format!(
                    "{name}: expected {expected} channels, found {found}"
                )));
            }
        }
        Ok(())
    }
}

/// The six networks.
#[derive(Clone, Debug)]
pub struct DecGan<T = f32> {
    pub config: DecGanConfig,
    pub g_d: Generator<T>,
    pub g_x: Generator<T>,
    pub g_dec: UNet<T>,
    pub d_d: Discriminator<T>,
    pub d_x: Discriminator<T>,
    pub d_dec: Discriminator<T>,
}

/// Network names in checkpoint order.
pub const NETWORK_NAMES: [&str; 6] = ["g_d", "g_x", "g_dec", "d_d", "d_x", "d_dec"];

/// Output of one inference pass.
#[derive(Clone, Debug)]
pub struct Modulated<T = f32> {
    pub x_m: Tensor<T>,
    pub gd_out: Tensor<T>,
    /// `B×3×H×W`: z_bone, z_lung and the residual `gd − z_bone − z_lung`.
    pub z: Tensor<T>,
}

impl<T: Scalar> DecGan<T> {
    pub fn new(config: DecGanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let s = |k: u64| mix(seed, k);
        Ok(Self {
            config,
            g_d: Generator::new(config.g_d, s(1))?,
            g_x: Generator::new(config.g_x, s(2))?,
            g_dec: UNet::new(config.g_dec, s(3))?,
            d_d: Discriminator::new(config.d_d, s(4))?,
            d_x: Discriminator::new(config.d_x, s(5))?,
            d_dec: Discriminator::new(config.d_dec, s(6))?,
        })
    }

    pub fn params(&self) -> [&crate::nn::ParamSet<T>; 6] {
        [
            self.g_d.params(),
            self.g_x.params(),
            self.g_dec.params(),
            self.d_d.params(),
            self.d_x.params(),
            self.d_dec.params(),
        ]
    }

    pub fn params_mut(&mut self) -> [&mut crate::nn::ParamSet<T>; 6] {
        [
            self.g_d.params_mut(),
            self.g_x.params_mut(),
            self.g_dec.params_mut(),
            self.d_d.params_mut(),
            self.d_x.params_mut(),
            self.d_dec.params_mut(),
        ]
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let m = self.config.size_multiple();
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || !s[2].is_multiple_of(m) || !s[3].is_multiple_of(m) || s[2] == 0 || s[3] == 0 {
            return Err(Error::ExtentMismatch {
                what: "input image (B×1×H×W, H and W multiples of the network stride)",
                expected: vec![s.first().copied().unwrap_or(1), 1, m, m],
                found: s.to_vec(),
            });
        }
        Ok(())
    }

    /// `X ↦ (G_D(X), G_Dec(G_D(X)), X_m)` for weights `w`.
    pub fn modulate(&self, x: &Tensor<T>, w: ComponentWeights) -> Result<Modulated<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let gd = self.g_d.forward_frozen(&mut tape, xv)?;
        let z = self.g_dec.forward_frozen(&mut tape, gd)?;
        let maps = LatentMaps::split(&mut tape, z, LatentSource::FromGDec)?;
        let gxp = self.g_x.params().bind(&mut tape, false);
        let x_m = reconstruct(&mut tape, &self.g_x, &gxp, &maps, gd, w)?;
        let z_out = assemble_z_process(&mut tape, &maps, gd)?;
        Ok(Modulated {
            x_m: tape.tensor(x_m),
            gd_out: tape.tensor(gd),
            z: tape.tensor(z_out),
        })
    }
}

/// `G_X` on the weighted stack built from a `G_D` output and `G_Dec` maps.
pub fn modulate<T: Scalar>(
    gx: &Generator<T>,
    gd_out: &Tensor<T>,
    z: &Tensor<T>,
    w: ComponentWeights,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let gd = tape.constant(gd_out);
    let zv = tape.constant(z);
    let maps = LatentMaps::split(&mut tape, zv, LatentSource::FromGDec)?;
    let p = gx.params().bind(&mut tape, false);
    let out = reconstruct(&mut tape, gx, &p, &maps, gd, w)?;
    Ok(tape.tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_util::ramp;

    fn setup(tape: &mut Tape<f64>, seed: u64) -> (LatentMaps, Var, Var) {
        let z = tape.variable(&ramp(&[2, 3, 4, 4], seed));
        let gd = tape.variable(&ramp(&[2, 1, 4, 4], seed + 1));
        (LatentMaps::split(tape, z, LatentSource::FromGDec).unwrap(), gd, z)
    }

    #[test]
    fn process_channels_sum_to_gd() {
        let mut tape = Tape::new();
        let (m, gd, _) = setup(&mut tape, 3);
        let zp = assemble_z_process(&mut tape, &m, gd).unwrap();
        let t = tape.tensor(zp);
        let g = tape.tensor(gd);
        for b in 0..2 {
            for p in 0..16 {
                let s: f64 = (0..3).map(|c| t.data()[(b * 3 + c) * 16 + p]).sum();
                assert!((s - g.data()[b * 16 + p]).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn zero_latents_leave_gd_in_residual() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(&Tensor::zeros([1, 3, 4, 4]).unwrap());
        let gd = tape.constant(&ramp(&[1, 1, 4, 4], 2));
        let m = LatentMaps::split(&mut tape, z, LatentSource::GroundTruth).unwrap();
        let zp = assemble_z_process(&mut tape, &m, gd).unwrap();
        assert_eq!(&tape.data(zp)[32..], tape.data(gd));
    }

    #[test]
    fn residual_gradient_wrt_bone() {
        let mut tape = Tape::new();
        let (m, gd, z) = setup(&mut tape, 5);
        let zp = assemble_z_process(&mut tape, &m, gd).unwrap();
        let third = tape.narrow_channels(zp, 2, 1).unwrap();
        let loss = tape.reduce(third, ReduceOp::Mean).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        for b in 0..2 {
            for p in 0..16 {
                assert!((g[b * 48 + p] + 1.0 / 32.0).abs() < 1e-12);
                assert_eq!(g[b * 48 + 32 + p], 0.0);
            }
        }
    }

    #[test]
    fn bonefree_zeroes_only_first_channel() {
        let mut tape = Tape::new();
        let (m, gd, z) = setup(&mut tape, 8);
        let zp = assemble_z_process(&mut tape, &m, gd).unwrap();
        let zb = assemble_z_bonefree(&mut tape, &m, gd).unwrap();
        let (p, f) = (tape.data(zp).to_vec(), tape.data(zb).to_vec());
        for b in 0..2 {
            assert!(f[b * 48..b * 48 + 16].iter().all(|&v| v == 0.0));
            assert_eq!(f[b * 48 + 16..b * 48 + 48], p[b * 48 + 16..b * 48 + 48]);
        }
        // Bone still reaches the loss through the residual, not through channel 0.
        let loss = tape.reduce(zb, ReduceOp::Sum).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        assert!(g[..16].iter().all(|&v| v == -1.0));
        assert!(g[16..32].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regression_losses() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&ramp(&[2, 3, 4, 4], 1));
        let shifted: Vec<f64> = tape.data(a).iter().map(|v| v + 0.1).collect();
        let b = tape.constant_from(vec![2, 3, 4, 4], shifted).unwrap();
        let l = decomposition_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.item(l).unwrap(), 0.0);
        let l = decomposition_loss(&mut tape, b, a).unwrap();
        assert!((tape.item(l).unwrap() - 0.01).abs() < 1e-12);
        let l = cycle_loss_x(&mut tape, b, a).unwrap();
        assert!((tape.item(l).unwrap() - 0.1).abs() < 1e-12);
        let l = cycle_loss_d(&mut tape, a, a).unwrap();
        assert_eq!(tape.item(l).unwrap(), 0.0);
        let c = tape.constant(&ramp(&[2, 1, 4, 4], 1));
        assert!(cycle_loss_x(&mut tape, a, c).is_err());
    }

    fn scores(tape: &mut Tape<f64>, v: f64) -> Var {
        tape.variable(&Tensor::full([1, 1, 2, 2], v).unwrap())
    }

    #[test]
    fn adversarial_values() {
        let mut tape = Tape::new();
        let f = AdversarialForm::NonSaturating;
        let (r, k) = (scores(&mut tape, 1.0 - 1e-7), scores(&mut tape, 1e-7));
        let l = adversarial_d_loss(&mut tape, r, k, f).unwrap();
        assert!(tape.item(l).unwrap() < 1e-5);
        let h = scores(&mut tape, 0.5);
        let l = adversarial_d_loss(&mut tape, h, h, f).unwrap();
        assert!((tape.item(l).unwrap() - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
        let l = adversarial_g_loss(&mut tape, h, f).unwrap();
        assert!((tape.item(l).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        let l = adversarial_g_loss(&mut tape, r, f).unwrap();
        assert!(tape.item(l).unwrap() < 1e-5);
        let bad = scores(&mut tape, 1.5);
        assert!(adversarial_g_loss(&mut tape, bad, f).is_err());
    }

    #[test]
    fn adversarial_gradient_signs() {
        for form in [
            AdversarialForm::NonSaturating,
            AdversarialForm::Saturating,
            AdversarialForm::LeastSquares,
        ] {
            let mut tape = Tape::new();
            let r = scores(&mut tape, 0.6);
            let k = scores(&mut tape, 0.4);
            let l = adversarial_d_loss(&mut tape, r, k, form).unwrap();
            tape.backward(l).unwrap();
            assert!(tape.grad(k).unwrap().iter().all(|&g| g > 0.0));
            assert!(tape.grad(r).unwrap().iter().all(|&g| g < 0.0));
            let mut tape = Tape::new();
            let k = scores(&mut tape, 0.4);
            let l = adversarial_g_loss(&mut tape, k, form).unwrap();
            tape.backward(l).unwrap();
            assert!(tape.grad(k).unwrap().iter().all(|&g| g < 0.0), "{form:?}");
        }
    }

    #[test]
    fn mask_values() {
        let z = Tensor::<f64>::new([1, 1, 1, 6], vec![0.5, 0.95, 0.975, 1.0, 1.3, -0.2]).unwrap();
        let m = soft_mask(&z, MASK_THRESHOLD).unwrap();
        let want = [1.0, 1.0, 0.5, 0.0, 0.0, 1.0];
        for (a, b) in m.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(soft_mask(&z, 1.0).is_err());
        assert!(soft_mask(&z, 0.0).is_err());
    }

    #[test]
    fn mask_loss_laws() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&ramp(&[1, 1, 2, 2], 4));
        let zb = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 0.2, 1.0]).unwrap();
        let m = soft_mask(&zb, 0.95).unwrap();
        let mut moved = tape.data(x).to_vec();
        moved[1] += 0.7;
        moved[3] -= 0.3;
        let r = tape.constant_from(vec![1, 1, 2, 2], moved).unwrap();
        let l = mask_loss(&mut tape, r, x, &m).unwrap();
        assert_eq!(tape.item(l).unwrap(), 0.0);
        let ones = soft_mask(&Tensor::zeros([1, 1, 2, 2]).unwrap(), 0.95).unwrap();
        let l = mask_loss(&mut tape, r, x, &ones).unwrap();
        let c = cycle_loss_x(&mut tape, r, x).unwrap();
        assert_eq!(tape.item(l).unwrap(), tape.item(c).unwrap());
    }

    #[test]
    fn modulation_shares_reconstruction_path() {
        let net = DecGan::<f32>::new(DecGanConfig::with_width(4), 11).unwrap();
        let x = ramp(&[1, 1, 16, 16], 2).cast::<f32>();
        let plain = {
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let gd = net.g_d.forward_frozen(&mut tape, xv).unwrap();
            let z = net.g_dec.forward_frozen(&mut tape, gd).unwrap();
            let m = LatentMaps::split(&mut tape, z, LatentSource::FromGDec).unwrap();
            let zp = assemble_z_process(&mut tape, &m, gd).unwrap();
            let zb = assemble_z_bonefree(&mut tape, &m, gd).unwrap();
            let a = net.g_x.forward_frozen(&mut tape, zp).unwrap();
            let b = net.g_x.forward_frozen(&mut tape, zb).unwrap();
            (tape.tensor(a), tape.tensor(b))
        };
        let id = net.modulate(&x, ComponentWeights::IDENTITY).unwrap();
        let bf = net.modulate(&x, ComponentWeights::BONE_SUPPRESS).unwrap();
        assert_eq!(id.x_m.data(), plain.0.data());
        assert_eq!(bf.x_m.data(), plain.1.data());
        assert!(net.modulate(&x, ComponentWeights::new(f32::NAN, 1.0, 1.0)).is_err());
        let lung = net.modulate(&x, ComponentWeights::LUNG_ENHANCE).unwrap();
        assert!(lung.x_m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
