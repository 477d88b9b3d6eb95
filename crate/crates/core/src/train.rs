//! Unpaired two-cycle training: batches, one alternating step, evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::dataset::{EvalSet, UnpairedDataset};
use crate::decgan::{
    adversarial_d_loss, adversarial_g_loss, cycle_loss_d, cycle_loss_x, decomposition_loss, mask_loss, reconstruct,
    soft_mask, AdversarialForm, ComponentWeights, DecGan, DecGanConfig, LatentMaps, LatentSource, LossWeights,
    MASK_THRESHOLD,
};
use crate::drr::{Domain, Image2D};
use crate::error::{config_err, Error, Result};
use crate::metrics::{MetricReport, MetricRow};
use crate::nn::{Network, ParamSet};
use crate::rng::{mix, stream};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};

/// Soft-mask onset as a fraction of the corpus bone maximum, used when
/// `mask_bone_scale` is unset.
pub const AUTO_MASK_FRACTION: f32 = 0.05;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub dataset_dir: Option<String>,
    pub eval_dir: Option<String>,
    pub base_width: usize,
    pub adversarial: AdversarialForm,
    pub mask_threshold: f64,
    /// Multiplier applied to `z_bone` before the soft mask. `None` derives it
    /// from the DRR corpus.
    pub mask_bone_scale: Option<f32>,
    pub use_d_dec: bool,
    pub use_mask_loss: bool,
    /// Leading steps that train `G_Dec` alone on `L_Dec`.
    pub dec_warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            batch_size: 4,
            steps: 3000,
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            seed: 17,
            checkpoint_interval: 500,
            dataset_dir: None,
            eval_dir: None,
            base_width: 16,
            adversarial: AdversarialForm::default(),
            mask_threshold: MASK_THRESHOLD,
            mask_bone_scale: None,
            use_d_dec: true,
            use_mask_loss: true,
            dec_warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn networks(&self) -> DecGanConfig {
        DecGanConfig::with_width(self.base_width)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        let m = self.networks().size_multiple();
        if self.image_size == 0 || !self.image_size.is_multiple_of(m) {
            return Err(config_err(format!(
                "image_size {} must be a positive multiple of {m}",
                self.image_size
            )));
        }
        if self.batch_size == 0 || self.base_width == 0 {
            return Err(config_err("batch_size and base_width must be positive"));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(config_err("mask_threshold must lie in (0, 1)"));
        }
        if let Some(s) = self.mask_bone_scale {
            if !(s > 0.0) || !s.is_finite() {
                return Err(config_err("mask_bone_scale must be positive and finite"));
            }
        }
        let a = self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(config_err("invalid optimizer hyperparameters"));
        }
        Ok(())
    }

    /// The ablation without `D_Dec` and without the mask loss.
    pub fn ablated(&self) -> Self {
        Self {
            use_d_dec: false,
            use_mask_loss: false,
            ..self.clone()
        }
    }
}

/// One training batch. `x` and `(d, i_dec)` come from independent draws.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedBatch {
    /// `B×1×H×W` CXR-domain images.
    pub x: Tensor<f32>,
    /// `B×1×H×W` DRRs.
    pub d: Tensor<f32>,
    /// `B×3×H×W` bone, lung and other components of `d`.
    pub i_dec: Tensor<f32>,
}

/// Stacks equally sized images into `B×C×H×W`, `C` images per sample.
pub fn images_to_tensor<'a>(samples: impl IntoIterator<Item = &'a [&'a Image2D]>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut b = 0;
    for s in samples {
        for img in s {
            let d = (s.len(), img.height, img.width);
            if *dims.get_or_insert(d) != d {
                return Err(Error::ExtentMismatch {
                    what: "batch image",
                    expected: vec![dims.unwrap().1, dims.unwrap().2],
                    found: vec![img.height, img.width],
                });
            }
            data.extend_from_slice(&img.data);
        }
        b += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| Error::Data(String::from("empty batch")))?;
    Ok(Tensor::new([b, c, h, w], data)?)
}

/// Splits channel `c` of a `B×C×H×W` tensor into display images.
pub fn tensor_to_images(t: &Tensor<f32>, c: usize) -> Result<Vec<Image2D>> {
    let s = t.shape();
    if s.len() != 4 || c >= s[1] {
        return Err(Error::ExtentMismatch {
            what: "image tensor (B×C×H×W)",
            expected: vec![0, c + 1, 0, 0],
            found: s.to_vec(),
        });
    }
    let plane = s[2] * s[3];
    (0..s[0])
        .map(|b| {
            let off = (b * s[1] + c) * plane;
            Image2D::new(s[2], s[3], t.data()[off..off + plane].to_vec(), Domain::Display)
        })
        .collect()
}

/// Draws a batch with replacement; determined by `(seed, step)`.
pub fn sample_batch(data: &UnpairedDataset, batch_size: usize, seed: u64, step: u64) -> Result<UnpairedBatch> {
    if data.cxr.is_empty() || data.drr.is_empty() {
        return Err(Error::Data(String::from("both training domains must be nonempty")));
    }
    let s = mix(seed, step);
    let mut rx = stream(s, 6);
    let mut rd = stream(s, 7);
    let xs: Vec<&Image2D> = (0..batch_size)
        .map(|_| &data.cxr[rx.random_range(0..data.cxr.len())])
        .collect();
    let ds: Vec<_> = (0..batch_size)
        .map(|_| &data.drr[rd.random_range(0..data.drr.len())])
        .collect();
    let d_imgs: Vec<[&Image2D; 1]> = ds.iter().map(|s| [&s.image]).collect();
    let comps: Vec<[&Image2D; 3]> = ds
        .iter()
        .map(|s| [&s.components[0], &s.components[1], &s.components[2]])
        .collect();
    let x_imgs: Vec<[&Image2D; 1]> = xs.iter().map(|&i| [i]).collect();
    Ok(UnpairedBatch {
        x: images_to_tensor(x_imgs.iter().map(|a| &a[..]))?,
        d: images_to_tensor(d_imgs.iter().map(|a| &a[..]))?,
        i_dec: images_to_tensor(comps.iter().map(|a| &a[..]))?,
    })
}

/// `1 / (AUTO_MASK_FRACTION · max bone)` over the DRR corpus.
pub fn auto_mask_scale(data: &UnpairedDataset) -> Result<f32> {
    let m = data.max_bone();
    if !(m > 0.0) {
        return Err(Error::Data(String::from("DRR corpus has no bone signal")));
    }
    Ok(1.0 / (AUTO_MASK_FRACTION * m))
}

/// The seven per-step losses. Adversarial entries are the discriminator
/// objectives; disabled terms read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub l_dec: f32,
    pub l_adv_d: f32,
    pub l_adv_x: f32,
    pub l_adv_dec: f32,
    pub l_cyc_x: f32,
    pub l_cyc_d: f32,
    pub l_mask: f32,
}

impl LossReport {
    pub const NAMES: [&'static str; 7] = ["L_Dec", "L_advD", "L_advX", "L_advDec", "L_cycX", "L_cycD", "L_mask"];

    pub fn values(&self) -> [f32; 7] {
        [
            self.l_dec,
            self.l_adv_d,
            self.l_adv_x,
            self.l_adv_dec,
            self.l_cyc_x,
            self.l_cyc_d,
            self.l_mask,
        ]
    }
}

fn finite(tape: &Tape<f32>, v: Var, term: &'static str) -> Result<f32> {
    let x = tape.item(v)?;
    if !x.is_finite() {
        return Err(Error::NonFinite { term, value: x as f64 });
    }
    Ok(x)
}

fn update(p: &mut ParamSet<f32>, state: &mut AdamState<f32>) -> Result<()> {
    adam_step(p.iter_mut(), state)?;
    p.clear_grads();
    Ok(())
}

/// Networks, optimizer states and the step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub nets: DecGan<f32>,
    /// In [`crate::decgan::NETWORK_NAMES`] order.
    pub optim: [AdamState<f32>; 6],
    pub step: u64,
    pub mask_scale: f32,
}

impl Trainer {
    pub fn new(config: TrainConfig, mask_scale: f32) -> Result<Self> {
        config.validate()?;
        if !(mask_scale > 0.0) || !mask_scale.is_finite() {
            return Err(config_err("mask scale must be positive and finite"));
        }
        let nets = DecGan::new(config.networks(), config.seed)?;
        let optim = nets
            .params()
            .map(|p| AdamState::new(config.adam, p.iter().map(|(_, t)| t)));
        Ok(Self {
            config,
            nets,
            optim,
            step: 0,
            mask_scale,
        })
    }

    /// Uses the configured mask scale or derives it from `data`.
    pub fn for_dataset(config: TrainConfig, data: &UnpairedDataset) -> Result<Self> {
        if data.image_size != config.image_size {
            return Err(Error::ExtentMismatch {
                what: "training images",
                expected: vec![config.image_size, config.image_size],
                found: vec![data.image_size, data.image_size],
            });
        }
        let scale = match config.mask_bone_scale {
            Some(s) => s,
            None => auto_mask_scale(data)?,
        };
        Self::new(config, scale)
    }

    pub fn next_batch(&self, data: &UnpairedDataset) -> Result<UnpairedBatch> {
        sample_batch(data, self.config.batch_size, self.config.seed, self.step)
    }

    /// One discriminator phase then one generator phase.
    pub fn train_step(&mut self, batch: &UnpairedBatch) -> Result<LossReport> {
        self.nets.check_input(&batch.x)?;
        self.nets.check_input(&batch.d)?;
        let r = if self.step < self.config.dec_warmup_steps {
            self.warmup_step(batch)?
        } else {
            self.full_step(batch)?
        };
        self.step += 1;
        Ok(r)
    }

    fn warmup_step(&mut self, batch: &UnpairedBatch) -> Result<LossReport> {
        let mut t = Tape::new();
        let p = self.nets.g_dec.params().bind(&mut t, true);
        let d = t.constant(&batch.d);
        let target = t.constant(&batch.i_dec);
        let z = self.nets.g_dec.forward(&mut t, &p, d)?;
        let l = decomposition_loss(&mut t, z, target)?;
        let l_dec = finite(&t, l, "L_Dec")?;
        t.backward(l)?;
        let [_, _, g_dec, ..] = self.nets.params_mut();
        g_dec.pull_grads(&t, &p)?;
        update(g_dec, &mut self.optim[2])?;
        Ok(LossReport {
            l_dec,
            ..Default::default()
        })
    }

    fn full_step(&mut self, batch: &UnpairedBatch) -> Result<LossReport> {
        let cfg = self.config.clone();
        let form = cfg.adversarial;
        let nets = &self.nets;

        // Generator forward first; the discriminator phase scores detached
        // copies of its fakes, then the generator phase continues on this tape.
        let mut t = Tape::new();
        let pgd = nets.g_d.params().bind(&mut t, true);
        let pgx = nets.g_x.params().bind(&mut t, true);
        let pdec = nets.g_dec.params().bind(&mut t, true);
        let x = t.constant(&batch.x);
        let d = t.constant(&batch.d);
        let i_dec = t.constant(&batch.i_dec);

        let z_d = nets.g_dec.forward(&mut t, &pdec, d)?;
        let l_dec = decomposition_loss(&mut t, z_d, i_dec)?;

        let fake_d = nets.g_d.forward(&mut t, &pgd, x)?;
        let z = nets.g_dec.forward(&mut t, &pdec, fake_d)?;
        let maps = LatentMaps::split(&mut t, z, LatentSource::FromGDec)?;
        let x_rec = reconstruct(&mut t, &nets.g_x, &pgx, &maps, fake_d, ComponentWeights::IDENTITY)?;
        let z_process = crate::decgan::assemble_z_process(&mut t, &maps, fake_d)?;
        let l_cyc_x = cycle_loss_x(&mut t, x_rec, x)?;

        let fake_x = nets.g_x.forward(&mut t, &pgx, i_dec)?;
        let d_rec = nets.g_d.forward(&mut t, &pgd, fake_x)?;
        let l_cyc_d = cycle_loss_d(&mut t, d_rec, d)?;

        let l_mask = if cfg.use_mask_loss {
            let x_bf = reconstruct(&mut t, &nets.g_x, &pgx, &maps, fake_d, ComponentWeights::BONE_SUPPRESS)?;
            let mut zb = t.tensor(maps.bone);
            let s = self.mask_scale;
            zb.data_mut().iter_mut().for_each(|v| *v *= s);
            let m = soft_mask(&zb, cfg.mask_threshold)?;
            Some(mask_loss(&mut t, x_bf, x, &m)?)
        } else {
            None
        };

        // Discriminator phase.
        let fakes = [t.tensor(fake_d), t.tensor(fake_x), t.tensor(z_process)];
        let mut dt = Tape::new();
        let pdd = nets.d_d.params().bind(&mut dt, true);
        let pdx = nets.d_x.params().bind(&mut dt, true);
        let pddec = nets.d_dec.params().bind(&mut dt, true);
        let d_obj = |dt: &mut Tape<f32>, net: &crate::nn::Discriminator<f32>, p, real: &Tensor<f32>, fake| {
            let r = dt.constant(real);
            let f = dt.constant(fake);
            let sr = net.forward(dt, p, r)?;
            let sf = net.forward(dt, p, f)?;
            adversarial_d_loss(dt, sr, sf, form)
        };
        let adv_d = d_obj(&mut dt, &nets.d_d, &pdd, &batch.d, &fakes[0])?;
        let adv_x = d_obj(&mut dt, &nets.d_x, &pdx, &batch.x, &fakes[1])?;
        let adv_dec = if cfg.use_d_dec {
            Some(d_obj(&mut dt, &nets.d_dec, &pddec, &batch.i_dec, &fakes[2])?)
        } else {
            None
        };
        let mut report = LossReport {
            l_adv_d: finite(&dt, adv_d, "L_advD")?,
            l_adv_x: finite(&dt, adv_x, "L_advX")?,
            l_adv_dec: match adv_dec {
                Some(v) => finite(&dt, v, "L_advDec")?,
                None => 0.0,
            },
            ..Default::default()
        };
        let mut d_total = dt.add(adv_d, adv_x)?;
        if let Some(v) = adv_dec {
            d_total = dt.add(d_total, v)?;
        }
        dt.backward(d_total)?;
        {
            let [_, _, _, dd, dx, ddec] = self.nets.params_mut();
            let [.., od, ox, odec] = &mut self.optim;
            dd.pull_grads(&dt, &pdd)?;
            update(dd, od)?;
            dx.pull_grads(&dt, &pdx)?;
            update(dx, ox)?;
            if cfg.use_d_dec {
                ddec.pull_grads(&dt, &pddec)?;
                update(ddec, odec)?;
            }
        }
        drop(dt);

        // Generator phase against the updated, frozen discriminators.
        let nets = &self.nets;
        let s = nets.d_d.forward_frozen(&mut t, fake_d)?;
        let g_adv_d = adversarial_g_loss(&mut t, s, form)?;
        let s = nets.d_x.forward_frozen(&mut t, fake_x)?;
        let g_adv_x = adversarial_g_loss(&mut t, s, form)?;
        let mut adv = t.add(g_adv_d, g_adv_x)?;
        if cfg.use_d_dec {
            let s = nets.d_dec.forward_frozen(&mut t, z_process)?;
            let g = adversarial_g_loss(&mut t, s, form)?;
            adv = t.add(adv, g)?;
        }
        finite(&t, adv, "generator adversarial")?;

        let w = cfg.loss_weights;
        let cyc = t.add(l_cyc_x, l_cyc_d)?;
        let mut total = t.mul_scalar(l_dec, w.lambda_dec)?;
        let a = t.mul_scalar(adv, w.lambda_adv)?;
        total = t.add(total, a)?;
        let c = t.mul_scalar(cyc, w.lambda_cyc)?;
        total = t.add(total, c)?;
        report.l_dec = finite(&t, l_dec, "L_Dec")?;
        report.l_cyc_x = finite(&t, l_cyc_x, "L_cycX")?;
        report.l_cyc_d = finite(&t, l_cyc_d, "L_cycD")?;
        if let Some(m) = l_mask {
            report.l_mask = finite(&t, m, "L_mask")?;
            let m = t.mul_scalar(m, w.lambda_mask)?;
            total = t.add(total, m)?;
        }
        finite(&t, total, "generator objective")?;
        t.backward(total)?;
        let [gd, gx, gdec, ..] = self.nets.params_mut();
        let [ogd, ogx, odec, ..] = &mut self.optim;
        gd.pull_grads(&t, &pgd)?;
        update(gd, ogd)?;
        gx.pull_grads(&t, &pgx)?;
        update(gx, ogx)?;
        gdec.pull_grads(&t, &pdec)?;
        update(gdec, odec)?;
        Ok(report)
    }
}

/// Bone-suppressed outputs for every eval image, in order.
pub fn suppress_bones(nets: &DecGan<f32>, images: &[Image2D], chunk: usize) -> Result<Vec<Image2D>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let singles: Vec<[&Image2D; 1]> = part.iter().map(|i| [i]).collect();
        let x = images_to_tensor(singles.iter().map(|a| &a[..]))?;
        let m = nets.modulate(&x, ComponentWeights::BONE_SUPPRESS)?;
        out.extend(tensor_to_images(&m.x_m, 0)?);
    }
    Ok(out)
}

/// Rows "Input" and "DecGAN" (bone-suppressed output), both scored against
/// the bone-free targets.
pub fn evaluate(nets: &DecGan<f32>, eval: &EvalSet, sigma: f64) -> Result<MetricReport> {
    let inputs: Vec<Image2D> = eval.samples.iter().map(|s| s.image.clone()).collect();
    let targets: Vec<Image2D> = eval.samples.iter().map(|s| s.bone_free.clone()).collect();
    let masks: Vec<Vec<bool>> = eval.samples.iter().map(|s| s.bone_mask.clone()).collect();
    let outputs = suppress_bones(nets, &inputs, 8)?;
    Ok(MetricReport {
        sigma,
        rows: vec![
            MetricRow::evaluate("Input", &inputs, Some((&targets, &masks)), sigma)?,
            MetricRow::evaluate("DecGAN", &outputs, Some((&targets, &masks)), sigma)?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_unpaired_dataset, tiny_config};

    fn hash(p: &ParamSet<f32>) -> u64 {
        p.iter()
            .flat_map(|(_, t)| t.data().iter())
            .fold(0xcbf2_9ce4_8422_2325, |h, v| {
                (h ^ v.to_bits() as u64).wrapping_mul(0x100_0000_01b3)
            })
    }

    fn setup() -> (TrainConfig, UnpairedDataset) {
        let (data, _) = make_unpaired_dataset(&tiny_config()).unwrap();
        let cfg = TrainConfig {
            image_size: 16,
            batch_size: 2,
            base_width: 4,
            ..Default::default()
        };
        (cfg, data)
    }

    #[test]
    fn every_network_moves() {
        let (cfg, data) = setup();
        let mut tr = Trainer::for_dataset(cfg, &data).unwrap();
        let before = tr.nets.params().map(hash);
        let b = tr.next_batch(&data).unwrap();
        tr.train_step(&b).unwrap();
        let after = tr.nets.params().map(hash);
        for i in 0..6 {
            assert_ne!(before[i], after[i], "network {i} unchanged");
        }
    }

    #[test]
    fn deterministic_reports() {
        let (cfg, data) = setup();
        let run = || {
            let mut tr = Trainer::for_dataset(cfg.clone(), &data).unwrap();
            (0..10)
                .map(|_| {
                    let b = tr.next_batch(&data).unwrap();
                    tr.train_step(&b).unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn phases_touch_only_their_networks() {
        let (cfg, data) = setup();
        let mut tr = Trainer::for_dataset(cfg, &data).unwrap();
        let b = tr.next_batch(&data).unwrap();
        let before = tr.nets.params().map(hash);
        // A warmup step touches only G_Dec.
        tr.config.dec_warmup_steps = 1;
        tr.train_step(&b).unwrap();
        let after = tr.nets.params().map(hash);
        assert_ne!(before[2], after[2]);
        for i in [0, 1, 3, 4, 5] {
            assert_eq!(before[i], after[i]);
        }
    }

    #[test]
    fn ablation_leaves_d_dec_and_mask_idle() {
        let (cfg, data) = setup();
        let mut tr = Trainer::for_dataset(cfg.ablated(), &data).unwrap();
        let before = hash(tr.nets.params()[5]);
        let b = tr.next_batch(&data).unwrap();
        let r = tr.train_step(&b).unwrap();
        assert_eq!(before, hash(tr.nets.params()[5]));
        assert_eq!((r.l_adv_dec, r.l_mask), (0.0, 0.0));
        assert!(r.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn g_dec_alone_fits_decomposition() {
        let (mut cfg, data) = setup();
        cfg.base_width = 8;
        cfg.dec_warmup_steps = u64::MAX;
        cfg.adam.lr = 2e-3;
        let mut tr = Trainer::for_dataset(cfg, &data).unwrap();
        let fixed = tr.next_batch(&data).unwrap();
        let first = tr.train_step(&fixed).unwrap().l_dec;
        let mut last = first;
        for _ in 1..50 {
            last = tr.train_step(&fixed).unwrap().l_dec;
        }
        assert!(last <= 0.5 * first, "L_Dec {first} -> {last}");
    }

    #[test]
    fn batches_are_independent_draws() {
        let (_, data) = setup();
        let a = sample_batch(&data, 3, 1, 0).unwrap();
        let b = sample_batch(&data, 3, 1, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.i_dec.shape(), &[3, 3, 16, 16]);
        assert_ne!(a, sample_batch(&data, 3, 1, 1).unwrap());
    }

    #[test]
    fn image_tensor_roundtrip() {
        let (_, data) = setup();
        let imgs: Vec<[&Image2D; 1]> = data.cxr.iter().take(3).map(|i| [i]).collect();
        let t = images_to_tensor(imgs.iter().map(|a| &a[..])).unwrap();
        let back = tensor_to_images(&t, 0).unwrap();
        assert_eq!(&back[..], &data.cxr[..3]);
    }
}
