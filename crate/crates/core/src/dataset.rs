//! Unpaired CXR/DRR corpora built from disjoint phantom populations.
//!
//! The DRR domain carries component decompositions. The CXR domain is a
//! different phantom population passed through a gamma/contrast/noise shift.
//! The eval set holds CXR-domain images together with their bone-free
//! targets and bone masks; training code only ever sees [`UnpairedDataset`].

use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::drr::{
    project_components, sample_pose, to_display, BoneSplit, DatasetNorm, DecomposedDRR, Detector, Image2D, Pose,
    PoseRanges,
};
use crate::error::{config_err, Error, Result};
use crate::metrics::{bone_mask_from_projection, BONE_MASK_FRACTION};
use crate::phantom::{
    derive_labels, generate_phantom, segment_bone, segment_lung, Grid, PhantomConfig, DEFAULT_BONE_THRESHOLD_HU,
    DEFAULT_LUNG_AIR_HU, DEFAULT_LUNG_DILATION,
};
use crate::rng::{mix, stream};

/// Intensity shift separating the CXR domain from raw projections.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DomainShift {
    pub gamma: f32,
    /// Gain about mid-grey: `0.5 + contrast·(v − 0.5)`.
    pub contrast: f32,
    pub noise_sigma: f32,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            contrast: 1.2,
            noise_sigma: 0.01,
        }
    }
}

impl DomainShift {
    pub const IDENTITY: Self = Self {
        gamma: 1.0,
        contrast: 1.0,
        noise_sigma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.contrast > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(config_err(
                "domain shift: gamma and contrast must be positive, noise nonnegative",
            ));
        }
        Ok(())
    }

    /// Deterministic part of the shift.
    pub fn tone(&self, v: f32) -> f32 {
        let g = if self.gamma == 1.0 {
            v
        } else {
            libm::powf(v.max(0.0), self.gamma)
        };
        let c = if self.contrast == 1.0 {
            g
        } else {
            0.5 + self.contrast * (g - 0.5)
        };
        c.clamp(0.0, 1.0)
    }

    /// Tone curve then additive noise from `seed`, clamped to [0, 1].
    pub fn apply(&self, img: &Image2D, seed: u64) -> Image2D {
        let mut out = img.map(|v| self.tone(v));
        if self.noise_sigma > 0.0 {
            let mut r = stream(seed, 5);
            let n = Normal::new(0.0f32, self.noise_sigma).expect("sigma validated");
            for v in &mut out.data {
                *v = (*v + n.sample(&mut r)).clamp(0.0, 1.0);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Drr,
    Cxr,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetConfig {
    pub image_size: usize,
    pub images_per_domain: usize,
    pub eval_images: usize,
    pub poses_per_phantom: usize,
    /// First phantom seed of each population; each uses consecutive seeds.
    pub drr_seed_start: u64,
    pub cxr_seed_start: u64,
    pub eval_seed_start: u64,
    pub split_seed: u64,
    pub shift: DomainShift,
    pub pose_ranges: PoseRanges,
    pub grid_extents: [usize; 3],
    pub voxel_mm: f32,
    /// Detector field of view `[cranio–caudal, lateral]`, mm.
    pub fov_mm: [f32; 2],
    pub bone_split: BoneSplit,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            images_per_domain: 200,
            eval_images: 30,
            poses_per_phantom: 4,
            drr_seed_start: 0,
            cxr_seed_start: 100_000,
            eval_seed_start: 200_000,
            split_seed: 0,
            shift: DomainShift::default(),
            pose_ranges: PoseRanges::default(),
            grid_extents: PhantomConfig::default().grid.extents,
            voxel_mm: PhantomConfig::default().grid.spacing_mm[0],
            fov_mm: [200.0, 200.0],
            bone_split: BoneSplit::default(),
        }
    }
}

impl DatasetConfig {
    fn count(&self, split: Split) -> usize {
        match split {
            Split::Drr | Split::Cxr => self.images_per_domain,
            Split::Eval => self.eval_images,
        }
    }

    /// Phantom seeds used by `split`.
    pub fn seed_range(&self, split: Split) -> core::ops::Range<u64> {
        let start = match split {
            Split::Drr => self.drr_seed_start,
            Split::Cxr => self.cxr_seed_start,
            Split::Eval => self.eval_seed_start,
        };
        let n = self.count(split).div_ceil(self.poses_per_phantom.max(1)) as u64;
        start..start + n
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.images_per_domain == 0 || self.poses_per_phantom == 0 {
            return Err(config_err("dataset sizes must be positive"));
        }
        if self.grid_extents.contains(&0) || !(self.voxel_mm > 0.0) || !(self.fov_mm[0] > 0.0 && self.fov_mm[1] > 0.0) {
            return Err(config_err("phantom grid must be nonempty with positive spacing"));
        }
        self.shift.validate()?;
        let splits = [Split::Drr, Split::Cxr, Split::Eval];
        for (i, a) in splits.iter().enumerate() {
            for b in &splits[i + 1..] {
                let (ra, rb) = (self.seed_range(*a), self.seed_range(*b));
                if ra.start < rb.end && rb.start < ra.end && !ra.is_empty() && !rb.is_empty() {
                    return Err(config_err(format!(
                        "phantom seed ranges overlap: {a:?} {ra:?} and {b:?} {rb:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn phantom(&self, seed: u64) -> PhantomConfig {
        PhantomConfig {
            grid: Grid {
                extents: self.grid_extents,
                spacing_mm: [self.voxel_mm; 3],
            },
            ..PhantomConfig::varied(seed)
        }
    }
}

/// One phantom to render under several poses.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderJob {
    pub split: Split,
    pub phantom_seed: u64,
    /// `(image index within the split, pose)`.
    pub poses: Vec<(usize, Pose)>,
}

pub fn render_jobs(cfg: &DatasetConfig) -> Result<Vec<RenderJob>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for split in [Split::Drr, Split::Cxr, Split::Eval] {
        let n = cfg.count(split);
        for (p, seed) in cfg.seed_range(split).enumerate() {
            let poses = (p * cfg.poses_per_phantom..((p + 1) * cfg.poses_per_phantom).min(n))
                .map(|i| {
                    Ok((
                        i,
                        sample_pose(mix(mix(cfg.split_seed, seed), i as u64), cfg.pose_ranges)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            jobs.push(RenderJob {
                split,
                phantom_seed: seed,
                poses,
            });
        }
    }
    Ok(jobs)
}

/// Phantom generation, segmentation-derived labels, component projections.
pub fn render_job(cfg: &DatasetConfig, job: &RenderJob) -> Result<Vec<DecomposedDRR>> {
    let (vol, _) = generate_phantom(&cfg.phantom(job.phantom_seed))?;
    let bone = segment_bone(&vol, DEFAULT_BONE_THRESHOLD_HU);
    let lung = segment_lung(&vol, DEFAULT_LUNG_AIR_HU, DEFAULT_LUNG_DILATION)?;
    let labels = derive_labels(&vol, &bone, &lung, DEFAULT_LUNG_AIR_HU);
    let det = Detector::new(cfg.image_size, cfg.image_size).with_fov(cfg.fov_mm);
    job.poses
        .iter()
        .map(|&(_, pose)| project_components(&vol, &labels, pose, &det, cfg.bone_split))
        .collect()
}

/// DRR-domain training sample: the display image and its components.
#[derive(Clone, Debug, PartialEq)]
pub struct DrrSample {
    pub image: Image2D,
    /// Bone, lung, other.
    pub components: [Image2D; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedDataset {
    pub image_size: usize,
    pub norm: DatasetNorm,
    pub cxr: Vec<Image2D>,
    pub drr: Vec<DrrSample>,
}

impl UnpairedDataset {
    /// Largest bone display value in the DRR corpus.
    pub fn max_bone(&self) -> f32 {
        self.drr.iter().map(|s| s.components[0].max()).fold(0.0, f32::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub image: Image2D,
    /// Tone-shifted display of `total − bone`, without noise.
    pub bone_free: Image2D,
    pub bone_mask: Vec<bool>,
}

/// Held-out CXR-domain images with ground truth; never used in training.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub image_size: usize,
    pub norm: DatasetNorm,
    pub samples: Vec<EvalSample>,
}

/// Combines rendered jobs (in [`render_jobs`] order) into the three sets.
pub fn assemble_dataset(
    cfg: &DatasetConfig,
    jobs: &[RenderJob],
    rendered: Vec<Vec<DecomposedDRR>>,
) -> Result<(UnpairedDataset, EvalSet)> {
    if jobs.len() != rendered.len() {
        return Err(Error::Data(format!(
            "{} jobs but {} renders",
            jobs.len(),
            rendered.len()
        )));
    }
    let training = jobs
        .iter()
        .zip(&rendered)
        .filter(|(j, _)| j.split != Split::Eval)
        .flat_map(|(_, r)| r.iter().map(|d| &d.total));
    let norm = DatasetNorm::from_images(training)?;
    let mut drr = Vec::with_capacity(cfg.images_per_domain);
    let mut cxr = Vec::with_capacity(cfg.images_per_domain);
    let mut eval = Vec::with_capacity(cfg.eval_images);
    for (job, renders) in jobs.iter().zip(rendered) {
        if job.poses.len() != renders.len() {
            return Err(Error::Data(format!(
                "phantom {}: pose count mismatch",
                job.phantom_seed
            )));
        }
        for (&(index, _), d) in job.poses.iter().zip(renders) {
            let noise_seed = mix(cfg.split_seed, mix(job.split as u64 + 1, index as u64));
            match job.split {
                Split::Drr => {
                    let d = d.to_display(norm);
                    drr.push(DrrSample {
                        image: d.total,
                        components: [d.bone, d.lung, d.other],
                    });
                }
                Split::Cxr => cxr.push(cfg.shift.apply(&to_display(&d.total, norm), noise_seed)),
                Split::Eval => {
                    let free = d.total.zip_map(&d.bone, |t, b| t - b)?;
                    eval.push(EvalSample {
                        image: cfg.shift.apply(&to_display(&d.total, norm), noise_seed),
                        bone_free: to_display(&free, norm).map(|v| cfg.shift.tone(v)),
                        bone_mask: bone_mask_from_projection(&d.bone, BONE_MASK_FRACTION),
                    });
                }
            }
        }
    }
    Ok((
        UnpairedDataset {
            image_size: cfg.image_size,
            norm,
            cxr,
            drr,
        },
        EvalSet {
            image_size: cfg.image_size,
            norm,
            samples: eval,
        },
    ))
}

/// Sequential build of the unpaired corpora and the eval set.
pub fn make_unpaired_dataset(cfg: &DatasetConfig) -> Result<(UnpairedDataset, EvalSet)> {
    let jobs = render_jobs(cfg)?;
    let rendered = jobs.iter().map(|j| render_job(cfg, j)).collect::<Result<Vec<_>>>()?;
    assemble_dataset(cfg, &jobs, rendered)
}

#[cfg(test)]
pub(crate) fn tiny_config() -> DatasetConfig {
    DatasetConfig {
        image_size: 16,
        images_per_domain: 6,
        eval_images: 3,
        poses_per_phantom: 3,
        grid_extents: [40, 30, 40],
        voxel_mm: 8.0,
        fov_mm: [320.0, 320.0],
        ..DatasetConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges_disjoint_and_checked() {
        let cfg = DatasetConfig::default();
        let jobs = render_jobs(&cfg).unwrap();
        let seeds = |s: Split| -> Vec<u64> { jobs.iter().filter(|j| j.split == s).map(|j| j.phantom_seed).collect() };
        let (d, c, e) = (seeds(Split::Drr), seeds(Split::Cxr), seeds(Split::Eval));
        assert_eq!((d.len(), c.len(), e.len()), (50, 50, 8));
        assert!(d.iter().all(|s| !c.contains(s) && !e.contains(s)));
        assert!(c.iter().all(|s| !e.contains(s)));
        let bad = DatasetConfig {
            cxr_seed_start: 30,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn image_counts_and_ranges() {
        let cfg = tiny_config();
        let (train, eval) = make_unpaired_dataset(&cfg).unwrap();
        assert_eq!((train.drr.len(), train.cxr.len(), eval.samples.len()), (6, 6, 3));
        for s in &train.drr {
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            for i in 0..s.image.data.len() {
                let sum: f32 = s.components.iter().map(|c| c.data[i]).sum();
                assert!((sum - s.image.data[i]).abs() < 1e-5);
            }
        }
        assert!(eval.samples.iter().all(|s| s.bone_mask.iter().any(|&b| b)));
    }

    #[test]
    fn identity_shift_gives_raw_projection() {
        let cfg = DatasetConfig {
            shift: DomainShift::IDENTITY,
            ..tiny_config()
        };
        let jobs = render_jobs(&cfg).unwrap();
        let rendered: Vec<_> = jobs.iter().map(|j| render_job(&cfg, j).unwrap()).collect();
        let (train, eval) = assemble_dataset(&cfg, &jobs, rendered.clone()).unwrap();
        let cxr_raw: Vec<&DecomposedDRR> = jobs
            .iter()
            .zip(&rendered)
            .filter(|(j, _)| j.split == Split::Cxr)
            .flat_map(|(_, r)| r)
            .collect();
        for (img, raw) in train.cxr.iter().zip(cxr_raw) {
            assert_eq!(img, &to_display(&raw.total, train.norm));
        }
        // Bone-free target is the display of total − bone of the same pose.
        let ev: Vec<&DecomposedDRR> = jobs
            .iter()
            .zip(&rendered)
            .filter(|(j, _)| j.split == Split::Eval)
            .flat_map(|(_, r)| r)
            .collect();
        for (s, raw) in eval.samples.iter().zip(ev) {
            let free = raw.total.zip_map(&raw.bone, |t, b| t - b).unwrap();
            assert_eq!(s.bone_free, to_display(&free, eval.norm));
        }
    }

    #[test]
    fn shift_tone_curve() {
        let s = DomainShift::default();
        assert_eq!(s.tone(0.0), 0.0);
        assert_eq!(s.tone(1.0), 1.0);
        assert!(s.tone(0.5) > 0.5);
        assert_eq!(DomainShift::IDENTITY.tone(0.37), 0.37);
    }
}
