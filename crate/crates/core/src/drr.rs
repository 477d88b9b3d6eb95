//! Parallel-beam DRR projection of CT volumes and their labeled components.
//!
//! Rays travel along the anterior–posterior (`y`) axis. The detector plane is
//! `x`–`z`: image row 0 is the cranial edge, column 0 the `−x` edge, and the
//! field of view defaults to the full lateral and cranio–caudal volume extent.
//! A [`Pose`] rotates the volume in the detector plane and scales it
//! isotropically about its centre.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{config_err, Error, Result};
use crate::phantom::{Grid, LabelVolume, Tissue, Volume3D};
use crate::rng;

/// Linear attenuation of water, 1/mm.
pub const MU_WATER: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pose {
    /// In-plane rotation about the AP axis, degrees.
    pub rotation_deg: f32,
    pub scale: f32,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation_deg: 0.0,
        scale: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() || !self.rotation_deg.is_finite() {
            return Err(config_err("pose scale must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Domain {
    LineIntegral,
    Display,
}

/// Row-major `H×W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub domain: Domain,
}

impl Image2D {
    pub fn new(height: usize, width: usize, data: Vec<f32>, domain: Domain) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::ExtentMismatch {
                what: "image",
                expected: vec![height, width],
                found: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            data,
            domain,
        })
    }

    pub fn zeros(height: usize, width: usize, domain: Domain) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
            domain,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn zip_map(&self, other: &Image2D, f: impl Fn(f32, f32) -> f32) -> Result<Image2D> {
        if self.dims() != other.dims() {
            return Err(Error::ExtentMismatch {
                what: "image pair",
                expected: vec![self.height, self.width],
                found: vec![other.height, other.width],
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Image2D::new(self.height, self.width, data, self.domain)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image2D {
        Image2D {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Left–right mirror.
    pub fn mirrored(&self) -> Image2D {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Image2D { data, ..self.clone() }
    }
}

/// Total and per-component projections of one volume under one pose.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedDRR {
    pub total: Image2D,
    pub bone: Image2D,
    pub lung: Image2D,
    pub other: Image2D,
}

impl DecomposedDRR {
    pub fn components(&self) -> [&Image2D; 3] {
        [&self.bone, &self.lung, &self.other]
    }

    /// Largest per-pixel `|bone + lung + other − total|`.
    pub fn additivity_error(&self) -> f32 {
        (0..self.total.data.len())
            .map(|i| (self.bone.data[i] + self.lung.data[i] + self.other.data[i] - self.total.data[i]).abs())
            .fold(0.0, f32::max)
    }

    pub fn to_display(&self, norm: DatasetNorm) -> DecomposedDRR {
        DecomposedDRR {
            total: to_display(&self.total, norm),
            bone: to_display(&self.bone, norm),
            lung: to_display(&self.lung, norm),
            other: to_display(&self.other, norm),
        }
    }
}

/// Dataset-wide divisor mapping line integrals to display values.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetNorm {
    pub max_line_integral: f32,
}

impl DatasetNorm {
    pub fn new(max_line_integral: f32) -> Result<Self> {
        if !(max_line_integral > 0.0) || !max_line_integral.is_finite() {
            return Err(config_err("max_line_integral must be positive and finite"));
        }
        Ok(Self { max_line_integral })
    }

    /// Largest pixel over a corpus of line-integral images.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image2D>) -> Result<Self> {
        Self::new(images.into_iter().map(Image2D::max).fold(0.0, f32::max))
    }
}

/// Attenuation volume in 1/mm on the CT grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttenuationVolume {
    pub grid: Grid,
    pub mu: Vec<f32>,
}

pub fn hu_to_mu(hu: f32) -> f32 {
    (MU_WATER * (1.0 + hu / 1000.0)).max(0.0)
}

pub fn hu_to_attenuation(vol: &Volume3D) -> AttenuationVolume {
    AttenuationVolume {
        grid: vol.grid,
        mu: vol.values.iter().map(|&h| hu_to_mu(h)).collect(),
    }
}

/// Line integral of every `(z, x)` column along `y`, sampled at step
/// `min spacing` with linear interpolation between voxel centres.
fn column_integrals(grid: &Grid, mu: &[f32]) -> Vec<f32> {
    let [nz, ny, nx] = grid.extents;
    let sy = grid.spacing_mm[1];
    let step = grid.spacing_mm.iter().copied().fold(f32::INFINITY, f32::min);
    let length = ny as f32 * sy;
    let n_samples = libm::ceilf(length / step - 1e-4) as usize;
    // Sample k sits at y = −L/2 + (k + ½)·step; its fractional voxel index is
    // y/sy + ny/2 − ½. Weights depend only on k, so precompute them.
    let taps: Vec<(usize, f32, f32)> = (0..n_samples)
        .filter_map(|k| {
            let y = -length / 2.0 + (k as f32 + 0.5) * step;
            let f = y / sy + ny as f32 / 2.0 - 0.5;
            let i0 = libm::floorf(f);
            let t = f - i0;
            let i0 = i0 as isize;
            let w0 = if (0..ny as isize).contains(&i0) { 1.0 - t } else { 0.0 };
            let w1 = if (0..ny as isize).contains(&(i0 + 1)) { t } else { 0.0 };
            (w0 > 0.0 || w1 > 0.0).then_some((i0.max(0) as usize, w0, w1))
        })
        .collect();
    let mut out = vec![0.0f32; nz * nx];
    for z in 0..nz {
        for x in 0..nx {
            let at = |y: usize| mu[(z * ny + y) * nx + x];
            let mut acc = 0.0f32;
            for &(i0, w0, w1) in &taps {
                let mut v = 0.0;
                if w0 > 0.0 {
                    v += w0 * at(i0);
                }
                if w1 > 0.0 {
                    v += w1 * at(i0 + 1);
                }
                acc += v;
            }
            out[z * nx + x] = acc * step;
        }
    }
    out
}

/// Detector raster and field of view.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detector {
    pub height: usize,
    pub width: usize,
    /// `[cranio–caudal, lateral]` extent in mm; `None` spans the volume.
    pub fov_mm: Option<[f32; 2]>,
}

impl Detector {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            fov_mm: None,
        }
    }

    pub fn with_fov(self, fov_mm: [f32; 2]) -> Self {
        Self {
            fov_mm: Some(fov_mm),
            ..self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(config_err("output size must be positive"));
        }
        if let Some([a, b]) = self.fov_mm {
            if !(a > 0.0 && b > 0.0) {
                return Err(config_err("field of view must be positive"));
            }
        }
        Ok(())
    }
}

/// Resamples column integrals onto the detector under `pose`.
fn resample(grid: &Grid, columns: &[f32], pose: Pose, det: &Detector) -> Vec<f32> {
    let [nz, _, nx] = grid.extents;
    let (sz, sx) = (grid.spacing_mm[0], grid.spacing_mm[2]);
    let (height, width) = (det.height, det.width);
    let [fz, fx] = det.fov_mm.unwrap_or([nz as f32 * sz, nx as f32 * sx]);
    let (pz, px) = (fz / height as f32, fx / width as f32);
    let (sin, cos) = libm::sincosf(pose.rotation_deg.to_radians());
    let inv = 1.0 / pose.scale;
    let at = |z: isize, x: isize| -> f32 {
        if z < 0 || x < 0 || z >= nz as isize || x >= nx as isize {
            0.0
        } else {
            columns[z as usize * nx + x as usize]
        }
    };
    let mut out = vec![0.0f32; height * width];
    for r in 0..height {
        let v = (height as f32 / 2.0 - r as f32 - 0.5) * pz;
        for c in 0..width {
            let u = (c as f32 + 0.5 - width as f32 / 2.0) * px;
            // Inverse rigid transform: rotate by −θ, then undo the scale.
            let x = (cos * u + sin * v) * inv;
            let z = (-sin * u + cos * v) * inv;
            let fx = x / sx + nx as f32 / 2.0 - 0.5;
            let fz = z / sz + nz as f32 / 2.0 - 0.5;
            let (x0, z0) = (libm::floorf(fx), libm::floorf(fz));
            let (tx, tz) = (fx - x0, fz - z0);
            let (x0, z0) = (x0 as isize, z0 as isize);
            let val = (1.0 - tz) * ((1.0 - tx) * at(z0, x0) + tx * at(z0, x0 + 1))
                + tz * ((1.0 - tx) * at(z0 + 1, x0) + tx * at(z0 + 1, x0 + 1));
            // Path lengths through the scaled volume grow with the scale.
            out[r * width + c] = val * pose.scale;
        }
    }
    out
}

fn project_mu(grid: &Grid, mu: &[f32], pose: Pose, det: &Detector) -> Result<Image2D> {
    let columns = column_integrals(grid, mu);
    Image2D::new(
        det.height,
        det.width,
        resample(grid, &columns, pose, det),
        Domain::LineIntegral,
    )
}

/// Parallel-ray line integrals `Σ μ·Δl` through the posed volume.
pub fn project(vol: &AttenuationVolume, pose: Pose, det: &Detector) -> Result<Image2D> {
    det.validate()?;
    pose.validate()?;
    project_mu(&vol.grid, &vol.mu, pose, det)
}

/// Soft-tissue value that bone voxels keep in the `other` component.
pub const DEFAULT_BONE_FILL_HU: f32 = 40.0;

/// How bone voxels are split between the bone and other components.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BoneSplit {
    /// All bone-voxel attenuation goes to the bone component.
    Labeled,
    /// Bone gets `max(μ − μ_fill, 0)` and other keeps `min(μ, μ_fill)`, so
    /// removing bone leaves soft tissue rather than a void.
    Excess { fill_hu: f32 },
}

impl Default for BoneSplit {
    fn default() -> Self {
        BoneSplit::Excess {
            fill_hu: DEFAULT_BONE_FILL_HU,
        }
    }
}

/// Projects the bone, lung and other components on one shared sampling
/// grid. `total` covers every non-air label.
pub fn project_components(
    vol: &Volume3D,
    labels: &LabelVolume,
    pose: Pose,
    det: &Detector,
    split: BoneSplit,
) -> Result<DecomposedDRR> {
    if labels.grid.extents != vol.grid.extents {
        return Err(Error::ExtentMismatch {
            what: "label volume",
            expected: vol.grid.extents.to_vec(),
            found: labels.grid.extents.to_vec(),
        });
    }
    det.validate()?;
    pose.validate()?;
    let mu = hu_to_attenuation(vol).mu;
    let fill = match split {
        BoneSplit::Labeled => None,
        BoneSplit::Excess { fill_hu } => Some(hu_to_mu(fill_hu)),
    };
    let part = |pick: &dyn Fn(Tissue, f32) -> f32| -> Result<Image2D> {
        let m: Vec<f32> = mu.iter().zip(&labels.labels).map(|(&m, &l)| pick(l, m)).collect();
        project_mu(&vol.grid, &m, pose, det)
    };
    Ok(DecomposedDRR {
        total: part(&|l, m| if l == Tissue::Air { 0.0 } else { m })?,
        bone: part(&|l, m| match (l, fill) {
            (Tissue::Bone, None) => m,
            (Tissue::Bone, Some(f)) => (m - f).max(0.0),
            _ => 0.0,
        })?,
        lung: part(&|l, m| if l == Tissue::Lung { m } else { 0.0 })?,
        other: part(&|l, m| match (l, fill) {
            (Tissue::Other, _) => m,
            (Tissue::Bone, Some(f)) => m.min(f),
            _ => 0.0,
        })?,
    })
}

/// `clamp(raw / max_line_integral, 0, 1)`.
pub fn to_display(img: &Image2D, norm: DatasetNorm) -> Image2D {
    Image2D {
        data: img
            .data
            .iter()
            .map(|&v| (v / norm.max_line_integral).clamp(0.0, 1.0))
            .collect(),
        domain: Domain::Display,
        ..img.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PoseRanges {
    /// Symmetric rotation bound, degrees: rotation ∈ [−r, r].
    pub rotation_deg: f32,
    pub scale: (f32, f32),
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            scale: (0.9, 1.1),
        }
    }
}

/// Uniform pose within the ranges, deterministic in `seed`.
pub fn sample_pose(seed: u64, ranges: PoseRanges) -> Result<Pose> {
    let (lo, hi) = ranges.scale;
    if !(ranges.rotation_deg >= 0.0) || !(lo <= hi) || !(lo > 0.0) {
        return Err(config_err("pose ranges inverted or nonpositive"));
    }
    let mut r = rng::stream(seed, 4);
    let rotation_deg = if ranges.rotation_deg == 0.0 {
        0.0
    } else {
        r.random_range(-ranges.rotation_deg..=ranges.rotation_deg)
    };
    let scale = if lo == hi { lo } else { r.random_range(lo..=hi) };
    Ok(Pose { rotation_deg, scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn grid(n: [usize; 3], s: f32) -> Grid {
        Grid {
            extents: n,
            spacing_mm: [s; 3],
        }
    }

    #[test]
    fn attenuation_law() {
        assert_eq!(hu_to_mu(0.0), 0.02);
        assert_eq!(hu_to_mu(-1000.0), 0.0);
        assert_eq!(hu_to_mu(-1024.0), 0.0);
        assert!((hu_to_mu(1000.0) - 0.04).abs() < 1e-9);
    }

    #[test]
    fn single_voxel_line_integral() {
        let g = grid([5, 6, 7], 2.0);
        let mut mu = vec![0.0; g.len()];
        mu[g.index(2, 3, 4)] = 0.05;
        let img = project(&AttenuationVolume { grid: g, mu }, Pose::IDENTITY, &Detector::new(5, 7)).unwrap();
        let expected = 0.05 * 2.0;
        for r in 0..5 {
            for c in 0..7 {
                let v = img.at(r, c);
                // Row 0 is cranial (largest z).
                if (r, c) == (2, 4) {
                    assert!((v - expected).abs() <= 0.05 * expected, "{v}");
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn identity_pose_equals_axis_sum() {
        let (vol, _) = generate_phantom(&PhantomConfig {
            grid: grid([32, 24, 40], 10.0),
            ..PhantomConfig::default()
        })
        .unwrap();
        let mu = hu_to_attenuation(&vol);
        let img = project(&mu, Pose::IDENTITY, &Detector::new(32, 40)).unwrap();
        let [nz, ny, nx] = vol.grid.extents;
        for z in 0..nz {
            for x in 0..nx {
                let sum: f32 = (0..ny).map(|y| mu.mu[vol.grid.index(z, y, x)]).sum::<f32>() * 10.0;
                let v = img.at(nz - 1 - z, x);
                assert!((v - sum).abs() <= 1e-3 * sum.max(1e-6), "{v} vs {sum}");
            }
        }
    }

    #[test]
    fn slab_integral() {
        let g = grid([20, 30, 20], 2.0);
        let mut mu = vec![0.0; g.len()];
        for z in 0..20 {
            for y in 10..20 {
                for x in 0..20 {
                    mu[g.index(z, y, x)] = 0.03;
                }
            }
        }
        let img = project(
            &AttenuationVolume { grid: g, mu },
            Pose {
                rotation_deg: 4.0,
                scale: 1.0,
            },
            &Detector::new(20, 20),
        )
        .unwrap();
        let expected = 0.03 * 10.0 * 2.0;
        for r in 4..16 {
            for c in 4..16 {
                assert!((img.at(r, c) - expected).abs() <= 0.01 * expected);
            }
        }
    }

    #[test]
    fn degenerate_size_rejected() {
        let g = grid([2, 2, 2], 1.0);
        let v = AttenuationVolume {
            grid: g,
            mu: vec![0.0; 8],
        };
        assert!(project(&v, Pose::IDENTITY, &Detector::new(0, 4)).is_err());
        assert!(project(
            &v,
            Pose {
                rotation_deg: 0.0,
                scale: 0.0
            },
            &Detector::new(2, 2)
        )
        .is_err());
        assert!(project(&v, Pose::IDENTITY, &Detector::new(2, 2).with_fov([0.0, 5.0])).is_err());
    }

    #[test]
    fn fov_crop_matches_full_field() {
        let (vol, _) = generate_phantom(&PhantomConfig {
            grid: grid([32, 24, 40], 10.0),
            ..PhantomConfig::default()
        })
        .unwrap();
        let mu = hu_to_attenuation(&vol);
        let full = project(&mu, Pose::IDENTITY, &Detector::new(32, 40)).unwrap();
        let crop = project(&mu, Pose::IDENTITY, &Detector::new(16, 20).with_fov([160.0, 200.0])).unwrap();
        for r in 0..16 {
            for c in 0..20 {
                assert!((crop.at(r, c) - full.at(r + 8, c + 10)).abs() <= 1e-6 * full.at(r + 8, c + 10).max(1.0));
            }
        }
    }

    #[test]
    fn bone_splits_agree_on_bone_plus_other() {
        let cfg = PhantomConfig {
            grid: grid([32, 24, 32], 10.0),
            ..PhantomConfig::default()
        };
        let (vol, lab) = generate_phantom(&cfg).unwrap();
        let det = Detector::new(16, 16);
        let a = project_components(&vol, &lab, Pose::IDENTITY, &det, BoneSplit::Labeled).unwrap();
        let b = project_components(&vol, &lab, Pose::IDENTITY, &det, BoneSplit::default()).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.lung, b.lung);
        for i in 0..256 {
            let (sa, sb) = (a.bone.data[i] + a.other.data[i], b.bone.data[i] + b.other.data[i]);
            assert!((sa - sb).abs() < 1e-4);
            assert!(b.bone.data[i] <= a.bone.data[i]);
        }
        assert!(a.additivity_error() < 1e-4 && b.additivity_error() < 1e-4);
    }

    #[test]
    fn display_mapping() {
        let norm = DatasetNorm::new(4.0).unwrap();
        let img = Image2D::new(1, 3, vec![0.0, 4.0, 9.0], Domain::LineIntegral).unwrap();
        let d = to_display(&img, norm);
        assert_eq!(d.data, vec![0.0, 1.0, 1.0]);
        assert_eq!(d.domain, Domain::Display);
    }

    #[test]
    fn pose_sampling() {
        let zero = PoseRanges {
            rotation_deg: 0.0,
            scale: (1.05, 1.05),
        };
        assert_eq!(
            sample_pose(3, zero).unwrap(),
            Pose {
                rotation_deg: 0.0,
                scale: 1.05
            }
        );
        let r = PoseRanges::default();
        for s in 0..10_000 {
            let p = sample_pose(s, r).unwrap();
            assert!(p.rotation_deg.abs() <= 10.0 && (0.9..=1.1).contains(&p.scale));
        }
        assert_eq!(sample_pose(42, r).unwrap(), sample_pose(42, r).unwrap());
        assert!(sample_pose(
            0,
            PoseRanges {
                rotation_deg: 5.0,
                scale: (1.2, 0.8)
            }
        )
        .is_err());
    }

    #[test]
    fn label_extent_mismatch() {
        let cfg = PhantomConfig {
            grid: grid([32, 24, 32], 10.0),
            ..PhantomConfig::default()
        };
        let (vol, mut lab) = generate_phantom(&cfg).unwrap();
        lab.grid.extents = [1, 1, 1];
        assert!(project_components(&vol, &lab, Pose::IDENTITY, &Detector::new(8, 8), BoneSplit::default()).is_err());
    }
}
