//! Synthetic labeled chest CT phantoms and the label-construction procedures.
//!
//! Coordinates are millimetres relative to the volume centre: `x` lateral,
//! `y` anterior–posterior (positive = anterior), `z` cranio–caudal
//! (positive = cranial). Volumes are stored `z`-major: index
//! `(z·ny + y)·nx + x`.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::rng;

pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 3000.0;

/// Label codes, also the on-disk `u8` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Tissue {
    Air = 0,
    Bone = 1,
    Lung = 2,
    Other = 3,
}

impl Tissue {
    pub const ALL: [Tissue; 4] = [Tissue::Air, Tissue::Bone, Tissue::Lung, Tissue::Other];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Voxel grid extents and spacing shared by volumes, labels and masks.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Grid {
    /// `[nz, ny, nx]`
    pub extents: [usize; 3],
    /// `[z, y, x]` spacing in millimetres.
    pub spacing_mm: [f32; 3],
}

impl Grid {
    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    /// Physical `(x, y, z)` position of a voxel centre.
    pub fn position(&self, z: usize, y: usize, x: usize) -> [f32; 3] {
        let c = |i: usize, axis: usize| (i as f32 + 0.5 - self.extents[axis] as f32 / 2.0) * self.spacing_mm[axis];
        [c(x, 2), c(y, 1), c(z, 0)]
    }

    fn validate(&self) -> Result<()> {
        if self.extents.contains(&0) || self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(config_err("grid extents and spacing must be positive"));
        }
        Ok(())
    }

    /// 6-connected neighbours of a flat index.
    fn neighbours(&self, i: usize) -> impl Iterator<Item = usize> {
        let [nz, ny, nx] = self.extents;
        let (z, y, x) = (i / (ny * nx), (i / nx) % ny, i % nx);
        let plane = ny * nx;
        [
            (x > 0).then(|| i - 1),
            (x + 1 < nx).then_some(i + 1),
            (y > 0).then(|| i - nx),
            (y + 1 < ny).then_some(i + nx),
            (z > 0).then(|| i - plane),
            (z + 1 < nz).then_some(i + plane),
        ]
        .into_iter()
        .flatten()
    }

    fn on_boundary(&self, i: usize) -> bool {
        let [nz, ny, nx] = self.extents;
        let (z, y, x) = (i / (ny * nx), (i / nx) % ny, i % nx);
        z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx
    }
}

/// CT volume in Hounsfield units.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub grid: Grid,
    pub values: Vec<f32>,
}

impl Volume3D {
    pub fn new(grid: Grid, values: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::ExtentMismatch {
                what: "volume values",
                expected: grid.extents.to_vec(),
                found: alloc::vec![values.len()],
            });
        }
        Ok(Self { grid, values })
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[self.grid.index(z, y, x)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub grid: Grid,
    pub labels: Vec<Tissue>,
}

impl LabelVolume {
    pub fn at(&self, z: usize, y: usize, x: usize) -> Tissue {
        self.labels[self.grid.index(z, y, x)]
    }

    pub fn mask(&self, tissue: Tissue) -> Mask3D {
        Mask3D {
            grid: self.grid,
            bits: self.labels.iter().map(|&l| l == tissue).collect(),
        }
    }

    /// Fraction of voxels carrying each label, indexed by label code.
    pub fn fractions(&self) -> [f64; 4] {
        let mut counts = [0usize; 4];
        self.labels.iter().for_each(|&l| counts[l as usize] += 1);
        counts.map(|c| c as f64 / self.labels.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask3D {
    pub grid: Grid,
    pub bits: Vec<bool>,
}

impl Mask3D {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &Mask3D) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    /// Sørensen–Dice overlap; two empty masks score 1.
    pub fn dice(&self, other: &Mask3D) -> f64 {
        let denom = self.count() + other.count();
        if denom == 0 {
            return 1.0;
        }
        2.0 * self.intersection_count(other) as f64 / denom as f64
    }

    /// `radius` passes of 6-neighbourhood dilation; voxels where `allowed` is
    /// false are never added.
    fn dilate(&self, radius: usize, allowed: Option<&[bool]>) -> Mask3D {
        let mut bits = self.bits.clone();
        for _ in 0..radius {
            let prev = bits.clone();
            for (i, b) in bits.iter_mut().enumerate() {
                if !*b && allowed.is_none_or(|a| a[i]) && self.grid.neighbours(i).any(|n| prev[n]) {
                    *b = true;
                }
            }
        }
        Mask3D { grid: self.grid, bits }
    }

    /// 6-neighbourhood erosion; voxels outside the grid count as set.
    fn erode(&self, radius: usize) -> Mask3D {
        let mut bits = self.bits.clone();
        for _ in 0..radius {
            let prev = bits.clone();
            for (i, b) in bits.iter_mut().enumerate() {
                if *b && self.grid.neighbours(i).any(|n| !prev[n]) {
                    *b = false;
                }
            }
        }
        Mask3D { grid: self.grid, bits }
    }
}

/// Tissue HU range `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HuRange {
    pub lo: f32,
    pub hi: f32,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhantomConfig {
    pub grid: Grid,
    /// Body ellipsoid semi-axes `(x, y, z)`.
    pub body_semi_axes_mm: [f32; 3],
    /// Lung ellipsoid semi-axes `(x, y, z)`; the two lungs mirror in `x`.
    pub lung_semi_axes_mm: [f32; 3],
    /// Right-lung centre `(x, y, z)`; the left lung uses `−x`.
    pub lung_offset_mm: [f32; 3],
    pub rib_count: usize,
    pub rib_tube_radius_mm: f32,
    /// Rib centreline ellipse as a fraction of the body cross-section.
    pub rib_scale: f32,
    pub rib_spacing_mm: f32,
    /// Cranial position of the top rib.
    pub rib_top_z_mm: f32,
    /// Rib rise per mm of posterior travel (posterior ends sit higher).
    pub rib_slope: f32,
    /// Half-width, in degrees, of the anterior gap in each rib arc.
    pub rib_anterior_gap_deg: f32,
    pub spine_radius_mm: f32,
    /// Spine axis position `y` (negative = posterior).
    pub spine_y_mm: f32,
    pub air_hu: f32,
    pub lung_hu: HuRange,
    pub soft_hu: HuRange,
    /// Bone HU range. Marrow draws from its lower half, cortex from the upper.
    pub bone_hu: HuRange,
    /// Thickness of the cortical shell on ribs and spine; 0 gives solid bone.
    pub cortical_shell_mm: f32,
    pub noise_sigma_hu: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid: Grid {
                extents: [160, 120, 160],
                spacing_mm: [2.0; 3],
            },
            body_semi_axes_mm: [155.0, 110.0, 260.0],
            lung_semi_axes_mm: [50.0, 55.0, 110.0],
            lung_offset_mm: [64.0, 5.0, 10.0],
            rib_count: 12,
            rib_tube_radius_mm: 7.0,
            rib_scale: 0.88,
            rib_spacing_mm: 24.0,
            rib_top_z_mm: 120.0,
            rib_slope: 0.27,
            rib_anterior_gap_deg: 35.0,
            spine_radius_mm: 16.0,
            spine_y_mm: -78.0,
            air_hu: -1000.0,
            lung_hu: HuRange { lo: -900.0, hi: -700.0 },
            soft_hu: HuRange { lo: 20.0, hi: 60.0 },
            bone_hu: HuRange { lo: 400.0, hi: 1200.0 },
            cortical_shell_mm: 3.0,
            noise_sigma_hu: 10.0,
            seed: 0,
        }
    }
}

fn inside_ellipsoid(p: [f32; 3], centre: [f32; 3], semi: [f32; 3]) -> bool {
    let q = |i: usize| (p[i] - centre[i]) / semi[i];
    q(0) * q(0) + q(1) * q(1) + q(2) * q(2) <= 1.0
}

impl PhantomConfig {
    /// Default geometry with anatomy sizes jittered by `seed` (about ±8%).
    pub fn varied(seed: u64) -> Self {
        let mut r = rng::stream(seed, 1);
        let mut j = |v: f32, frac: f32| v * (1.0 + r.random_range(-frac..=frac));
        let d = Self::default();
        let scale = j(1.0, 0.06);
        let body = d.body_semi_axes_mm.map(|v| j(v * scale, 0.02));
        let lung = d.lung_semi_axes_mm.map(|v| j(v * scale, 0.03));
        Self {
            body_semi_axes_mm: body,
            lung_semi_axes_mm: lung,
            lung_offset_mm: [
                d.lung_offset_mm[0] * lung[0] / d.lung_semi_axes_mm[0],
                d.lung_offset_mm[1],
                j(d.lung_offset_mm[2], 0.3),
            ],
            rib_spacing_mm: j(d.rib_spacing_mm, 0.08),
            rib_top_z_mm: j(d.rib_top_z_mm, 0.08),
            rib_slope: j(d.rib_slope, 0.2),
            rib_tube_radius_mm: j(d.rib_tube_radius_mm, 0.1),
            spine_radius_mm: j(d.spine_radius_mm, 0.1),
            seed,
            ..d
        }
    }

    fn lung_centres(&self) -> [[f32; 3]; 2] {
        let [x, y, z] = self.lung_offset_mm;
        [[x, y, z], [-x, y, z]]
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let positive = self
            .body_semi_axes_mm
            .iter()
            .chain(&self.lung_semi_axes_mm)
            .chain([&self.rib_tube_radius_mm, &self.spine_radius_mm, &self.rib_spacing_mm])
            .all(|&v| v > 0.0);
        if !positive || !(self.noise_sigma_hu >= 0.0) {
            return Err(config_err("phantom sizes must be positive and noise nonnegative"));
        }
        if !(self.cortical_shell_mm >= 0.0) {
            return Err(config_err("cortical shell thickness must be nonnegative"));
        }
        for (name, r) in [("lung", self.lung_hu), ("soft", self.soft_hu), ("bone", self.bone_hu)] {
            if !(r.lo <= r.hi) || r.lo < HU_MIN || r.hi > HU_MAX {
                return Err(config_err(alloc::format!(
                    "{name} HU range [{}, {}] invalid",
                    r.lo,
                    r.hi
                )));
            }
        }
        // Lungs strictly inside the body: test the extreme points of each lung.
        for c in self.lung_centres() {
            for axis in 0..3 {
                for sign in [-1.0f32, 1.0] {
                    let mut p = c;
                    p[axis] += sign * self.lung_semi_axes_mm[axis];
                    if !inside_ellipsoid(p, [0.0; 3], self.body_semi_axes_mm) {
                        return Err(config_err("lung ellipsoid extends outside the body"));
                    }
                }
            }
        }
        if c_abs(self.lung_offset_mm[0]) < self.lung_semi_axes_mm[0] {
            return Err(config_err("lungs overlap across the midline"));
        }
        if !(self.rib_scale > 0.0 && self.rib_scale < 1.0) {
            return Err(config_err("ribs must lie inside the body shell (0 < rib_scale < 1)"));
        }
        let rx = self.rib_scale * self.body_semi_axes_mm[0];
        let ry = self.rib_scale * self.body_semi_axes_mm[1];
        if rx + self.rib_tube_radius_mm >= self.body_semi_axes_mm[0]
            || ry + self.rib_tube_radius_mm >= self.body_semi_axes_mm[1]
        {
            return Err(config_err("rib tubes cross the skin surface"));
        }
        Ok(())
    }

    /// Distance from `p` to the nearest rib centreline, and that rib's index.
    fn rib_distance(&self, p: [f32; 3]) -> (f32, usize) {
        let rx = self.rib_scale * self.body_semi_axes_mm[0];
        let ry = self.rib_scale * self.body_semi_axes_mm[1];
        let theta = libm::atan2f(p[1] / ry, p[0] / rx);
        let anterior = core::f32::consts::FRAC_PI_2;
        if c_abs(theta - anterior) < self.rib_anterior_gap_deg.to_radians() {
            return (f32::INFINITY, 0);
        }
        let (cx, cy) = (rx * libm::cosf(theta), ry * libm::sinf(theta));
        // Posterior (cy < 0) ends rise cranially.
        let rise = -self.rib_slope * cy;
        let mut best = (f32::INFINITY, 0);
        for i in 0..self.rib_count {
            let cz = self.rib_top_z_mm - i as f32 * self.rib_spacing_mm + rise;
            let dz = p[2] - cz;
            if c_abs(dz) > self.rib_tube_radius_mm + self.grid.spacing_mm[0] {
                continue;
            }
            let d = libm::sqrtf((p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy) + dz * dz);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }
}

fn c_abs(v: f32) -> f32 {
    libm::fabsf(v)
}

/// Structure a voxel belongs to; rib and lung indices pick their own HU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Structure {
    Air,
    Body,
    Lung(usize),
    Spine { cortex: bool },
    Rib { index: usize, cortex: bool },
}

/// Rasterizes the analytic anatomy and samples HU per structure plus noise.
pub fn generate_phantom(config: &PhantomConfig) -> Result<(Volume3D, LabelVolume)> {
    config.validate()?;
    let grid = config.grid;
    let mut r = rng::stream(config.seed, 2);
    let mut draw = |range: HuRange| {
        if range.lo == range.hi {
            range.lo
        } else {
            r.random_range(range.lo..=range.hi)
        }
    };
    let body_hu = draw(config.soft_hu);
    let lung_hu = [draw(config.lung_hu), draw(config.lung_hu)];
    let mid = 0.5 * (config.bone_hu.lo + config.bone_hu.hi);
    let marrow = HuRange {
        lo: config.bone_hu.lo,
        hi: mid,
    };
    let cortex = HuRange {
        lo: mid,
        hi: config.bone_hu.hi,
    };
    // [marrow, cortex] for the spine, then for each rib.
    let spine_hu = [draw(marrow), draw(cortex)];
    let rib_hu: Vec<[f32; 2]> = (0..config.rib_count).map(|_| [draw(marrow), draw(cortex)]).collect();
    let shell = config.cortical_shell_mm;
    let lung_centres = config.lung_centres();

    let [nz, ny, nx] = grid.extents;
    let mut values = Vec::with_capacity(grid.len());
    let mut labels = Vec::with_capacity(grid.len());
    let noise = Normal::new(0.0f32, config.noise_sigma_hu).map_err(|_| config_err("invalid noise sigma"))?;
    let mut nr = rng::stream(config.seed, 3);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = grid.position(z, y, x);
                let s = if !inside_ellipsoid(p, [0.0; 3], config.body_semi_axes_mm) {
                    Structure::Air
                } else {
                    let spine_d = libm::hypotf(p[0], p[1] - config.spine_y_mm);
                    let (rib_d, index) = config.rib_distance(p);
                    if spine_d <= config.spine_radius_mm {
                        Structure::Spine {
                            cortex: spine_d > config.spine_radius_mm - shell,
                        }
                    } else if rib_d <= config.rib_tube_radius_mm {
                        Structure::Rib {
                            index,
                            cortex: rib_d > config.rib_tube_radius_mm - shell,
                        }
                    } else if let Some(k) = lung_centres
                        .iter()
                        .position(|&c| inside_ellipsoid(p, c, config.lung_semi_axes_mm))
                    {
                        Structure::Lung(k)
                    } else {
                        Structure::Body
                    }
                };
                let (base, label) = match s {
                    Structure::Air => (config.air_hu, Tissue::Air),
                    Structure::Body => (body_hu, Tissue::Other),
                    Structure::Lung(k) => (lung_hu[k], Tissue::Lung),
                    Structure::Spine { cortex } => (spine_hu[cortex as usize], Tissue::Bone),
                    Structure::Rib { index, cortex } => (rib_hu[index][cortex as usize], Tissue::Bone),
                };
                let n = if config.noise_sigma_hu > 0.0 {
                    noise.sample(&mut nr)
                } else {
                    0.0
                };
                values.push((base + n).clamp(HU_MIN, HU_MAX));
                labels.push(label);
            }
        }
    }
    Ok((Volume3D { grid, values }, LabelVolume { grid, labels }))
}

pub const DEFAULT_BONE_THRESHOLD_HU: f32 = 300.0;
pub const DEFAULT_LUNG_AIR_HU: f32 = -500.0;
pub const DEFAULT_LUNG_DILATION: usize = 2;
/// Voxels above this count as body when checking that a body exists.
pub const BODY_PRESENCE_HU: f32 = -200.0;

/// `HU ≥ threshold`, then a radius-1 closing.
pub fn segment_bone(vol: &Volume3D, threshold_hu: f32) -> Mask3D {
    let raw = Mask3D {
        grid: vol.grid,
        bits: vol.values.iter().map(|&v| v >= threshold_hu).collect(),
    };
    raw.dilate(1, None).erode(1)
}

/// Air voxels connected to the volume boundary (outside the patient).
fn outside_air(vol: &Volume3D, air_hu: f32) -> Vec<bool> {
    let grid = vol.grid;
    let air: Vec<bool> = vol.values.iter().map(|&v| v < air_hu).collect();
    let mut outside = vec![false; grid.len()];
    let mut queue: VecDeque<usize> = (0..grid.len()).filter(|&i| air[i] && grid.on_boundary(i)).collect();
    queue.iter().for_each(|&i| outside[i] = true);
    while let Some(i) = queue.pop_front() {
        for n in grid.neighbours(i) {
            if air[n] && !outside[n] {
                outside[n] = true;
                queue.push_back(n);
            }
        }
    }
    outside
}

/// Interior air below `air_hu`, excluding boundary-connected air, dilated by
/// `dilation_radius` 6-neighbourhood steps (never into outside air).
pub fn segment_lung(vol: &Volume3D, air_hu: f32, dilation_radius: usize) -> Result<Mask3D> {
    if !vol.values.iter().any(|&v| v > BODY_PRESENCE_HU) {
        return Err(Error::NoBody {
            threshold_hu: BODY_PRESENCE_HU,
        });
    }
    let outside = outside_air(vol, air_hu);
    let interior = Mask3D {
        grid: vol.grid,
        bits: vol
            .values
            .iter()
            .zip(&outside)
            .map(|(&v, &o)| v < air_hu && !o)
            .collect(),
    };
    let allowed: Vec<bool> = outside.iter().map(|o| !o).collect();
    Ok(interior.dilate(dilation_radius, Some(&allowed)))
}

/// Combines segmentations into a partition with precedence bone > lung > other.
///
/// Body is everything not connected to outside air.
pub fn derive_labels(vol: &Volume3D, bone: &Mask3D, lung: &Mask3D, air_hu: f32) -> LabelVolume {
    let outside = outside_air(vol, air_hu);
    let labels = (0..vol.grid.len())
        .map(|i| {
            if bone.bits[i] {
                Tissue::Bone
            } else if lung.bits[i] {
                Tissue::Lung
            } else if outside[i] {
                Tissue::Air
            } else {
                Tissue::Other
            }
        })
        .collect();
    LabelVolume { grid: vol.grid, labels }
}
