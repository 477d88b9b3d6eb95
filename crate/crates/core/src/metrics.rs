//! Hessian line response and non-bone PSNR.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::drr::Image2D;
use crate::error::{config_err, Error, Result};

pub const DEFAULT_SIGMA: f64 = 1.5;
/// Factor applied to line responses in reports.
pub const R_L_REPORT_SCALE: f64 = 1e4;
pub const PSNR_CAP_DB: f64 = 99.0;
/// Fraction of the per-image bone maximum above which a pixel counts as bone.
pub const BONE_MASK_FRACTION: f32 = 0.05;

const MIN_SIDE: usize = 7;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = libm::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication. `sigma == 0` copies.
pub fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * data[y * w + clamp(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Eigenvalues `(λ1, λ2)`, `λ1 ≥ λ2`, of `[[a, b], [b, c]]`.
pub fn sym2_eigen(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mean = 0.5 * (a + c);
    let rad = libm::sqrt(0.25 * (a - c) * (a - c) + b * b);
    (mean + rad, mean - rad)
}

/// Per-pixel `(λ1 − λ2)²` over interior pixels, row-major `(h−2)×(w−2)`.
pub fn line_response_map(img: &Image2D, sigma: f64) -> Result<Vec<f64>> {
    let (h, w) = img.dims();
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::ExtentMismatch {
            what: "line_response image (minimum 7×7)",
            expected: vec![MIN_SIDE, MIN_SIDE],
            found: vec![h, w],
        });
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(config_err("sigma must be nonnegative"));
    }
    let raw: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let f = gaussian_blur(&raw, h, w, sigma);
    let at = |y: usize, x: usize| f[y * w + x];
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let fxx = at(y, x + 1) - 2.0 * at(y, x) + at(y, x - 1);
            let fyy = at(y + 1, x) - 2.0 * at(y, x) + at(y - 1, x);
            let fxy = 0.25 * (at(y + 1, x + 1) - at(y + 1, x - 1) - at(y - 1, x + 1) + at(y - 1, x - 1));
            let (l1, l2) = sym2_eigen(fxx, fxy, fyy);
            out.push((l1 - l2) * (l1 - l2));
        }
    }
    Ok(out)
}

/// Mean of `(λ1 − λ2)²` after Gaussian smoothing (unscaled).
pub fn line_response(img: &Image2D, sigma: f64) -> Result<f64> {
    let m = line_response_map(img, sigma)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// `10·log10(1/MSE)` over pixels where `bone_mask` is false, capped at 99 dB.
pub fn psnr_nonbone(result: &Image2D, reference: &Image2D, bone_mask: &[bool]) -> Result<f64> {
    if result.dims() != reference.dims() || bone_mask.len() != result.data.len() {
        return Err(Error::ExtentMismatch {
            what: "psnr inputs",
            expected: vec![result.height, result.width],
            found: vec![reference.height, reference.width, bone_mask.len()],
        });
    }
    let (mut se, mut n) = (0.0f64, 0usize);
    for ((&a, &b), &bone) in result.data.iter().zip(&reference.data).zip(bone_mask) {
        if !bone {
            let d = a as f64 - b as f64;
            se += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data(String::from("psnr_nonbone: empty non-bone region")));
    }
    let mse = se / n as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP_DB))
}

/// Pixels whose projected bone exceeds `fraction` of the image's bone maximum.
pub fn bone_mask_from_projection(bone: &Image2D, fraction: f32) -> Vec<bool> {
    let max = bone.max();
    if !(max > 0.0) {
        return vec![false; bone.data.len()];
    }
    bone.data.iter().map(|&v| v > fraction * max).collect()
}

/// One row of a metric table: a method evaluated over a set of images.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricRow {
    pub method: String,
    /// Mean line response ×1e4.
    pub r_l: f64,
    pub psnr_nonbone: Option<f64>,
    pub per_image_r_l: Vec<f64>,
    pub per_image_psnr: Vec<f64>,
}

impl MetricRow {
    /// Scores `images`, and PSNR against `references` when given.
    pub fn evaluate(
        method: impl Into<String>,
        images: &[Image2D],
        references: Option<(&[Image2D], &[Vec<bool>])>,
        sigma: f64,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data(String::from("no images to evaluate")));
        }
        let per_image_r_l = images
            .iter()
            .map(|i| line_response(i, sigma).map(|v| v * R_L_REPORT_SCALE))
            .collect::<Result<Vec<_>>>()?;
        let per_image_psnr = match references {
            Some((refs, masks)) => {
                if refs.len() != images.len() || masks.len() != images.len() {
                    return Err(Error::Data(String::from("reference count differs from image count")));
                }
                images
                    .iter()
                    .zip(refs)
                    .zip(masks)
                    .map(|((i, r), m)| psnr_nonbone(i, r, m))
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            method: method.into(),
            r_l: mean(&per_image_r_l),
            psnr_nonbone: (!per_image_psnr.is_empty()).then(|| mean(&per_image_psnr)),
            per_image_r_l,
            per_image_psnr,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub sigma: f64,
    pub rows: Vec<MetricRow>,
}
