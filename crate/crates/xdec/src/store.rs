//! On-disk layouts for phantom volumes and rendered datasets.
//!
//! A volume directory holds `volume.json`, `volume.f32` (HU, little-endian,
//! z-major) and `labels.u8`. A dataset directory holds `dataset.json` plus
//! raw float stacks of `H×W` planes; eval sets keep their ground truth in a
//! separate directory so training never opens it.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use xdec_core::dataset::{DatasetConfig, DrrSample, EvalSample, EvalSet, UnpairedDataset};
use xdec_core::drr::{DatasetNorm, Domain, Image2D};
use xdec_core::phantom::{Grid, LabelVolume, PhantomConfig, Tissue, Volume3D};

use crate::io::{atomic_write, f32_bytes, read_f32, read_json, write_json};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub format_version: u32,
    pub grid: Grid,
    pub dtype: String,
    pub values: String,
    pub labels: String,
    pub phantom: Option<PhantomConfig>,
}

pub fn save_volume(dir: &Path, vol: &Volume3D, labels: &LabelVolume, phantom: Option<&PhantomConfig>) -> Result<()> {
    ensure!(vol.grid == labels.grid, "volume and label grids differ");
    atomic_write(&dir.join("volume.f32"), &f32_bytes(&vol.values))?;
    let codes: Vec<u8> = labels.labels.iter().map(|&t| t as u8).collect();
    atomic_write(&dir.join("labels.u8"), &codes)?;
    write_json(
        &dir.join("volume.json"),
        &VolumeHeader {
            format_version: FORMAT_VERSION,
            grid: vol.grid,
            dtype: "f32le".into(),
            values: "volume.f32".into(),
            labels: "labels.u8".into(),
            phantom: phantom.cloned(),
        },
    )
}

pub fn load_volume(dir: &Path) -> Result<(Volume3D, LabelVolume)> {
    let h: VolumeHeader = read_json(&dir.join("volume.json"))?;
    ensure!(
        h.format_version == FORMAT_VERSION,
        "unsupported volume format version {}",
        h.format_version
    );
    ensure!(h.dtype == "f32le", "unsupported volume dtype {:?}", h.dtype);
    let vol = Volume3D::new(h.grid, read_f32(&dir.join(&h.values))?)?;
    let raw = fs::read(dir.join(&h.labels)).with_context(|| format!("reading labels in {}", dir.display()))?;
    ensure!(
        raw.len() == h.grid.len(),
        "label count {} does not match grid {:?}",
        raw.len(),
        h.grid.extents
    );
    let labels = raw
        .iter()
        .map(|&c| Tissue::from_code(c).with_context(|| format!("invalid label code {c}")))
        .collect::<Result<Vec<_>>>()?;
    Ok((vol, LabelVolume { grid: h.grid, labels }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub image_size: usize,
    pub norm: DatasetNorm,
    pub cxr_count: usize,
    pub drr_count: usize,
    pub config: Option<DatasetConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalHeader {
    pub format_version: u32,
    pub image_size: usize,
    pub norm: DatasetNorm,
    pub count: usize,
}

fn planes(data: Vec<f32>, size: usize, expected: usize, what: &str) -> Result<Vec<Image2D>> {
    let plane = size * size;
    ensure!(
        data.len() == plane * expected,
        "{what}: {} floats, expected {}",
        data.len(),
        plane * expected
    );
    data.chunks_exact(plane)
        .map(|c| Ok(Image2D::new(size, size, c.to_vec(), Domain::Display)?))
        .collect()
}

/// `cxr.f32` holds one plane per image; `drr.f32` four per sample (total,
/// bone, lung, other).
pub fn save_dataset(dir: &Path, data: &UnpairedDataset, config: Option<&DatasetConfig>) -> Result<()> {
    let cxr: Vec<f32> = data.cxr.iter().flat_map(|i| i.data.iter().copied()).collect();
    let drr: Vec<f32> = data
        .drr
        .iter()
        .flat_map(|s| std::iter::once(&s.image).chain(&s.components))
        .flat_map(|i| i.data.iter().copied())
        .collect();
    atomic_write(&dir.join("cxr.f32"), &f32_bytes(&cxr))?;
    atomic_write(&dir.join("drr.f32"), &f32_bytes(&drr))?;
    write_json(
        &dir.join("dataset.json"),
        &DatasetHeader {
            format_version: FORMAT_VERSION,
            image_size: data.image_size,
            norm: data.norm,
            cxr_count: data.cxr.len(),
            drr_count: data.drr.len(),
            config: config.cloned(),
        },
    )
}

pub fn load_dataset(dir: &Path) -> Result<UnpairedDataset> {
    let h: DatasetHeader = read_json(&dir.join("dataset.json")).context("missing or invalid dataset")?;
    ensure!(
        h.format_version == FORMAT_VERSION,
        "unsupported dataset format version {}",
        h.format_version
    );
    let cxr = planes(read_f32(&dir.join("cxr.f32"))?, h.image_size, h.cxr_count, "cxr.f32")?;
    let flat = planes(
        read_f32(&dir.join("drr.f32"))?,
        h.image_size,
        4 * h.drr_count,
        "drr.f32",
    )?;
    let drr = flat
        .chunks_exact(4)
        .map(|c| DrrSample {
            image: c[0].clone(),
            components: [c[1].clone(), c[2].clone(), c[3].clone()],
        })
        .collect();
    Ok(UnpairedDataset {
        image_size: h.image_size,
        norm: h.norm,
        cxr,
        drr,
    })
}

/// `eval.f32` holds three planes per sample: image, bone-free target and the
/// bone mask as 0/1.
pub fn save_eval_set(dir: &Path, eval: &EvalSet) -> Result<()> {
    let mut flat = Vec::new();
    for s in &eval.samples {
        flat.extend_from_slice(&s.image.data);
        flat.extend_from_slice(&s.bone_free.data);
        flat.extend(s.bone_mask.iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
    }
    atomic_write(&dir.join("eval.f32"), &f32_bytes(&flat))?;
    write_json(
        &dir.join("eval.json"),
        &EvalHeader {
            format_version: FORMAT_VERSION,
            image_size: eval.image_size,
            norm: eval.norm,
            count: eval.samples.len(),
        },
    )
}

pub fn load_eval_set(dir: &Path) -> Result<EvalSet> {
    let h: EvalHeader = read_json(&dir.join("eval.json")).context("missing or invalid eval set")?;
    ensure!(
        h.format_version == FORMAT_VERSION,
        "unsupported eval format version {}",
        h.format_version
    );
    let flat = planes(read_f32(&dir.join("eval.f32"))?, h.image_size, 3 * h.count, "eval.f32")?;
    let samples = flat
        .chunks_exact(3)
        .map(|c| EvalSample {
            image: c[0].clone(),
            bone_free: c[1].clone(),
            bone_mask: c[2].data.iter().map(|&v| v > 0.5).collect(),
        })
        .collect();
    Ok(EvalSet {
        image_size: h.image_size,
        norm: h.norm,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use xdec_core::phantom::generate_phantom;

    fn img(seed: f32) -> Image2D {
        Image2D::new(2, 2, vec![seed, seed + 0.1, seed + 0.2, seed + 0.3], Domain::Display).unwrap()
    }

    #[test]
    fn volume_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PhantomConfig::default();
        cfg.grid.extents = [12, 10, 12];
        cfg.grid.spacing_mm = [25.0; 3];
        let (v, l) = generate_phantom(&cfg).unwrap();
        save_volume(dir.path(), &v, &l, Some(&cfg)).unwrap();
        let (v2, l2) = load_volume(dir.path()).unwrap();
        assert_eq!((v, l), (v2, l2));
        fs::write(dir.path().join("labels.u8"), [9u8; 4]).unwrap();
        assert!(load_volume(dir.path()).is_err());
    }

    #[test]
    fn dataset_and_eval_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = UnpairedDataset {
            image_size: 2,
            norm: DatasetNorm::new(3.0).unwrap(),
            cxr: vec![img(0.0), img(0.5)],
            drr: vec![DrrSample {
                image: img(0.1),
                components: [img(0.2), img(0.3), img(0.4)],
            }],
        };
        save_dataset(dir.path(), &data, None).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
        let eval = EvalSet {
            image_size: 2,
            norm: data.norm,
            samples: vec![EvalSample {
                image: img(0.3),
                bone_free: img(0.2),
                bone_mask: vec![true, false, false, true],
            }],
        };
        save_eval_set(dir.path(), &eval).unwrap();
        assert_eq!(load_eval_set(dir.path()).unwrap(), eval);
    }
}
