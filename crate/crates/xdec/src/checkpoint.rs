//! Binary checkpoint of named tensors.
//!
//! Layout: `"XDEC"`, u32 LE version, u32 LE tensor count, then per tensor a
//! u16 LE name length, the UTF-8 name, a u8 rank, u32 LE extents and f32 LE
//! values; finally the CRC32 of every byte after the version field.
//!
//! Besides network weights the file carries `meta/*` tensors (training
//! config as UTF-8 bytes, step, mask scale, dataset norm) and `adam/*`
//! moment buffers, so a run can resume exactly.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;
use xdec_core::decgan::NETWORK_NAMES;
use xdec_core::drr::DatasetNorm;
use xdec_core::tensor::Tensor;
use xdec_core::train::{TrainConfig, Trainer};

use crate::io::atomic_write;

pub const MAGIC: &[u8; 4] = b"XDEC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("bad magic {0:?}, not an XDEC checkpoint")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn format_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let body_start = out.len();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| format_err(format!("name too long: {}", t.name)))?;
        let rank = u8::try_from(t.shape.len()).map_err(|_| format_err(format!("rank too large: {}", t.name)))?;
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(format_err(format!(
                "{}: shape {:?} does not match data",
                t.name, t.shape
            )));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &e in &t.shape {
            let e = u32::try_from(e).map_err(|_| format_err(format!("extent too large: {}", t.name)))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[body_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let body = &bytes[8..bytes.len() - 4];
    let t = &bytes[bytes.len() - 4..];
    let stored = u32::from_le_bytes([t[0], t[1], t[2], t[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let b = r.take(2)?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| format_err("tensor name is not UTF-8"))?;
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format_err("tensor too large"))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor::new(name, shape, data));
    }
    if r.pos != body.len() {
        return Err(format_err(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

/// A trainer snapshot plus the display normalization of its dataset.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub trainer: Trainer,
    pub norm: DatasetNorm,
}

fn u64_tensor(name: &str, v: u64) -> NamedTensor {
    let parts = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    NamedTensor::new(name, vec![4], parts)
}

fn u64_from(t: &NamedTensor) -> Result<u64> {
    if t.data.len() != 4 {
        return Err(format_err(format!("{}: expected 4 words", t.name)));
    }
    t.data.iter().enumerate().try_fold(0u64, |acc, (i, &w)| {
        if !(0.0..=65535.0).contains(&w) || w.fract() != 0.0 {
            return Err(format_err(format!("{}: invalid word {w}", t.name)));
        }
        Ok(acc | (w as u64) << (16 * i))
    })
}

impl Checkpoint {
    pub fn to_tensors(&self) -> Result<Vec<NamedTensor>> {
        let tr = &self.trainer;
        let config = serde_json::to_vec(&tr.config).map_err(|e| format_err(e.to_string()))?;
        let mut out = vec![
            NamedTensor::new(
                "meta/config",
                vec![config.len()],
                config.iter().map(|&b| b as f32).collect(),
            ),
            u64_tensor("meta/step", tr.step),
            NamedTensor::new("meta/mask_scale", vec![1], vec![tr.mask_scale]),
            NamedTensor::new("meta/norm", vec![1], vec![self.norm.max_line_integral]),
        ];
        for ((net, params), adam) in NETWORK_NAMES.iter().zip(tr.nets.params()).zip(&tr.optim) {
            for (name, t) in params.iter() {
                out.push(NamedTensor::new(
                    format!("{net}/{name}"),
                    t.shape().to_vec(),
                    t.data().to_vec(),
                ));
            }
            out.push(u64_tensor(&format!("adam/{net}/step"), adam.step));
            for (((name, t), m), v) in params.iter().zip(&adam.m).zip(&adam.v) {
                out.push(NamedTensor::new(
                    format!("adam/{net}/m/{name}"),
                    t.shape().to_vec(),
                    m.clone(),
                ));
                out.push(NamedTensor::new(
                    format!("adam/{net}/v/{name}"),
                    t.shape().to_vec(),
                    v.clone(),
                ));
            }
        }
        Ok(out)
    }

    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut by_name: HashMap<String, NamedTensor> = HashMap::with_capacity(tensors.len());
        for t in tensors {
            if by_name.contains_key(&t.name) {
                return Err(format_err(format!("duplicate tensor {}", t.name)));
            }
            by_name.insert(t.name.clone(), t);
        }
        let get = |name: &str| {
            by_name
                .get(name)
                .ok_or_else(|| format_err(format!("missing tensor {name}")))
        };
        let bytes: Vec<u8> = get("meta/config")?.data.iter().map(|&b| b as u8).collect();
        let config: TrainConfig = serde_json::from_slice(&bytes).map_err(|e| format_err(format!("config: {e}")))?;
        let scalar = |name: &str| -> Result<f32> {
            get(name)?
                .data
                .first()
                .copied()
                .ok_or_else(|| format_err(format!("{name} is empty")))
        };
        let mut trainer =
            Trainer::new(config, scalar("meta/mask_scale")?).map_err(|e| format_err(format!("config: {e}")))?;
        trainer.step = u64_from(get("meta/step")?)?;
        let norm = DatasetNorm::new(scalar("meta/norm")?).map_err(|e| format_err(e.to_string()))?;
        let lookup = |name: String, shape: &[usize]| -> Result<Vec<f32>> {
            let t = get(&name)?;
            if t.shape != shape {
                return Err(format_err(format!("{name}: shape {:?}, expected {shape:?}", t.shape)));
            }
            Ok(t.data.clone())
        };
        let Trainer { nets, optim, .. } = &mut trainer;
        for ((net, params), adam) in NETWORK_NAMES.iter().zip(nets.params_mut()).zip(optim.iter_mut()) {
            adam.step = u64_from(get(&format!("adam/{net}/step"))?)?;
            for (i, (name, t)) in params.iter_mut().enumerate() {
                let shape = t.shape().to_vec();
                *t = Tensor::new(shape.clone(), lookup(format!("{net}/{name}"), &shape)?)
                    .map_err(|e| format_err(e.to_string()))?;
                adam.m[i] = lookup(format!("adam/{net}/m/{name}"), &shape)?;
                adam.v[i] = lookup(format!("adam/{net}/v/{name}"), &shape)?;
            }
        }
        Ok(Self { trainer, norm })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_tensors(&self.to_tensors()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_tensors(decode_tensors(bytes)?)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Lowercase hex SHA-256 of checkpoint bytes.
pub fn model_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let cfg = TrainConfig {
            image_size: 16,
            base_width: 2,
            ..Default::default()
        };
        let mut trainer = Trainer::new(cfg, 12.5).unwrap();
        trainer.step = 70_000;
        trainer.optim[1].step = 3;
        trainer.optim[1].m[0][0] = 0.25;
        Checkpoint {
            trainer,
            norm: DatasetNorm::new(7.5).unwrap(),
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let a = small().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.trainer.step, 70_000);
        assert_eq!(back.trainer.optim[1].m[0][0], 0.25);
        assert_eq!(back.trainer.mask_scale, 12.5);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn corruption_is_detected() {
        let mut a = small().to_bytes().unwrap();
        let mid = a.len() / 2;
        a[mid] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&a),
            Err(CheckpointError::Checksum { .. })
        ));
    }

    #[test]
    fn distinct_header_errors() {
        let a = small().to_bytes().unwrap();
        let mut bad = a.clone();
        bad[0] = b'Y';
        assert!(matches!(decode_tensors(&bad), Err(CheckpointError::BadMagic(_))));
        let mut v99 = a.clone();
        v99[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode_tensors(&v99), Err(CheckpointError::Version(99))));
        assert!(matches!(decode_tensors(&a[..6]), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn truncated_body_after_valid_crc() {
        let t = vec![NamedTensor::new("x", vec![2], vec![1.0, 2.0])];
        let mut bytes = encode_tensors(&t).unwrap();
        assert_eq!(decode_tensors(&bytes).unwrap(), t);
        // Drop a value but keep a matching checksum.
        bytes.truncate(bytes.len() - 8);
        let crc = crc32fast::hash(&bytes[8..]);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_tensors(&bytes), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn model_id_is_hex_sha256() {
        let id = model_id(b"abc");
        assert_eq!(id, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
