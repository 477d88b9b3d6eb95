//! Atomic file writes, 16-bit PGM and raw little-endian float dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use xdec_core::drr::{Domain, Image2D};

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .context("output path has no file name")?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_bytes(bytes: &[u8]) -> Result<Vec<f32>> {
    ensure!(
        bytes.len().is_multiple_of(4),
        "raw float data length {} is not a multiple of 4",
        bytes.len()
    );
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    f32_from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Binary 16-bit PGM; values are clamped to [0, 1] and scaled to 65535.
pub fn encode_pgm(img: &Image2D) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 2);
    for &v in &img.data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Parses binary PGM with 8- or 16-bit samples into display values.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image2D> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(pos > start, "truncated PGM header");
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_owned());
    }
    ensure!(fields[0] == "P5", "not a binary PGM (magic {:?})", fields[0]);
    let width: usize = fields[1].parse().context("PGM width")?;
    let height: usize = fields[2].parse().context("PGM height")?;
    let maxval: u32 = fields[3].parse().context("PGM maxval")?;
    ensure!((1..=65535).contains(&maxval), "PGM maxval {maxval} out of range");
    pos += 1;
    let wide = maxval > 255;
    let n = width * height;
    let need = if wide { 2 * n } else { n };
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() < need {
        bail!("PGM pixel data truncated: {} of {need} bytes", body.len());
    }
    let scale = 1.0 / maxval as f32;
    let data = if wide {
        body[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 * scale)
            .collect()
    } else {
        body[..need].iter().map(|&b| b as f32 * scale).collect()
    };
    Ok(Image2D::new(height, width, data, Domain::Display)?)
}

pub fn write_pgm(path: &Path, img: &Image2D) -> Result<()> {
    atomic_write(path, &encode_pgm(img))
}

pub fn read_pgm(path: &Path) -> Result<Image2D> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_pgm(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Reads a PGM, or a raw `.f32` dump of a square image.
pub fn read_image(path: &Path) -> Result<Image2D> {
    if path.extension().is_some_and(|e| e == "f32") {
        let data = read_f32(path)?;
        let side = (data.len() as f64).sqrt() as usize;
        ensure!(side * side == data.len(), "raw image {} is not square", path.display());
        return Ok(Image2D::new(side, side, data, Domain::Display)?);
    }
    read_pgm(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_quantizes() {
        let img = Image2D::new(2, 3, vec![0.0, 0.25, 0.5, 1.0, 1.5, -1.0], Domain::Display).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        let back = decode_pgm(&bytes).unwrap();
        assert_eq!(back.dims(), (2, 3));
        let want = [0.0, 0.25, 0.5, 1.0, 1.0, 0.0];
        for (a, b) in back.data.iter().zip(want) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        assert_eq!(encode_pgm(&back), bytes);
    }

    #[test]
    fn pgm_8bit_and_comments() {
        let mut b = b"P5 # comment\n2 1\n255\n".to_vec();
        b.extend([0u8, 255]);
        assert_eq!(decode_pgm(&b).unwrap().data, vec![0.0, 1.0]);
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n65535\n\x00\x01").is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.bin");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
