//! The VVOL on-disk format.
//!
//! A volume is stored as two files: a UTF-8 text header at the given path and
//! a raw payload at the same path with `.raw` appended. The header is
//! line-oriented `key: value` pairs after a `vvol 1` magic line:
//!
//! ```text
//! vvol 1
//! shape: 16 48 48
//! spacing_mm: 1.5 1.0 1.0
//! dtype: f32
//! byte_order: little
//! origin_id: case-0000-s
//! ```
//!
//! The payload is little-endian, z-major (then y, then x). Images use dtype
//! `f32`, masks `u8`.

use super::{LabelMask, Volume};
use crate::error::{Error, Result};
use ndarray::Array3;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

fn payload_path(header: &Path) -> PathBuf {
    let mut os = header.as_os_str().to_owned();
    os.push(".raw");
    PathBuf::from(os)
}

struct Header {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    origin_id: String,
}

fn write_header(path: &Path, h: &Header) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "vvol 1")?;
    writeln!(f, "shape: {} {} {}", h.shape[0], h.shape[1], h.shape[2])?;
    writeln!(
        f,
        "spacing_mm: {} {} {}",
        h.spacing[0], h.spacing[1], h.spacing[2]
    )?;
    writeln!(f, "dtype: {}", h.dtype)?;
    writeln!(f, "byte_order: little")?;
    writeln!(f, "origin_id: {}", h.origin_id)?;
    Ok(())
}

fn parse_header(path: &Path) -> Result<Header> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("vvol 1") => {}
        other => {
            return Err(Error::CorruptHeader(format!(
                "bad magic line {:?} in {}",
                other,
                path.display()
            )))
        }
    }
    let mut shape = None;
    let mut spacing = None;
    let mut dtype = None;
    let mut origin_id = None;
    let mut byte_order = None;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::CorruptHeader(format!("malformed line {line:?}")))?;
        let value = value.trim();
        match key.trim() {
            "shape" => {
                let parts: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::CorruptHeader(format!("shape {value:?}"))))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::CorruptHeader(format!("shape {value:?}")));
                }
                shape = Some([parts[0], parts[1], parts[2]]);
            }
            "spacing_mm" => {
                let parts: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| Error::CorruptHeader(format!("spacing {value:?}")))
                    })
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::CorruptHeader(format!("spacing {value:?}")));
                }
                spacing = Some([parts[0], parts[1], parts[2]]);
            }
            "dtype" => dtype = Some(value.to_string()),
            "byte_order" => byte_order = Some(value.to_string()),
            "origin_id" => origin_id = Some(value.to_string()),
            other => {
                return Err(Error::CorruptHeader(format!("unknown key {other:?}")));
            }
        }
    }
    if byte_order.as_deref() != Some("little") {
        return Err(Error::CorruptHeader(format!(
            "unsupported byte order {byte_order:?}"
        )));
    }
    Ok(Header {
        shape: shape.ok_or_else(|| Error::CorruptHeader("missing shape".into()))?,
        spacing: spacing.ok_or_else(|| Error::CorruptHeader("missing spacing_mm".into()))?,
        dtype: dtype.ok_or_else(|| Error::CorruptHeader("missing dtype".into()))?,
        origin_id: origin_id.ok_or_else(|| Error::CorruptHeader("missing origin_id".into()))?,
    })
}

fn read_payload(header_path: &Path, expected_len: usize, elem: usize) -> Result<Vec<u8>> {
    let p = payload_path(header_path);
    if !p.exists() {
        return Err(Error::MissingFile(p));
    }
    let bytes = fs::read(&p)?;
    if bytes.len() != expected_len * elem {
        return Err(Error::CorruptHeader(format!(
            "{}: header declares {} scalars but payload holds {} bytes ({} scalars)",
            p.display(),
            expected_len,
            bytes.len(),
            bytes.len() / elem
        )));
    }
    Ok(bytes)
}

pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    vol.validate()?;
    write_header(
        path,
        &Header {
            shape: vol.shape(),
            spacing: vol.spacing,
            dtype: "f32".into(),
            origin_id: vol.origin_id.clone(),
        },
    )?;
    let mut bytes = Vec::with_capacity(vol.data.len() * 4);
    for &v in vol.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(payload_path(path), bytes)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let h = parse_header(path)?;
    if h.dtype != "f32" {
        return Err(Error::CorruptHeader(format!(
            "expected dtype f32 for a volume, got {:?}",
            h.dtype
        )));
    }
    let n = h.shape[0] * h.shape[1] * h.shape[2];
    let bytes = read_payload(path, n, 4)?;
    let mut values = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let data = Array3::from_shape_vec((h.shape[0], h.shape[1], h.shape[2]), values)
        .map_err(|e| Error::CorruptHeader(e.to_string()))?;
    Volume::new(data, h.spacing, h.origin_id)
}

pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    mask.validate()?;
    write_header(
        path,
        &Header {
            shape: mask.shape(),
            spacing: mask.spacing,
            dtype: "u8".into(),
            origin_id: String::from("mask"),
        },
    )?;
    fs::write(payload_path(path), mask.data.as_slice().unwrap())?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let h = parse_header(path)?;
    if h.dtype != "u8" {
        return Err(Error::CorruptHeader(format!(
            "expected dtype u8 for a mask, got {:?}",
            h.dtype
        )));
    }
    let n = h.shape[0] * h.shape[1] * h.shape[2];
    let bytes = read_payload(path, n, 1)?;
    let data = Array3::from_shape_vec((h.shape[0], h.shape[1], h.shape[2]), bytes)
        .map_err(|e| Error::CorruptHeader(e.to_string()))?;
    LabelMask::new(data, h.spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use ndarray::Array3;
    use std::fs;

    fn random_volume(seed: u64, shape: (usize, usize, usize)) -> Volume {
        let mut s = SeedStream::new(seed);
        let data = Array3::from_shape_simple_fn(shape, || s.normal() as f32);
        Volume::new(data, [1.5, 0.41, 0.41], format!("rv-{seed}")).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vvol");
        let vol = random_volume(1, (4, 4, 4));
        save_volume(&vol, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.data, vol.data);
        assert_eq!(back.spacing, vol.spacing);
        assert_eq!(back.origin_id, vol.origin_id);
    }

    #[test]
    fn payload_size_mismatch_is_corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vvol");
        let vol = random_volume(2, (2, 2, 2));
        save_volume(&vol, &p).unwrap();
        // 7 scalars instead of the declared 8.
        fs::write(p.with_extension("vvol.raw"), vec![0u8; 7 * 4]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn nan_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vvol");
        let vol = random_volume(3, (2, 2, 2));
        save_volume(&vol, &p).unwrap();
        let mut bytes = fs::read(p.with_extension("vvol.raw")).unwrap();
        bytes[0..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(p.with_extension("vvol.raw"), bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::NonFiniteData(_))));
    }

    #[test]
    fn missing_header_file() {
        assert!(matches!(
            load_volume("/nonexistent/path.vvol"),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vvol");
        let mut data = Array3::<u8>::zeros((3, 4, 5));
        data[[1, 2, 3]] = 1;
        data[[2, 0, 0]] = 2;
        let mask = LabelMask::new(data, [1.0, 1.0, 1.0]).unwrap();
        save_mask(&mask, &p).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(back, mask);
    }
}
