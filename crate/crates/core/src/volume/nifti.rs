//! Minimal NIfTI-1 import adapter.
//!
//! Reads plain or gzipped `.nii` files, applies the intensity scaling from
//! the header, and reorients the voxel grid to the canonical axial order
//! used everywhere else in this crate: axis 0 = superior (z), axis 1 =
//! anterior (y), axis 2 = right (x), each increasing with its world
//! coordinate. Only grids whose direction cosines are axis-aligned (after
//! picking the dominant axis per column) are supported; oblique acquisitions
//! are rejected rather than silently resampled.

use super::Volume;
use crate::error::{Error, Result};
use flate2::read::GzDecoder;
use ndarray::{Array3, Axis};
use std::io::Read;
use std::path::Path;

/// What the importer did to the voxel grid, kept for provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NiftiImportInfo {
    /// One entry per output axis (z, y, x): source voxel axis and whether it
    /// was flipped, e.g. `["2+", "1-", "0+"]`.
    pub axis_map: [String; 3],
    pub source_dtype: String,
}

fn rd_i16(b: &[u8], off: usize, swap: bool) -> i16 {
    let v = [b[off], b[off + 1]];
    if swap {
        i16::from_be_bytes(v)
    } else {
        i16::from_le_bytes(v)
    }
}

fn rd_f32(b: &[u8], off: usize, swap: bool) -> f32 {
    let v = [b[off], b[off + 1], b[off + 2], b[off + 3]];
    if swap {
        f32::from_be_bytes(v)
    } else {
        f32::from_le_bytes(v)
    }
}

fn rd_i32(b: &[u8], off: usize, swap: bool) -> i32 {
    let v = [b[off], b[off + 1], b[off + 2], b[off + 3]];
    if swap {
        i32::from_be_bytes(v)
    } else {
        i32::from_le_bytes(v)
    }
}

/// 3x3 direction matrix: entry `[world][voxel]`, columns scaled by spacing.
fn direction_matrix(bytes: &[u8], swap: bool, pixdim: [f32; 3]) -> [[f64; 3]; 3] {
    let qform_code = rd_i16(bytes, 252, swap);
    let sform_code = rd_i16(bytes, 254, swap);
    if sform_code > 0 {
        let mut m = [[0.0f64; 3]; 3];
        for (i, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
            for j in 0..3 {
                m[i][j] = rd_f32(bytes, base + 4 * j, swap) as f64;
            }
        }
        m
    } else if qform_code > 0 {
        let b = rd_f32(bytes, 256, swap) as f64;
        let c = rd_f32(bytes, 260, swap) as f64;
        let d = rd_f32(bytes, 264, swap) as f64;
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = if rd_f32(bytes, 76, swap) < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - b * b - c * c,
            ],
        ];
        let scale = [pixdim[0] as f64, pixdim[1] as f64, qfac * pixdim[2] as f64];
        let mut m = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[i][j] * scale[j];
            }
        }
        m
    } else {
        // No orientation info: assume already axis-aligned.
        let mut m = [[0.0f64; 3]; 3];
        for (j, p) in pixdim.iter().enumerate() {
            m[j][j] = *p as f64;
        }
        m
    }
}

pub fn import_nifti(path: impl AsRef<Path>) -> Result<(Volume, NiftiImportInfo)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let raw = std::fs::read(path)?;
    let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::CorruptHeader(format!("gzip: {e}")))?;
        out
    } else {
        raw
    };
    if bytes.len() < 352 {
        return Err(Error::CorruptHeader("file shorter than a NIfTI-1 header".into()));
    }
    // sizeof_hdr doubles as the endianness probe.
    let swap = match rd_i32(&bytes, 0, false) {
        348 => false,
        _ if rd_i32(&bytes, 0, true) == 348 => true,
        other => {
            return Err(Error::CorruptHeader(format!(
                "sizeof_hdr {other} is not 348"
            )))
        }
    };
    if &bytes[344..347] != b"n+1" && &bytes[344..347] != b"ni1" {
        return Err(Error::CorruptHeader("bad NIfTI magic".into()));
    }
    let ndim = rd_i16(&bytes, 40, swap);
    if !(1..=7).contains(&ndim) {
        return Err(Error::CorruptHeader(format!("dim[0] = {ndim}")));
    }
    let nx = rd_i16(&bytes, 42, swap).max(1) as usize;
    let ny = rd_i16(&bytes, 44, swap).max(1) as usize;
    let nz = rd_i16(&bytes, 46, swap).max(1) as usize;
    for k in 4..=(ndim as usize) {
        if rd_i16(&bytes, 40 + 2 * k, swap) > 1 {
            return Err(Error::CorruptHeader(
                "only single-frame 3D images are supported".into(),
            ));
        }
    }
    let datatype = rd_i16(&bytes, 70, swap);
    let pixdim = [
        rd_f32(&bytes, 80, swap).abs(),
        rd_f32(&bytes, 84, swap).abs(),
        rd_f32(&bytes, 88, swap).abs(),
    ];
    let vox_offset = rd_f32(&bytes, 108, swap) as usize;
    let mut slope = rd_f32(&bytes, 112, swap);
    let inter = rd_f32(&bytes, 116, swap);
    if slope == 0.0 {
        slope = 1.0;
    }

    let n = nx * ny * nz;
    let (elem, name): (usize, &str) = match datatype {
        2 => (1, "u8"),
        4 => (2, "i16"),
        8 => (4, "i32"),
        16 => (4, "f32"),
        64 => (8, "f64"),
        512 => (2, "u16"),
        other => {
            return Err(Error::CorruptHeader(format!(
                "unsupported NIfTI datatype {other}"
            )))
        }
    };
    if bytes.len() < vox_offset + n * elem {
        return Err(Error::CorruptHeader(format!(
            "payload truncated: need {} bytes at offset {vox_offset}, file has {}",
            n * elem,
            bytes.len()
        )));
    }
    let payload = &bytes[vox_offset..vox_offset + n * elem];
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let off = i * elem;
        let v = match datatype {
            2 => payload[off] as f64,
            4 => rd_i16(payload, off, swap) as f64,
            8 => rd_i32(payload, off, swap) as f64,
            16 => rd_f32(payload, off, swap) as f64,
            64 => {
                let mut b = [0u8; 8];
                b.copy_from_slice(&payload[off..off + 8]);
                if swap {
                    f64::from_be_bytes(b)
                } else {
                    f64::from_le_bytes(b)
                }
            }
            512 => {
                let v = [payload[off], payload[off + 1]];
                (if swap {
                    u16::from_be_bytes(v)
                } else {
                    u16::from_le_bytes(v)
                }) as f64
            }
            _ => unreachable!(),
        };
        values.push((slope as f64 * v + inter as f64) as f32);
    }

    // NIfTI payload order: x fastest. Build as (z, y, x) directly.
    let mut grid = Array3::<f32>::zeros((nz, ny, nx));
    {
        let mut it = values.into_iter();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    grid[[z, y, x]] = it.next().unwrap();
                }
            }
        }
    }

    // Map each voxel axis to its dominant world axis.
    let m = direction_matrix(&bytes, swap, pixdim);
    let mut world_of_voxel = [0usize; 3]; // voxel axis (x,y,z order) -> world axis
    let mut flip_voxel = [false; 3];
    let mut spacing_voxel = [0.0f64; 3];
    for j in 0..3 {
        let col = [m[0][j], m[1][j], m[2][j]];
        let (world, &val) = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap();
        world_of_voxel[j] = world;
        flip_voxel[j] = val < 0.0;
        spacing_voxel[j] = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
        if spacing_voxel[j] == 0.0 {
            spacing_voxel[j] = pixdim[j].max(1e-6) as f64;
        }
    }
    {
        let mut seen = [false; 3];
        for &w in &world_of_voxel {
            seen[w] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::CorruptHeader(
                "oblique orientation: direction columns do not map to distinct axes".into(),
            ));
        }
    }

    // grid axes are (z_vox, y_vox, x_vox) = voxel axes (2, 1, 0).
    let voxel_of_grid_axis = [2usize, 1, 0];
    let mut out = grid;
    // Flip before permuting so indices line up with increasing world coords.
    for (grid_axis, &vj) in voxel_of_grid_axis.iter().enumerate() {
        if flip_voxel[vj] {
            out.invert_axis(Axis(grid_axis));
        }
    }
    // Want output axis 0 <- world z (2), 1 <- world y (1), 2 <- world x (0).
    let mut grid_axis_of_world = [0usize; 3]; // world axis -> current grid axis
    for (grid_axis, &vj) in voxel_of_grid_axis.iter().enumerate() {
        grid_axis_of_world[world_of_voxel[vj]] = grid_axis;
    }
    let perm = [
        grid_axis_of_world[2],
        grid_axis_of_world[1],
        grid_axis_of_world[0],
    ];
    let out = out.permuted_axes(perm).as_standard_layout().to_owned();

    let spacing = [
        spacing_voxel[voxel_of_grid_axis[perm[0]]],
        spacing_voxel[voxel_of_grid_axis[perm[1]]],
        spacing_voxel[voxel_of_grid_axis[perm[2]]],
    ];
    let axis_map = std::array::from_fn(|i| {
        let vj = voxel_of_grid_axis[perm[i]];
        format!("{}{}", vj, if flip_voxel[vj] { "-" } else { "+" })
    });

    let origin_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "nifti".into());
    let vol = Volume::new(out, spacing, origin_id)?;
    Ok((
        vol,
        NiftiImportInfo {
            axis_map,
            source_dtype: name.into(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    /// Build a minimal NIfTI-1 file: f32 data, given dims/pixdim and sform rows.
    fn synth_nifti(
        dims: (usize, usize, usize),
        pixdim: [f32; 3],
        srows: [[f32; 4]; 3],
        data: &[f32],
    ) -> Vec<u8> {
        let (nx, ny, nz) = dims;
        assert_eq!(data.len(), nx * ny * nz);
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dim: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
        for (k, d) in dim.iter().enumerate() {
            h[40 + 2 * k..42 + 2 * k].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&16i16.to_le_bytes()); // f32
        h[72..74].copy_from_slice(&32i16.to_le_bytes());
        let pd: [f32; 8] = [1.0, pixdim[0], pixdim[1], pixdim[2], 0.0, 0.0, 0.0, 0.0];
        for (k, p) in pd.iter().enumerate() {
            h[76 + 4 * k..80 + 4 * k].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352.0f32.to_le_bytes()); // vox_offset
        h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
        h[254..256].copy_from_slice(&1i16.to_le_bytes()); // sform_code
        for (i, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
            for j in 0..4 {
                h[base + 4 * j..base + 4 * j + 4].copy_from_slice(&srows[i][j].to_le_bytes());
            }
        }
        h[344..348].copy_from_slice(b"n+1\0");
        for &v in data {
            h.extend_from_slice(&v.to_le_bytes());
        }
        h
    }

    #[test]
    fn identity_orientation_roundtrip() {
        let dims = (3, 2, 2); // nx, ny, nz
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let srows = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 2.5, 0.0],
        ];
        let bytes = synth_nifti(dims, [1.0, 1.0, 2.5], srows, &data);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, bytes).unwrap();
        let (vol, info) = import_nifti(&p).unwrap();
        assert_eq!(vol.shape(), [2, 2, 3]); // (z, y, x)
        assert_eq!(info.axis_map, ["2+".to_string(), "1+".into(), "0+".into()]);
        assert!((vol.spacing[0] - 2.5).abs() < 1e-6);
        // Payload is x-fastest: value at (x,y,z) = x + 3y + 6z.
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..3 {
                    assert_eq!(vol.data[[z, y, x]], (x + 3 * y + 6 * z) as f32);
                }
            }
        }
    }

    #[test]
    fn flipped_axis_is_reoriented() {
        let dims = (3, 2, 2);
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        // Voxel x axis points to world -x.
        let srows = [
            [-1.0, 0.0, 0.0, 2.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        let bytes = synth_nifti(dims, [1.0, 1.0, 1.0], srows, &data);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, bytes).unwrap();
        let (vol, info) = import_nifti(&p).unwrap();
        assert_eq!(info.axis_map[2], "0-");
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..3 {
                    // x index reversed relative to payload order.
                    assert_eq!(vol.data[[z, y, x]], ((2 - x) + 3 * y + 6 * z) as f32);
                }
            }
        }
    }

    #[test]
    fn gzipped_file_is_accepted() {
        let dims = (2, 2, 2);
        let data: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let srows = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        let bytes = synth_nifti(dims, [1.0, 1.0, 1.0], srows, &data);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii.gz");
        let f = std::fs::File::create(&p).unwrap();
        let mut enc = GzEncoder::new(f, Compression::default());
        enc.write_all(&bytes).unwrap();
        enc.finish().unwrap();
        let (vol, _) = import_nifti(&p).unwrap();
        assert_eq!(vol.shape(), [2, 2, 2]);
        assert_eq!(vol.data[[1, 1, 1]], 7.0);
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dims = (2, 2, 2);
        let data: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let srows = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        let mut bytes = synth_nifti(dims, [1.0, 1.0, 1.0], srows, &data);
        bytes.truncate(bytes.len() - 8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(import_nifti(&p), Err(Error::CorruptHeader(_))));
    }
}
