//! Preprocessing: resampling, axial slicing, center-crop/resize, intensity
//! normalization, and the slice-to-volume merge that inverts the crop.
//!
//! Conventions (interpolation in f64, cast back to f32 at the end):
//! * resample maps output index `i` to input coordinate `u = i * t / s`
//!   (grids share the index-0 voxel center), clamped to the input range;
//! * resize uses half-pixel centers, `u = (i + 0.5) * in/out - 0.5`, clamped;
//! * nearest rounds `u` with `floor(u + 0.5)`;
//! * output shapes round half away from zero and clamp to >= 1.

use super::{CropBox, LabelMask, Slice2D, Volume, VolumeMeta};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Linear,
    Nearest,
}

fn axis_coord(i: usize, scale: f64, n_in: usize) -> f64 {
    (i as f64 * scale).clamp(0.0, (n_in - 1) as f64)
}

/// Per-axis linear weights: floor index, ceil index, ceil weight.
fn lerp_parts(u: f64, n_in: usize) -> (usize, usize, f64) {
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, u - i0 as f64)
}

fn nearest_index(u: f64, n_in: usize) -> usize {
    ((u + 0.5).floor() as usize).min(n_in - 1)
}

fn resampled_extent(n_in: usize, s_in: f64, s_out: f64) -> usize {
    let raw = (n_in as f64 * s_in / s_out).round(); // round() = half away from zero
    (raw as usize).max(1)
}

/// Resample a volume to `target_spacing`.
pub fn resample(vol: &Volume, target_spacing: [f64; 3], mode: Interp) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidSpacing(format!("{target_spacing:?}")));
    }
    let [nz, ny, nx] = vol.shape();
    let out_shape = [
        resampled_extent(nz, vol.spacing[0], target_spacing[0]),
        resampled_extent(ny, vol.spacing[1], target_spacing[1]),
        resampled_extent(nx, vol.spacing[2], target_spacing[2]),
    ];
    let scale = [
        target_spacing[0] / vol.spacing[0],
        target_spacing[1] / vol.spacing[1],
        target_spacing[2] / vol.spacing[2],
    ];
    let src = &vol.data;
    let mut out = Array3::<f32>::zeros((out_shape[0], out_shape[1], out_shape[2]));
    for z in 0..out_shape[0] {
        let uz = axis_coord(z, scale[0], nz);
        for y in 0..out_shape[1] {
            let uy = axis_coord(y, scale[1], ny);
            for x in 0..out_shape[2] {
                let ux = axis_coord(x, scale[2], nx);
                let v = match mode {
                    Interp::Nearest => src[[
                        nearest_index(uz, nz),
                        nearest_index(uy, ny),
                        nearest_index(ux, nx),
                    ]] as f64,
                    Interp::Linear => {
                        let (z0, z1, wz) = lerp_parts(uz, nz);
                        let (y0, y1, wy) = lerp_parts(uy, ny);
                        let (x0, x1, wx) = lerp_parts(ux, nx);
                        let mut acc = 0.0f64;
                        for (zi, zw) in [(z0, 1.0 - wz), (z1, wz)] {
                            if zw == 0.0 {
                                continue;
                            }
                            for (yi, yw) in [(y0, 1.0 - wy), (y1, wy)] {
                                if yw == 0.0 {
                                    continue;
                                }
                                for (xi, xw) in [(x0, 1.0 - wx), (x1, wx)] {
                                    if xw == 0.0 {
                                        continue;
                                    }
                                    acc += zw * yw * xw * src[[zi, yi, xi]] as f64;
                                }
                            }
                        }
                        acc
                    }
                };
                out[[z, y, x]] = v as f32;
            }
        }
    }
    Volume::new(out, target_spacing, vol.origin_id.clone())
}

/// Nearest-neighbour resample of a label mask.
pub fn resample_mask(mask: &LabelMask, target_spacing: [f64; 3]) -> Result<LabelMask> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidSpacing(format!("{target_spacing:?}")));
    }
    let [nz, ny, nx] = mask.shape();
    let out_shape = [
        resampled_extent(nz, mask.spacing[0], target_spacing[0]),
        resampled_extent(ny, mask.spacing[1], target_spacing[1]),
        resampled_extent(nx, mask.spacing[2], target_spacing[2]),
    ];
    let scale = [
        target_spacing[0] / mask.spacing[0],
        target_spacing[1] / mask.spacing[1],
        target_spacing[2] / mask.spacing[2],
    ];
    let mut out = Array3::<u8>::zeros((out_shape[0], out_shape[1], out_shape[2]));
    for z in 0..out_shape[0] {
        let zi = nearest_index(axis_coord(z, scale[0], nz), nz);
        for y in 0..out_shape[1] {
            let yi = nearest_index(axis_coord(y, scale[1], ny), ny);
            for x in 0..out_shape[2] {
                let xi = nearest_index(axis_coord(x, scale[2], nx), nx);
                out[[z, y, x]] = mask.data[[zi, yi, xi]];
            }
        }
    }
    LabelMask::new(out, target_spacing)
}

/// Split a volume into its axial planes, in z order.
pub fn slice_axial(vol: &Volume) -> Vec<Slice2D> {
    let [nz, ny, nx] = vol.shape();
    (0..nz)
        .map(|z| Slice2D {
            data: vol.data.index_axis(ndarray::Axis(0), z).to_owned(),
            z_index: z,
            parent_id: vol.origin_id.clone(),
            parent_shape: [nz, ny, nx],
            crop_box: CropBox {
                y0: 0,
                x0: 0,
                h: ny,
                w: nx,
            },
        })
        .collect()
}

fn resize2d(src: &Array2<f32>, out_hw: (usize, usize), mode: Interp) -> Array2<f32> {
    let (h_in, w_in) = src.dim();
    let (h_out, w_out) = out_hw;
    if (h_in, w_in) == (h_out, w_out) {
        return src.clone();
    }
    let mut out = Array2::<f32>::zeros((h_out, w_out));
    for y in 0..h_out {
        let uy = ((y as f64 + 0.5) * h_in as f64 / h_out as f64 - 0.5)
            .clamp(0.0, (h_in - 1) as f64);
        for x in 0..w_out {
            let ux = ((x as f64 + 0.5) * w_in as f64 / w_out as f64 - 0.5)
                .clamp(0.0, (w_in - 1) as f64);
            out[[y, x]] = match mode {
                Interp::Nearest => src[[nearest_index(uy, h_in), nearest_index(ux, w_in)]],
                Interp::Linear => {
                    let (y0, y1, wy) = lerp_parts(uy, h_in);
                    let (x0, x1, wx) = lerp_parts(ux, w_in);
                    let v = (1.0 - wy) * (1.0 - wx) * src[[y0, x0]] as f64
                        + (1.0 - wy) * wx * src[[y0, x1]] as f64
                        + wy * (1.0 - wx) * src[[y1, x0]] as f64
                        + wy * wx * src[[y1, x1]] as f64;
                    v as f32
                }
            };
        }
    }
    out
}

/// Centred crop to `crop_hw` followed by a resize to `out_hw`. Records the
/// crop rectangle so `merge_slices` can invert the operation. The input
/// slice must still be in parent coordinates (its data matching its
/// `crop_box`); re-cropping an already resized slice is not supported.
pub fn center_crop_resize(
    s: &Slice2D,
    crop_hw: (usize, usize),
    out_hw: (usize, usize),
    mode: Interp,
) -> Result<Slice2D> {
    let (h, w) = s.data.dim();
    let (ch, cw) = crop_hw;
    let (oh, ow) = out_hw;
    assert!(oh >= 1 && ow >= 1, "output size must be >= 1");
    if ch > h || cw > w {
        return Err(Error::CropTooLarge(format!(
            "crop {crop_hw:?} exceeds slice {:?}",
            (h, w)
        )));
    }
    if (h, w) != (s.crop_box.h, s.crop_box.w) {
        return Err(Error::ShapeMismatch(format!(
            "slice data {:?} does not match its crop box {:?}; was it already resized?",
            (h, w),
            (s.crop_box.h, s.crop_box.w)
        )));
    }
    let oy = (h - ch) / 2;
    let ox = (w - cw) / 2;
    let cropped = s
        .data
        .slice(ndarray::s![oy..oy + ch, ox..ox + cw])
        .to_owned();
    Ok(Slice2D {
        data: resize2d(&cropped, out_hw, mode),
        z_index: s.z_index,
        parent_id: s.parent_id.clone(),
        parent_shape: s.parent_shape,
        crop_box: CropBox {
            y0: s.crop_box.y0 + oy,
            x0: s.crop_box.x0 + ox,
            h: ch,
            w: cw,
        },
    })
}

/// Clip to the `[lo_pct, hi_pct]` percentiles and map affinely onto
/// `[-1, 1]`. Constant volumes map to all zeros. Percentiles use linear
/// interpolation on the sorted values (index `q/100 * (n-1)`).
pub fn normalize_intensity(vol: &Volume, lo_pct: f64, hi_pct: f64) -> Volume {
    assert!(
        (0.0..=100.0).contains(&lo_pct) && (0.0..=100.0).contains(&hi_pct) && lo_pct < hi_pct,
        "percentiles must satisfy 0 <= lo < hi <= 100"
    );
    let mut sorted: Vec<f64> = vol.data.iter().map(|&v| v as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |q: f64| -> f64 {
        let idx = q / 100.0 * (sorted.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let frac = idx - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    let p_lo = pct(lo_pct);
    let p_hi = pct(hi_pct);
    let data = if p_hi > p_lo {
        vol.data.mapv(|v| {
            let c = (v as f64).clamp(p_lo, p_hi);
            (2.0 * (c - p_lo) / (p_hi - p_lo) - 1.0) as f32
        })
    } else {
        Array3::zeros(vol.data.dim())
    };
    Volume {
        data,
        spacing: vol.spacing,
        origin_id: vol.origin_id.clone(),
    }
}

/// Rebuild a volume from slices, inverting `center_crop_resize`: each slice
/// is resized back to its crop box and pasted at the recorded offset, with
/// uncovered border voxels set to 0.
pub fn merge_slices(slices: &[Slice2D], target: &VolumeMeta) -> Result<Volume> {
    let [nz, ny, nx] = target.shape;
    let mut seen = vec![false; nz];
    let mut out = Array3::<f32>::zeros((nz, ny, nx));
    for s in slices {
        if s.parent_id != target.origin_id {
            return Err(Error::MixedParents(
                target.origin_id.clone(),
                s.parent_id.clone(),
            ));
        }
        if s.z_index >= nz {
            return Err(Error::ShapeMismatch(format!(
                "z_index {} outside target depth {nz}",
                s.z_index
            )));
        }
        if seen[s.z_index] {
            return Err(Error::DuplicateSlice(s.z_index));
        }
        seen[s.z_index] = true;
        let cb = s.crop_box;
        if cb.y0 + cb.h > ny || cb.x0 + cb.w > nx {
            return Err(Error::ShapeMismatch(format!(
                "crop box {cb:?} outside target plane {:?}",
                (ny, nx)
            )));
        }
        let restored = resize2d(&s.data, (cb.h, cb.w), Interp::Linear);
        let mut dst = out.slice_mut(ndarray::s![
            s.z_index,
            cb.y0..cb.y0 + cb.h,
            cb.x0..cb.x0 + cb.w
        ]);
        dst.assign(&restored);
    }
    if let Some(z) = seen.iter().position(|&s| !s) {
        return Err(Error::MissingSlice(z));
    }
    Volume::new(out, target.spacing, target.origin_id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use ndarray::{array, Array3};

    fn random_volume(seed: u64, shape: (usize, usize, usize)) -> Volume {
        let mut s = SeedStream::new(seed);
        let data = Array3::from_shape_simple_fn(shape, || s.uniform() as f32);
        Volume::new(data, [1.0, 1.0, 1.0], format!("rv-{seed}")).unwrap()
    }

    #[test]
    fn resample_identity_at_same_spacing() {
        let vol = random_volume(1, (3, 5, 4));
        let out = resample(&vol, [1.0, 1.0, 1.0], Interp::Linear).unwrap();
        assert_eq!(out.data, vol.data);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let data = Array3::from_elem((4, 6, 6), 0.7f32);
        let vol = Volume::new(data, [2.0, 1.0, 1.0], "c").unwrap();
        let out = resample(&vol, [0.9, 1.3, 0.4], Interp::Linear).unwrap();
        for &v in out.data.iter() {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    // Independent scalar oracle: 1D linear interpolation at u = i*t/s.
    fn interp1d_oracle(values: &[f64], u: f64) -> f64 {
        let u = u.clamp(0.0, (values.len() - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(values.len() - 1);
        let w = u - i0 as f64;
        values[i0] * (1.0 - w) + values[i1] * w
    }

    #[test]
    fn resample_ramp_matches_interpolation_oracle() {
        let ramp: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let data = Array3::from_shape_vec((1, 1, 8), ramp.clone()).unwrap();
        let vol = Volume::new(data, [1.0, 1.0, 1.0], "ramp").unwrap();
        let out = resample(&vol, [1.0, 1.0, 2.0], Interp::Linear).unwrap();
        assert_eq!(out.shape(), [1, 1, 4]);
        let vals: Vec<f64> = ramp.iter().map(|&v| v as f64).collect();
        for x in 0..4 {
            let expect = interp1d_oracle(&vals, x as f64 * 2.0);
            assert!(
                (out.data[[0, 0, x]] as f64 - expect).abs() < 1e-6,
                "x={x}: {} vs {expect}",
                out.data[[0, 0, x]]
            );
        }
        // Also a non-integer scale against the same oracle.
        let out = resample(&vol, [1.0, 1.0, 1.5], Interp::Linear).unwrap();
        assert_eq!(out.shape(), [1, 1, 5]);
        for x in 0..5 {
            let expect = interp1d_oracle(&vals, x as f64 * 1.5);
            assert!((out.data[[0, 0, x]] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_is_idempotent_at_fixed_spacing() {
        let vol = random_volume(7, (5, 7, 6));
        let vol = Volume::new(vol.data, [1.3, 0.8, 0.8], "r").unwrap();
        let once = resample(&vol, [1.0, 1.0, 1.0], Interp::Linear).unwrap();
        let twice = resample(&once, [1.0, 1.0, 1.0], Interp::Linear).unwrap();
        assert_eq!(once.data, twice.data);
    }

    #[test]
    fn resample_rejects_nonpositive_spacing() {
        let vol = random_volume(2, (2, 2, 2));
        assert!(matches!(
            resample(&vol, [1.0, -1.0, 1.0], Interp::Linear),
            Err(Error::InvalidSpacing(_))
        ));
    }

    #[test]
    fn mask_resample_preserves_label_set() {
        let mut s = SeedStream::new(4);
        let data = Array3::from_shape_simple_fn((6, 9, 9), || s.below(3) as u8);
        let mask = LabelMask::new(data, [1.5, 0.7, 0.7]).unwrap();
        let out = resample_mask(&mask, [1.0, 1.0, 1.0]).unwrap();
        for &v in out.data.iter() {
            assert!(v <= 2);
        }
        // Values come from the input, so no new labels can appear.
        let in_set: std::collections::BTreeSet<u8> = mask.data.iter().copied().collect();
        let out_set: std::collections::BTreeSet<u8> = out.data.iter().copied().collect();
        assert!(out_set.is_subset(&in_set));
    }

    #[test]
    fn slice_and_merge_roundtrip() {
        let vol = random_volume(5, (5, 6, 7));
        let slices = slice_axial(&vol);
        assert_eq!(slices.len(), 5);
        for (k, s) in slices.iter().enumerate() {
            assert_eq!(s.z_index, k);
            assert_eq!(s.parent_id, vol.origin_id);
            assert_eq!(s.data, vol.data.index_axis(ndarray::Axis(0), k).to_owned());
        }
        let back = merge_slices(&slices, &vol.meta()).unwrap();
        assert_eq!(back.data, vol.data);
    }

    #[test]
    fn merge_detects_missing_duplicate_and_mixed() {
        let vol = random_volume(6, (4, 4, 4));
        let slices = slice_axial(&vol);

        let partial: Vec<_> = slices.iter().filter(|s| s.z_index != 2).cloned().collect();
        assert!(matches!(
            merge_slices(&partial, &vol.meta()),
            Err(Error::MissingSlice(2))
        ));

        let mut dup = slices.clone();
        dup.push(slices[1].clone());
        assert!(matches!(
            merge_slices(&dup, &vol.meta()),
            Err(Error::DuplicateSlice(1))
        ));

        let mut mixed = slices.clone();
        mixed[0].parent_id = "someone-else".into();
        assert!(matches!(
            merge_slices(&mixed, &vol.meta()),
            Err(Error::MixedParents(_, _))
        ));
    }

    #[test]
    fn crop_resize_identity() {
        let vol = random_volume(8, (1, 6, 6));
        let s = &slice_axial(&vol)[0];
        let out = center_crop_resize(s, (6, 6), (6, 6), Interp::Linear).unwrap();
        assert_eq!(out.data, s.data);
        assert_eq!(out.crop_box, s.crop_box);
    }

    #[test]
    fn crop_extracts_centred_rows_and_cols() {
        let data = ndarray::Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f32);
        let vol = Volume::new(
            data.insert_axis(ndarray::Axis(0)),
            [1.0, 1.0, 1.0],
            "g",
        )
        .unwrap();
        let s = &slice_axial(&vol)[0];
        let out = center_crop_resize(s, (2, 2), (2, 2), Interp::Linear).unwrap();
        // Centering rule keeps rows/cols {1, 2}.
        assert_eq!(out.data, array![[5.0f32, 6.0], [9.0, 10.0]]);
        assert_eq!(
            out.crop_box,
            CropBox {
                y0: 1,
                x0: 1,
                h: 2,
                w: 2
            }
        );
    }

    // Independent per-pixel bilinear oracle with half-pixel centers.
    fn bilinear_oracle(src: &Array2<f32>, y: usize, x: usize, out_hw: (usize, usize)) -> f64 {
        let (h_in, w_in) = src.dim();
        let uy = ((y as f64 + 0.5) * h_in as f64 / out_hw.0 as f64 - 0.5)
            .clamp(0.0, (h_in - 1) as f64);
        let ux = ((x as f64 + 0.5) * w_in as f64 / out_hw.1 as f64 - 0.5)
            .clamp(0.0, (w_in - 1) as f64);
        let y0 = uy.floor() as usize;
        let x0 = ux.floor() as usize;
        let y1 = (y0 + 1).min(h_in - 1);
        let x1 = (x0 + 1).min(w_in - 1);
        let wy = uy - y0 as f64;
        let wx = ux - x0 as f64;
        (1.0 - wy) * (1.0 - wx) * src[[y0, x0]] as f64
            + (1.0 - wy) * wx * src[[y0, x1]] as f64
            + wy * (1.0 - wx) * src[[y1, x0]] as f64
            + wy * wx * src[[y1, x1]] as f64
    }

    #[test]
    fn checkerboard_upsample_matches_bilinear_oracle() {
        let checker = array![[0.0f32, 1.0], [1.0, 0.0]];
        let vol = Volume::new(
            checker.clone().insert_axis(ndarray::Axis(0)),
            [1.0, 1.0, 1.0],
            "cb",
        )
        .unwrap();
        let s = &slice_axial(&vol)[0];
        let out = center_crop_resize(s, (2, 2), (4, 4), Interp::Linear).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = bilinear_oracle(&checker, y, x, (4, 4));
                assert!(
                    (out.data[[y, x]] as f64 - expect).abs() < 1e-6,
                    "({y},{x}): {} vs {expect}",
                    out.data[[y, x]]
                );
            }
        }
    }

    #[test]
    fn crop_too_large_is_rejected() {
        let vol = random_volume(9, (1, 4, 4));
        let s = &slice_axial(&vol)[0];
        assert!(matches!(
            center_crop_resize(s, (5, 4), (4, 4), Interp::Linear),
            Err(Error::CropTooLarge(_))
        ));
    }

    #[test]
    fn merge_inverts_identity_crop_resize_bit_exactly() {
        let vol = random_volume(10, (3, 8, 8));
        let slices: Vec<_> = slice_axial(&vol)
            .iter()
            .map(|s| center_crop_resize(s, (8, 8), (8, 8), Interp::Linear).unwrap())
            .collect();
        let back = merge_slices(&slices, &vol.meta()).unwrap();
        assert_eq!(back.data, vol.data);
    }

    #[test]
    fn merge_pastes_crop_with_zero_border() {
        let vol = random_volume(11, (2, 6, 6));
        let slices: Vec<_> = slice_axial(&vol)
            .iter()
            .map(|s| center_crop_resize(s, (4, 4), (4, 4), Interp::Linear).unwrap())
            .collect();
        let back = merge_slices(&slices, &vol.meta()).unwrap();
        for z in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    let inside = (1..5).contains(&y) && (1..5).contains(&x);
                    if inside {
                        assert_eq!(back.data[[z, y, x]], vol.data[[z, y, x]]);
                    } else {
                        assert_eq!(back.data[[z, y, x]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn normalize_constant_maps_to_zero() {
        let vol = Volume::new(Array3::from_elem((2, 3, 3), 5.0f32), [1.0; 3], "c").unwrap();
        let out = normalize_intensity(&vol, 0.5, 99.5);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let values: Vec<f32> = (0..=100).map(|v| v as f32).collect();
        let data = Array3::from_shape_vec((1, 1, 101), values).unwrap();
        let vol = Volume::new(data, [1.0; 3], "r").unwrap();

        let full = normalize_intensity(&vol, 0.0, 100.0);
        assert!((full.data[[0, 0, 0]] - -1.0).abs() < 1e-6);
        assert!((full.data[[0, 0, 100]] - 1.0).abs() < 1e-6);

        // lo=10, hi=90: value 10 -> -1, 90 -> +1, 50 -> 0, tails clipped.
        let clipped = normalize_intensity(&vol, 10.0, 90.0);
        assert!((clipped.data[[0, 0, 10]] - -1.0).abs() < 1e-6);
        assert!((clipped.data[[0, 0, 90]] - 1.0).abs() < 1e-6);
        assert!(clipped.data[[0, 0, 50]].abs() < 1e-6);
        assert!((clipped.data[[0, 0, 0]] - -1.0).abs() < 1e-6);
        assert!((clipped.data[[0, 0, 100]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_is_monotone_and_bounded() {
        let vol = random_volume(12, (3, 5, 5));
        let out = normalize_intensity(&vol, 5.0, 95.0);
        assert!(out.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let mut pairs: Vec<(f32, f32)> = vol.data.iter().zip(out.data.iter()).map(|(&a, &b)| (a, b)).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }
}
