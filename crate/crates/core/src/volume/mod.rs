//! 3D volumes, label masks, axial slices, and the preprocessing operations
//! that take scans from native spacing to translator-ready 2D images and back.

mod nifti;
mod ops;
mod vvol;

pub use nifti::{import_nifti, NiftiImportInfo};
pub use ops::{
    center_crop_resize, merge_slices, normalize_intensity, resample, resample_mask, slice_axial,
    Interp,
};
pub use vvol::{load_mask, load_volume, save_mask, save_volume};

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

/// A 3D scalar image with voxel spacing, indexed `(z, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Voxel size in mm, `(z, y, x)`.
    pub spacing: [f64; 3],
    /// Stable identifier linking derived artifacts back to the source scan.
    pub origin_id: String,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], origin_id: impl Into<String>) -> Result<Self> {
        let v = Volume {
            data,
            spacing,
            origin_id: origin_id.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.data.dim();
        if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
            return Err(Error::ShapeTooSmall(format!("volume shape {:?}", dim)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpacing(format!("{:?}", self.spacing)));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteData(format!(
                "volume {:?} contains non-finite values",
                self.origin_id
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        let (z, y, x) = self.data.dim();
        [z, y, x]
    }

    /// Shape/spacing/id triple used as the merge target.
    pub fn meta(&self) -> VolumeMeta {
        VolumeMeta {
            shape: self.shape(),
            spacing: self.spacing,
            origin_id: self.origin_id.clone(),
        }
    }
}

/// Metadata needed to rebuild a volume from its slices.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMeta {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin_id: String,
}

/// A 3D integer mask; 0 = background, 1 = VS, 2 = cochlea.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub data: Array3<u8>,
    pub spacing: [f64; 3],
}

impl LabelMask {
    pub fn new(data: Array3<u8>, spacing: [f64; 3]) -> Result<Self> {
        let m = LabelMask { data, spacing };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.data.dim();
        if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
            return Err(Error::ShapeTooSmall(format!("mask shape {:?}", dim)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpacing(format!("{:?}", self.spacing)));
        }
        if let Some(v) = self.data.iter().find(|&&v| v > 2) {
            return Err(Error::NonFiniteData(format!("mask label {v} outside {{0,1,2}}")));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        let (z, y, x) = self.data.dim();
        [z, y, x]
    }
}

/// Crop rectangle within a parent slice: `(y0, x0)` offset plus size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

/// One axial plane of a volume, with enough metadata to merge back exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub data: Array2<f32>,
    pub z_index: usize,
    pub parent_id: String,
    pub parent_shape: [usize; 3],
    /// Region of the parent slice this data represents. Equal to the full
    /// plane for slices fresh out of `slice_axial`.
    pub crop_box: CropBox,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn volume_rejects_nan() {
        let mut data = Array3::<f32>::zeros((2, 2, 2));
        data[[0, 0, 0]] = f32::NAN;
        assert!(matches!(
            Volume::new(data, [1.0, 1.0, 1.0], "v"),
            Err(Error::NonFiniteData(_))
        ));
    }

    #[test]
    fn volume_rejects_nonpositive_spacing() {
        let data = Array3::<f32>::zeros((2, 2, 2));
        assert!(matches!(
            Volume::new(data, [1.0, 0.0, 1.0], "v"),
            Err(Error::InvalidSpacing(_))
        ));
    }

    #[test]
    fn mask_rejects_label_outside_range() {
        let mut data = Array3::<u8>::zeros((2, 2, 2));
        data[[1, 1, 1]] = 3;
        assert!(LabelMask::new(data, [1.0, 1.0, 1.0]).is_err());
    }
}
