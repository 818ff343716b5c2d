//! Synthetic two-domain phantom volumes with ground-truth masks.
//!
//! Each case is one lobed ellipsoid ("VS", label 1) plus two small
//! spiral-textured spheres placed bilaterally ("cochleas", label 2). The two
//! domains share the exact same geometry and differ only in appearance:
//! domain S has a bright VS on a smooth background, domain T a dark VS on a
//! high-frequency texture with a mild multiplicative bias field. Training
//! uses the domains unpaired; evaluation exploits the hidden pairing.
//!
//! Everything is a pure function of `(seed, case_index)`.

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::volume::{save_mask, save_volume, LabelMask, Volume};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhantomParams {
    /// Voxel grid `(z, y, x)`.
    pub volume_shape: [usize; 3],
    /// Voxel size in mm `(z, y, x)`.
    pub spacing: [f64; 3],
    /// VS radius range in mm.
    pub vs_radius_range: (f64, f64),
    /// Cochlea radius range in mm.
    pub cochlea_radius_range: (f64, f64),
    /// VS intensity per domain `(S, T)`: bright in S, dark in T.
    pub vs_intensity: (f64, f64),
    pub texture_noise_sd: f64,
    pub bias_field_strength: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            volume_shape: [16, 48, 48],
            spacing: [1.5, 1.0, 1.0],
            vs_radius_range: (4.0, 6.5),
            cochlea_radius_range: (2.2, 3.2),
            vs_intensity: (0.65, -0.55),
            texture_noise_sd: 0.10,
            bias_field_strength: 0.15,
            seed: 0,
        }
    }
}

// Placement windows as fractions of the physical extent. The worst-case
// feasibility check in `validate_feasible` is written against these.
const VS_Z: (f64, f64) = (0.42, 0.58);
const VS_Y: (f64, f64) = (0.38, 0.52);
const VS_X: (f64, f64) = (0.45, 0.55);
const COCH_Z: (f64, f64) = (0.45, 0.55);
const COCH_Y: (f64, f64) = (0.68, 0.76);
const COCH_X_LEFT: f64 = 0.18;
const COCH_X_RIGHT: f64 = 0.82;
const COCH_X_JITTER: f64 = 0.02;
/// VS ellipsoid is flattened along z by this factor.
const VS_Z_SCALE: f64 = 0.55;
/// Per-axis semi-axis jitter range.
const AXIS_JITTER: (f64, f64) = (0.85, 1.15);
/// Amplitude of the lobed boundary perturbation.
const LOBE_AMP: f64 = 0.12;
/// Clearance between structures, mm.
const MARGIN_MM: f64 = 2.0;

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |r: (f64, f64)| r.0 > 0.0 && r.1 >= r.0;
        if !ok_range(self.vs_radius_range) || !ok_range(self.cochlea_radius_range) {
            return Err(Error::ConfigInvalid(format!(
                "radius ranges must be positive and ordered: vs {:?}, cochlea {:?}",
                self.vs_radius_range, self.cochlea_radius_range
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidSpacing(format!("{:?}", self.spacing)));
        }
        self.validate_feasible()
    }

    /// Worst-case placement must fit and keep structures separated, so that
    /// feasibility never depends on the random draw.
    fn validate_feasible(&self) -> Result<()> {
        let ext = [
            self.volume_shape[0] as f64 * self.spacing[0],
            self.volume_shape[1] as f64 * self.spacing[1],
            self.volume_shape[2] as f64 * self.spacing[2],
        ];
        let bump = 1.0 + LOBE_AMP;
        let r_vs = self.vs_radius_range.1 * AXIS_JITTER.1 * bump;
        let rz_vs = r_vs * VS_Z_SCALE;
        let r_c = self.cochlea_radius_range.1;

        let fits = |lo_frac: f64, hi_frac: f64, extent: f64, radius: f64| {
            lo_frac * extent - radius >= 0.0 && (1.0 - hi_frac) * extent - radius >= 0.0
        };
        let mut ok = fits(VS_Z.0, VS_Z.1, ext[0], rz_vs)
            && fits(VS_Y.0, VS_Y.1, ext[1], r_vs)
            && fits(VS_X.0, VS_X.1, ext[2], r_vs)
            && fits(COCH_Z.0, COCH_Z.1, ext[0], r_c)
            && fits(COCH_Y.0, COCH_Y.1, ext[1], r_c)
            && (COCH_X_LEFT - COCH_X_JITTER) * ext[2] - r_c >= 0.0;

        // VS-to-cochlea separation at the closest admissible placements.
        let dx = (VS_X.0 - (COCH_X_LEFT + COCH_X_JITTER)) * ext[2];
        let dy = (COCH_Y.0 - VS_Y.1) * ext[1];
        let sep = (dx * dx + dy * dy).sqrt();
        ok &= sep >= r_vs + r_c + MARGIN_MM;
        // Cochlea-to-cochlea separation.
        let cc = (COCH_X_RIGHT - COCH_X_LEFT - 2.0 * COCH_X_JITTER) * ext[2];
        ok &= cc >= 2.0 * r_c + MARGIN_MM;

        if ok {
            Ok(())
        } else {
            Err(Error::ShapeTooSmall(format!(
                "{:?} at spacing {:?} cannot hold VS radius {} / cochlea radius {}",
                self.volume_shape, self.spacing, self.vs_radius_range.1, self.cochlea_radius_range.1
            )))
        }
    }
}

struct Geometry {
    vs_center: [f64; 3],
    vs_semi: [f64; 3],
    lobe_phase_az: f64,
    lobe_phase_pol: f64,
    coch_centers: [[f64; 3]; 2],
    coch_radii: [f64; 2],
}

fn draw_geometry(p: &PhantomParams, case_index: u64) -> Geometry {
    let mut g = SeedStream::derived(p.seed, &format!("case{case_index}/geom"));
    let ext = [
        p.volume_shape[0] as f64 * p.spacing[0],
        p.volume_shape[1] as f64 * p.spacing[1],
        p.volume_shape[2] as f64 * p.spacing[2],
    ];
    let vs_center = [
        g.uniform_in(VS_Z.0, VS_Z.1) * ext[0],
        g.uniform_in(VS_Y.0, VS_Y.1) * ext[1],
        g.uniform_in(VS_X.0, VS_X.1) * ext[2],
    ];
    let r = g.uniform_in(p.vs_radius_range.0, p.vs_radius_range.1);
    let vs_semi = [
        r * VS_Z_SCALE * g.uniform_in(AXIS_JITTER.0, AXIS_JITTER.1),
        r * g.uniform_in(AXIS_JITTER.0, AXIS_JITTER.1),
        r * g.uniform_in(AXIS_JITTER.0, AXIS_JITTER.1),
    ];
    let lobe_phase_az = g.uniform_in(0.0, std::f64::consts::TAU);
    let lobe_phase_pol = g.uniform_in(0.0, std::f64::consts::TAU);
    let mut coch_centers = [[0.0; 3]; 2];
    let mut coch_radii = [0.0; 2];
    for (i, x_frac) in [COCH_X_LEFT, COCH_X_RIGHT].iter().enumerate() {
        coch_centers[i] = [
            g.uniform_in(COCH_Z.0, COCH_Z.1) * ext[0],
            g.uniform_in(COCH_Y.0, COCH_Y.1) * ext[1],
            (x_frac + g.uniform_in(-COCH_X_JITTER, COCH_X_JITTER)) * ext[2],
        ];
        coch_radii[i] = g.uniform_in(p.cochlea_radius_range.0, p.cochlea_radius_range.1);
    }
    Geometry {
        vs_center,
        vs_semi,
        lobe_phase_az,
        lobe_phase_pol,
        coch_centers,
        coch_radii,
    }
}

fn build_mask(p: &PhantomParams, geo: &Geometry) -> Array3<u8> {
    let [nz, ny, nx] = p.volume_shape;
    let mut mask = Array3::<u8>::zeros((nz, ny, nx));
    for z in 0..nz {
        let pz = (z as f64 + 0.5) * p.spacing[0];
        for y in 0..ny {
            let py = (y as f64 + 0.5) * p.spacing[1];
            for x in 0..nx {
                let px = (x as f64 + 0.5) * p.spacing[2];
                let dz = (pz - geo.vs_center[0]) / geo.vs_semi[0];
                let dy = (py - geo.vs_center[1]) / geo.vs_semi[1];
                let dx = (px - geo.vs_center[2]) / geo.vs_semi[2];
                let rho = (dz * dz + dy * dy + dx * dx).sqrt();
                if rho <= 1.0 + LOBE_AMP {
                    let az = dy.atan2(dx);
                    let pol = (dz / rho.max(1e-12)).clamp(-1.0, 1.0).acos();
                    let bump = LOBE_AMP
                        * (3.0 * az + geo.lobe_phase_az).sin()
                        * (2.0 * pol + geo.lobe_phase_pol).cos();
                    if rho <= 1.0 + bump {
                        mask[[z, y, x]] = 1;
                        continue;
                    }
                }
                for i in 0..2 {
                    let c = geo.coch_centers[i];
                    let d2 = (pz - c[0]).powi(2) + (py - c[1]).powi(2) + (px - c[2]).powi(2);
                    if d2 <= geo.coch_radii[i] * geo.coch_radii[i] {
                        mask[[z, y, x]] = 2;
                        break;
                    }
                }
            }
        }
    }
    mask
}

/// Spiral intensity modulation inside a cochlea sphere.
fn spiral(pz: f64, py: f64, px: f64, c: [f64; 3], r: f64) -> f64 {
    let dy = py - c[1];
    let dx = px - c[2];
    let _ = pz;
    let ang = dy.atan2(dx);
    let rad = (dy * dy + dx * dx).sqrt() / r;
    0.15 * (4.0 * ang + std::f64::consts::TAU * 1.5 * rad).sin()
}

fn render_domain(
    p: &PhantomParams,
    geo: &Geometry,
    mask: &Array3<u8>,
    case_index: u64,
    domain_s: bool,
) -> Array3<f32> {
    let tag = if domain_s { "s" } else { "t" };
    let mut rng = SeedStream::derived(p.seed, &format!("case{case_index}/app-{tag}"));
    let [nz, ny, nx] = p.volume_shape;

    // Slow background modulation (both domains) and bias field phases (T).
    let ph1 = rng.uniform_in(0.0, std::f64::consts::TAU);
    let ph2 = rng.uniform_in(0.0, std::f64::consts::TAU);
    let bias_ph: [f64; 3] =
        std::array::from_fn(|_| rng.uniform_in(0.0, std::f64::consts::TAU));

    let (bg_level, vs_level) = if domain_s {
        (-0.25, p.vs_intensity.0)
    } else {
        (-0.05, p.vs_intensity.1)
    };
    let coch_level = if domain_s { 0.35 } else { 0.45 };
    let noise_sd = if domain_s {
        0.25 * p.texture_noise_sd
    } else {
        p.texture_noise_sd
    };

    let mut out = Array3::<f32>::zeros((nz, ny, nx));
    for z in 0..nz {
        let pz = (z as f64 + 0.5) * p.spacing[0];
        for y in 0..ny {
            let py = (y as f64 + 0.5) * p.spacing[1];
            for x in 0..nx {
                let px = (x as f64 + 0.5) * p.spacing[2];
                let mut v = match mask[[z, y, x]] {
                    1 => vs_level,
                    2 => {
                        let i = if px < p.volume_shape[2] as f64 * p.spacing[2] * 0.5 {
                            0
                        } else {
                            1
                        };
                        coch_level + spiral(pz, py, px, geo.coch_centers[i], geo.coch_radii[i])
                    }
                    _ => {
                        bg_level
                            + 0.10
                                * (std::f64::consts::TAU * y as f64 / ny as f64 + ph1).sin()
                                * (std::f64::consts::TAU * x as f64 / nx as f64 + ph2).sin()
                    }
                };
                v += rng.normal_scaled(0.0, noise_sd);
                if !domain_s && p.bias_field_strength > 0.0 {
                    let b = (std::f64::consts::TAU * z as f64 / nz as f64 + bias_ph[0]).sin()
                        * (std::f64::consts::TAU * y as f64 / ny as f64 + bias_ph[1]).sin()
                        * (std::f64::consts::TAU * x as f64 / nx as f64 + bias_ph[2]).sin();
                    let u = (v + 1.0) * 0.5 * (1.0 + p.bias_field_strength * b);
                    v = 2.0 * u - 1.0;
                }
                out[[z, y, x]] = v.clamp(-1.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Generate one case: S-domain volume, T-domain volume, and the shared mask.
pub fn generate_case(
    params: &PhantomParams,
    case_index: u64,
) -> Result<(Volume, Volume, LabelMask)> {
    params.validate()?;
    let geo = draw_geometry(params, case_index);
    let mask_arr = build_mask(params, &geo);
    let s = render_domain(params, &geo, &mask_arr, case_index, true);
    let t = render_domain(params, &geo, &mask_arr, case_index, false);
    let id = format!("case-{case_index:04}");
    Ok((
        Volume::new(s, params.spacing, format!("{id}-s"))?,
        Volume::new(t, params.spacing, format!("{id}-t"))?,
        LabelMask::new(mask_arr, params.spacing)?,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub case_index: u64,
    pub role: String,
    pub volume_s: Option<String>,
    pub volume_t: Option<String>,
    pub mask: Option<String>,
    pub has_mask: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::IoFailure(format!("{}: {e}", path.as_ref().display())))?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::IoFailure(e.to_string()))?;
        std::fs::write(path.as_ref(), text)
            .map_err(|e| Error::IoFailure(format!("{}: {e}", path.as_ref().display())))?;
        Ok(())
    }

    pub fn entries_with_role<'a>(
        &'a self,
        role: &'a str,
    ) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.role == role)
    }
}

/// Write a dataset: `n_train_s` labeled S cases, `n_train_t` unlabeled T
/// cases (disjoint indices, i.e. unpaired), and `n_val` cases keeping both
/// domains plus the mask. Returns the manifest, which is also written to
/// `out_dir/manifest.json`.
pub fn generate_dataset(
    params: &PhantomParams,
    n_train_s: usize,
    n_train_t: usize,
    n_val: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    params.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", out_dir.display())))?;
    let mut entries = Vec::new();
    let mut next_index = 0u64;
    for role_i in 0..3 {
        let (role, count) = match role_i {
            0 => ("train_s", n_train_s),
            1 => ("train_t", n_train_t),
            _ => ("val", n_val),
        };
        for _ in 0..count {
            let idx = next_index;
            next_index += 1;
            let (vol_s, vol_t, mask) = generate_case(params, idx)?;
            let case_id = format!("case-{idx:04}");
            let mut entry = ManifestEntry {
                case_id: case_id.clone(),
                case_index: idx,
                role: role.to_string(),
                volume_s: None,
                volume_t: None,
                mask: None,
                has_mask: false,
            };
            if role == "train_s" || role == "val" {
                let name = format!("{case_id}_s.vvol");
                save_volume(&vol_s, out_dir.join(&name))?;
                entry.volume_s = Some(name);
                let name = format!("{case_id}_mask.vvol");
                save_mask(&mask, out_dir.join(&name))?;
                entry.mask = Some(name);
                entry.has_mask = true;
            }
            if role == "train_t" || role == "val" {
                let name = format!("{case_id}_t.vvol");
                save_volume(&vol_t, out_dir.join(&name))?;
                entry.volume_t = Some(name);
            }
            entries.push(entry);
        }
    }
    let manifest = DatasetManifest {
        format_version: 1,
        entries,
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn test_params(seed: u64) -> PhantomParams {
        PhantomParams {
            seed,
            ..Default::default()
        }
    }

    /// 6-connected component count for a given label.
    fn component_count(mask: &Array3<u8>, label: u8) -> usize {
        let (nz, ny, nx) = mask.dim();
        let mut seen = Array3::<bool>::from_elem((nz, ny, nx), false);
        let mut count = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if mask[[z, y, x]] != label || seen[[z, y, x]] {
                        continue;
                    }
                    count += 1;
                    let mut queue = VecDeque::new();
                    queue.push_back((z, y, x));
                    seen[[z, y, x]] = true;
                    while let Some((cz, cy, cx)) = queue.pop_front() {
                        let neighbors = [
                            (cz.wrapping_sub(1), cy, cx),
                            (cz + 1, cy, cx),
                            (cz, cy.wrapping_sub(1), cx),
                            (cz, cy + 1, cx),
                            (cz, cy, cx.wrapping_sub(1)),
                            (cz, cy, cx + 1),
                        ];
                        for (az, ay, ax) in neighbors {
                            if az < nz
                                && ay < ny
                                && ax < nx
                                && mask[[az, ay, ax]] == label
                                && !seen[[az, ay, ax]]
                            {
                                seen[[az, ay, ax]] = true;
                                queue.push_back((az, ay, ax));
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn same_seed_and_index_is_bit_identical() {
        let p = test_params(11);
        let (s1, t1, m1) = generate_case(&p, 3).unwrap();
        let (s2, t2, m2) = generate_case(&p, 3).unwrap();
        assert_eq!(s1.data, s2.data);
        assert_eq!(t1.data, t2.data);
        assert_eq!(m1.data, m2.data);
    }

    #[test]
    fn component_counts_over_20_cases() {
        let p = test_params(7);
        for idx in 0..20 {
            let (_, _, mask) = generate_case(&p, idx).unwrap();
            assert_eq!(component_count(&mask.data, 1), 1, "case {idx}: VS components");
            assert_eq!(
                component_count(&mask.data, 2),
                2,
                "case {idx}: cochlea components"
            );
        }
    }

    #[test]
    fn intensity_contrast_over_20_cases() {
        let p = test_params(5);
        for idx in 0..20 {
            let (s, t, mask) = generate_case(&p, idx).unwrap();
            let mut vs_s = (0.0, 0usize);
            let mut bg_s = (0.0, 0usize);
            let mut vs_t = (0.0, 0usize);
            let mut bg_t = (0.0, 0usize);
            for ((m, &sv), &tv) in mask.data.iter().zip(s.data.iter()).zip(t.data.iter()) {
                match m {
                    1 => {
                        vs_s = (vs_s.0 + sv as f64, vs_s.1 + 1);
                        vs_t = (vs_t.0 + tv as f64, vs_t.1 + 1);
                    }
                    0 => {
                        bg_s = (bg_s.0 + sv as f64, bg_s.1 + 1);
                        bg_t = (bg_t.0 + tv as f64, bg_t.1 + 1);
                    }
                    _ => {}
                }
            }
            assert!(vs_s.1 > 0 && bg_s.1 > 0);
            assert!(
                vs_s.0 / (vs_s.1 as f64) > bg_s.0 / (bg_s.1 as f64),
                "case {idx}: S-domain VS should be brighter than background"
            );
            assert!(
                vs_t.0 / (vs_t.1 as f64) < bg_t.0 / (bg_t.1 as f64),
                "case {idx}: T-domain VS should be darker than background"
            );
        }
    }

    #[test]
    fn values_bounded_and_volumes_valid() {
        let p = test_params(3);
        let (s, t, _) = generate_case(&p, 0).unwrap();
        for v in s.data.iter().chain(t.data.iter()) {
            assert!((-1.0..=1.0).contains(v));
        }
    }

    #[test]
    fn shape_too_small_is_detected() {
        let p = PhantomParams {
            volume_shape: [4, 12, 12],
            ..test_params(0)
        };
        assert!(matches!(
            generate_case(&p, 0),
            Err(Error::ShapeTooSmall(_))
        ));
    }

    #[test]
    fn dataset_roles_counts_and_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let p = test_params(9);
        let m = generate_dataset(&p, 2, 3, 1, dir.path()).unwrap();
        assert_eq!(m.entries_with_role("train_s").count(), 2);
        assert_eq!(m.entries_with_role("train_t").count(), 3);
        assert_eq!(m.entries_with_role("val").count(), 1);
        for e in m.entries_with_role("train_s") {
            assert!(e.volume_s.is_some() && e.mask.is_some() && e.has_mask);
            assert!(e.volume_t.is_none());
        }
        for e in m.entries_with_role("train_t") {
            assert!(e.volume_t.is_some() && !e.has_mask);
        }
        for e in m.entries_with_role("val") {
            assert!(e.volume_s.is_some() && e.volume_t.is_some() && e.has_mask);
        }
        let s_set: std::collections::BTreeSet<u64> = m
            .entries_with_role("train_s")
            .map(|e| e.case_index)
            .collect();
        let t_set: std::collections::BTreeSet<u64> = m
            .entries_with_role("train_t")
            .map(|e| e.case_index)
            .collect();
        assert!(s_set.is_disjoint(&t_set));
        // All referenced files exist and load.
        for e in &m.entries {
            for name in [&e.volume_s, &e.volume_t].into_iter().flatten() {
                crate::volume::load_volume(dir.path().join(name)).unwrap();
            }
            if let Some(name) = &e.mask {
                crate::volume::load_mask(dir.path().join(name)).unwrap();
            }
        }
    }

    #[test]
    fn manifest_bytes_are_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p = test_params(13);
        generate_dataset(&p, 1, 1, 1, d1.path()).unwrap();
        generate_dataset(&p, 1, 1, 1, d2.path()).unwrap();
        let b1 = std::fs::read(d1.path().join("manifest.json")).unwrap();
        let b2 = std::fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(b1, b2);
    }
}
