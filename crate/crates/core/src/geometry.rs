//! Circular-orbit cone-beam geometry and the point-to-detector projection.
//!
//! World frame: origin at the volume corner, axes along the volume's
//! `(H, W, D)` index axes, millimetres. The source orbits the world `z` axis
//! through the isocenter (the volume center).
//!
//! Scanner frame of view `i`: origin at the isocenter, world rotated by
//! `-angle_i` about `z`, source at `(0, -dso, 0)`, flat detector in the plane
//! `y = dsd - dso`, detector `u` along `x` and `v` along `z`.
//!
//! Detector pixel `(col, row)` has its center at continuous `(col, row)`, so
//! the detector center sits at `((cols - 1) / 2, (rows - 1) / 2)`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

/// Minimum homogeneous depth (mm) for a point to count as in front of the source.
pub const MIN_DEPTH_MM: f64 = 1e-6;

pub type Mat4 = [[f64; 4]; 4];
pub type Mat34 = [[f64; 4]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScannerGeometry {
    /// Source to isocenter distance (mm).
    pub dso: f64,
    /// Source to detector distance (mm).
    pub dsd: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    /// Detector pixel pitch along `u` / columns (mm).
    pub det_spacing_u: f64,
    /// Detector pixel pitch along `v` / rows (mm).
    pub det_spacing_v: f64,
    /// View angles in radians, strictly increasing.
    pub angles: Vec<f64>,
    pub volume_shape: [usize; 3],
    pub voxel_spacing: [f64; 3],
}

/// Projection angles `i * pi / k` for `i = 0..k` (half rotation, endpoint excluded).
pub fn uniform_angles(k: usize) -> Result<Vec<f64>> {
    uniform_angles_over(k, std::f64::consts::PI)
}

pub fn uniform_angles_over(k: usize, range_rad: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(invalid("number of views must be at least 1"));
    }
    if !(range_rad > 0.0 && range_rad.is_finite()) {
        return Err(invalid(format!("angle range must be positive, got {range_rad}")));
    }
    Ok((0..k).map(|i| i as f64 * range_rad / k as f64).collect())
}

impl ScannerGeometry {
    /// Desk-scale default: 64^3 volume at 3.2 mm, 64x64 detector at 6.4 mm.
    pub fn desk(n_views: usize) -> Result<Self> {
        Self::new(1000.0, 1500.0, [64, 64], [6.4, 6.4], uniform_angles(n_views)?, [64; 3], [3.2; 3])
    }

    /// Full-scale default: 256^3 volume at 0.8 mm, 256x256 detector at 1.6 mm.
    pub fn full(n_views: usize) -> Result<Self> {
        Self::new(1000.0, 1500.0, [256, 256], [1.6, 1.6], uniform_angles(n_views)?, [256; 3], [0.8; 3])
    }

    /// `detector` is `[rows, cols]`, `spacing` is `[u, v]` (mm).
    pub fn new(
        dso: f64,
        dsd: f64,
        detector: [usize; 2],
        spacing: [f64; 2],
        angles: Vec<f64>,
        volume_shape: [usize; 3],
        voxel_spacing: [f64; 3],
    ) -> Result<Self> {
        let g = Self {
            dso,
            dsd,
            det_rows: detector[0],
            det_cols: detector[1],
            det_spacing_u: spacing[0],
            det_spacing_v: spacing[1],
            angles,
            volume_shape,
            voxel_spacing,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dso > 0.0 && self.dso < self.dsd && self.dsd.is_finite()) {
            return Err(invalid(format!(
                "need 0 < dso < dsd, got dso = {}, dsd = {}",
                self.dso, self.dsd
            )));
        }
        if self.det_rows == 0 || self.det_cols == 0 {
            return Err(invalid("detector pixel counts must be positive"));
        }
        if !(self.det_spacing_u > 0.0 && self.det_spacing_v > 0.0) {
            return Err(invalid("detector spacing must be positive"));
        }
        if self.angles.is_empty() {
            return Err(invalid("geometry has no views"));
        }
        if self.angles.iter().any(|a| !a.is_finite()) || self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("angles must be finite and strictly increasing"));
        }
        if self.volume_shape.contains(&0) {
            return Err(invalid("volume shape must be positive"));
        }
        if self.voxel_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid("voxel spacing must be positive"));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    /// `(s_h * H, s_w * W, s_d * D)` in mm.
    pub fn volume_extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.volume_shape[a] as f64 * self.voxel_spacing[a])
    }

    pub fn isocenter(&self) -> [f64; 3] {
        self.volume_extent().map(|e| e / 2.0)
    }

    pub fn magnification(&self) -> f64 {
        self.dsd / self.dso
    }

    /// Same scanner with a different angle set.
    pub fn with_angles(&self, angles: Vec<f64>) -> Result<Self> {
        let g = Self { angles, ..self.clone() };
        g.validate()?;
        Ok(g)
    }

    pub fn with_views(&self, k: usize) -> Result<Self> {
        self.with_angles(uniform_angles(k)?)
    }

    /// Same scanner reconstructing onto a different volume lattice.
    pub fn with_volume(&self, shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let g = Self {
            volume_shape: shape,
            voxel_spacing: spacing,
            ..self.clone()
        };
        g.validate()?;
        Ok(g)
    }

    /// Stable hash of every field; identifies the acquisition a stack came from.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for v in [self.dso, self.dsd, self.det_spacing_u, self.det_spacing_v] {
            h.update(v.to_le_bytes());
        }
        for v in [self.det_rows, self.det_cols] {
            h.update((v as u64).to_le_bytes());
        }
        h.update((self.angles.len() as u64).to_le_bytes());
        for a in &self.angles {
            h.update(a.to_le_bytes());
        }
        for a in 0..3 {
            h.update((self.volume_shape[a] as u64).to_le_bytes());
            h.update(self.voxel_spacing[a].to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn check_view(&self, view: usize) -> Result<()> {
        if view >= self.angles.len() {
            return Err(Error::ViewOutOfRange {
                index: view,
                count: self.angles.len(),
            });
        }
        Ok(())
    }

    /// World-to-scanner rigid transform `Rot_z(-angle) * Translate(-isocenter)`.
    pub fn rotation_matrix(&self, view: usize) -> Result<Mat4> {
        self.check_view(view)?;
        let (s, c) = self.angles[view].sin_cos();
        let iso = self.isocenter();
        // Rot_z(-a) = [[c, s, 0], [-s, c, 0], [0, 0, 1]]
        let rot = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][..3].copy_from_slice(&rot[r]);
            m[r][3] = -(0..3).map(|k| rot[r][k] * iso[k]).sum::<f64>();
        }
        m[3][3] = 1.0;
        Ok(m)
    }

    /// Perspective map from scanner coordinates to homogeneous detector mm.
    pub fn projection_matrix(&self) -> Mat34 {
        [
            [self.dsd, 0.0, 0.0, 0.0],
            [0.0, 0.0, self.dsd, 0.0],
            [0.0, 1.0, 0.0, self.dso],
        ]
    }

    pub fn detector_center_px(&self) -> (f64, f64) {
        ((self.det_cols as f64 - 1.0) / 2.0, (self.det_rows as f64 - 1.0) / 2.0)
    }

    /// Continuous detector pixel `(u, v)` = `(column, row)` of world point `p`.
    pub fn project_point(&self, view: usize, p: [f64; 3]) -> Result<(f64, f64)> {
        let r = self.rotation_matrix(view)?;
        let a = self.projection_matrix();
        let hom = [p[0], p[1], p[2], 1.0];
        let scanner: [f64; 4] = std::array::from_fn(|i| (0..4).map(|k| r[i][k] * hom[k]).sum());
        let img: [f64; 3] = std::array::from_fn(|i| (0..4).map(|k| a[i][k] * scanner[k]).sum());
        if !p.iter().all(|c| c.is_finite()) {
            return Err(invalid(format!("non-finite point {p:?}")));
        }
        if img[2] <= MIN_DEPTH_MM {
            return Err(Error::DegenerateProjection { view, point: p, w: img[2] });
        }
        let (cu, cv) = self.detector_center_px();
        Ok((img[0] / img[2] / self.det_spacing_u + cu, img[1] / img[2] / self.det_spacing_v + cv))
    }

    /// Per-view precomputed projector for bulk point projection.
    pub fn view_projector(&self, view: usize) -> Result<ViewProjector> {
        self.check_view(view)?;
        let (sin, cos) = self.angles[view].sin_cos();
        let (cu, cv) = self.detector_center_px();
        Ok(ViewProjector {
            view,
            sin,
            cos,
            iso: self.isocenter(),
            dso: self.dso,
            dsd: self.dsd,
            su: self.det_spacing_u,
            sv: self.det_spacing_v,
            cu,
            cv,
        })
    }

    /// Source position of a view, world mm.
    pub fn source_position(&self, view: usize) -> Result<[f64; 3]> {
        Ok(self.view_projector(view)?.scanner_to_world([0.0, -self.dso, 0.0]))
    }

    /// World position of the center of detector pixel `(col, row)`.
    pub fn pixel_position(&self, view: usize, col: f64, row: f64) -> Result<[f64; 3]> {
        let vp = self.view_projector(view)?;
        let (cu, cv) = self.detector_center_px();
        let u = (col - cu) * self.det_spacing_u;
        let v = (row - cv) * self.det_spacing_v;
        Ok(vp.scanner_to_world([u, self.dsd - self.dso, v]))
    }
}

/// Closed-form projection for one view (same mapping as `project_point`).
#[derive(Debug, Clone, Copy)]
pub struct ViewProjector {
    view: usize,
    sin: f64,
    cos: f64,
    iso: [f64; 3],
    dso: f64,
    dsd: f64,
    su: f64,
    sv: f64,
    cu: f64,
    cv: f64,
}

impl ViewProjector {
    pub fn world_to_scanner(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.iso[0], p[1] - self.iso[1], p[2] - self.iso[2]];
        [
            self.cos * d[0] + self.sin * d[1],
            -self.sin * d[0] + self.cos * d[1],
            d[2],
        ]
    }

    pub fn scanner_to_world(&self, s: [f64; 3]) -> [f64; 3] {
        [
            self.cos * s[0] - self.sin * s[1] + self.iso[0],
            self.sin * s[0] + self.cos * s[1] + self.iso[1],
            s[2] + self.iso[2],
        ]
    }

    /// `(u_px, v_px, depth)` where depth is the distance from the source plane.
    #[inline]
    pub fn project(&self, p: [f64; 3]) -> Result<(f64, f64)> {
        let s = self.world_to_scanner(p);
        let w = s[1] + self.dso;
        if w <= MIN_DEPTH_MM || !w.is_finite() {
            return Err(Error::DegenerateProjection { view: self.view, point: p, w });
        }
        let m = self.dsd / w;
        Ok((s[0] * m / self.su + self.cu, s[2] * m / self.sv + self.cv))
    }

    /// Distance of scanner-frame point from the source plane, `y + dso`.
    #[inline]
    pub fn depth(&self, p: [f64; 3]) -> f64 {
        self.world_to_scanner(p)[1] + self.dso
    }
}
