//! Digitally reconstructed radiographs by ray marching.
//!
//! Each detector value is the line integral of the trilinearly interpolated
//! volume along the segment from the source to the pixel center, evaluated
//! with the midpoint rule on the part of the segment inside the volume box.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::ScannerGeometry;
use crate::volume::Volume3D;

/// `K` detector images of raw line integrals (intensity x mm).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    rows: usize,
    cols: usize,
    angles: Vec<f64>,
    data: Vec<f32>,
    fingerprint: Option<u64>,
}

impl ProjectionStack {
    pub fn new(rows: usize, cols: usize, angles: Vec<f64>, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || angles.is_empty() {
            return Err(invalid("projection stack needs at least one non-empty view"));
        }
        if data.len() != rows * cols * angles.len() {
            return Err(invalid(format!(
                "{} views of {rows}x{cols} need {} values, got {}",
                angles.len(),
                rows * cols * angles.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(format!("projection value {} at {i} is negative or non-finite", data[i])));
        }
        Ok(Self {
            rows,
            cols,
            angles,
            data,
            fingerprint: None,
        })
    }

    pub fn zeros(geom: &ScannerGeometry) -> Self {
        Self {
            rows: geom.det_rows,
            cols: geom.det_cols,
            angles: geom.angles.clone(),
            data: vec![0.0; geom.det_rows * geom.det_cols * geom.n_views()],
            fingerprint: Some(geom.fingerprint()),
        }
    }

    /// Tags the stack as acquired with `geom` after checking compatibility.
    pub fn bind(mut self, geom: &ScannerGeometry) -> Result<Self> {
        self.fingerprint = None;
        self.check_compatible(geom)?;
        self.fingerprint = Some(geom.fingerprint());
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn fingerprint(&self) -> Option<u64> {
        self.fingerprint
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn view(&self, i: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Detector size and angle list must match `geom`; a recorded
    /// fingerprint must match too.
    pub fn check_compatible(&self, geom: &ScannerGeometry) -> Result<()> {
        if self.rows != geom.det_rows || self.cols != geom.det_cols {
            return Err(invalid(format!(
                "projection stack is {}x{} but geometry detector is {}x{}",
                self.rows, self.cols, geom.det_rows, geom.det_cols
            )));
        }
        if self.angles != geom.angles {
            return Err(invalid(format!(
                "projection stack has {} angles that differ from the geometry's {}",
                self.angles.len(),
                geom.n_views()
            )));
        }
        if let Some(fp) = self.fingerprint {
            if fp != geom.fingerprint() {
                return Err(invalid(format!(
                    "geometry fingerprint mismatch: stack {fp:016x}, geometry {:016x}",
                    geom.fingerprint()
                )));
            }
        }
        Ok(())
    }
}

/// Default ray-march step: half the smallest voxel dimension.
pub fn default_step(vol: &Volume3D) -> f64 {
    vol.spacing().iter().copied().fold(f64::INFINITY, f64::min) / 2.0
}

/// Parametric interval `[t0, t1]` of `origin + t * dir`, `t` in `[0, t_max]`,
/// inside the box `[0, extent]`.
pub(crate) fn clip_to_box(origin: [f64; 3], dir: [f64; 3], t_max: f64, extent: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, t_max);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < 0.0 || origin[a] > extent[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut lo, mut hi) = ((0.0 - origin[a]) * inv, (extent[a] - origin[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t1 <= t0 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Unit direction and distance from the source to each pixel center of a view.
pub(crate) fn view_rays(geom: &ScannerGeometry, view: usize) -> Result<([f64; 3], Vec<([f64; 3], f64)>)> {
    let src = geom.source_position(view)?;
    let mut rays = Vec::with_capacity(geom.det_rows * geom.det_cols);
    for r in 0..geom.det_rows {
        for c in 0..geom.det_cols {
            let px = geom.pixel_position(view, c as f64, r as f64)?;
            let d = [px[0] - src[0], px[1] - src[1], px[2] - src[2]];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            rays.push(([d[0] / len, d[1] / len, d[2] / len], len));
        }
    }
    Ok((src, rays))
}

/// Intersection length of every ray of `view` with the volume box.
pub fn ray_lengths(geom: &ScannerGeometry, view: usize) -> Result<Vec<f64>> {
    let extent = geom.volume_extent();
    let (src, rays) = view_rays(geom, view)?;
    Ok(rays
        .iter()
        .map(|&(dir, len)| clip_to_box(src, dir, len, extent).map_or(0.0, |(a, b)| b - a))
        .collect())
}

fn check_volume(vol: &Volume3D, geom: &ScannerGeometry) -> Result<()> {
    geom.validate()?;
    let (ve, ge) = (vol.extent_mm(), geom.volume_extent());
    if (0..3).any(|a| (ve[a] - ge[a]).abs() > 1e-6 * ge[a].max(1.0)) {
        return Err(invalid(format!(
            "volume extent {ve:?} mm does not match geometry extent {ge:?} mm"
        )));
    }
    Ok(())
}

/// One view with an explicit ray-march step (mm).
pub fn forward_project_single_with_step(vol: &Volume3D, geom: &ScannerGeometry, view: usize, step: f64) -> Result<Vec<f32>> {
    check_volume(vol, geom)?;
    if !(step > 0.0) {
        return Err(invalid(format!("ray-march step must be positive, got {step}")));
    }
    if view >= geom.n_views() {
        return Err(Error::ViewOutOfRange {
            index: view,
            count: geom.n_views(),
        });
    }
    let extent = vol.extent_mm();
    let (src, rays) = view_rays(geom, view)?;
    let mut img = vec![0f32; rays.len()];
    img.par_chunks_mut(geom.det_cols)
        .zip(rays.par_chunks(geom.det_cols))
        .for_each(|(row, row_rays)| {
            for (out, &(dir, len)) in row.iter_mut().zip(row_rays) {
                let Some((t0, t1)) = clip_to_box(src, dir, len, extent) else {
                    continue;
                };
                let n = ((t1 - t0) / step).ceil().max(1.0) as usize;
                let h = (t1 - t0) / n as f64;
                let mut acc = 0.0;
                for m in 0..n {
                    let t = t0 + (m as f64 + 0.5) * h;
                    acc += vol.sample_clamped([src[0] + t * dir[0], src[1] + t * dir[1], src[2] + t * dir[2]]);
                }
                *out = (acc * h) as f32;
            }
        });
    Ok(img)
}

pub fn forward_project_single(vol: &Volume3D, geom: &ScannerGeometry, view: usize) -> Result<Vec<f32>> {
    forward_project_single_with_step(vol, geom, view, default_step(vol))
}

pub fn forward_project_with_step(vol: &Volume3D, geom: &ScannerGeometry, step: f64) -> Result<ProjectionStack> {
    let mut data = Vec::with_capacity(geom.det_rows * geom.det_cols * geom.n_views());
    for view in 0..geom.n_views() {
        data.extend(forward_project_single_with_step(vol, geom, view, step)?);
    }
    let mut stack = ProjectionStack::new(geom.det_rows, geom.det_cols, geom.angles.clone(), data)?;
    stack.fingerprint = Some(geom.fingerprint());
    Ok(stack)
}

/// Simulates the full projection stack of `vol` under `geom`.
pub fn forward_project(vol: &Volume3D, geom: &ScannerGeometry) -> Result<ProjectionStack> {
    forward_project_with_step(vol, geom, default_step(vol))
}
