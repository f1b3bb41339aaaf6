//! Classical baselines: FDK filtered backprojection and SART.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{ScannerGeometry, ViewProjector};
use crate::projector::{forward_project_single, ray_lengths, ProjectionStack};
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdkFilter {
    RamLak,
    /// Ram-Lak apodized by a sinc window.
    #[default]
    SheppLogan,
}

impl FromStr for FdkFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ram_lak" | "ram-lak" => Ok(Self::RamLak),
            "shepp_logan" | "shepp_logan_window" | "shepp-logan" => Ok(Self::SheppLogan),
            other => Err(invalid(format!("unknown filter {other:?} (expected ram_lak or shepp_logan)"))),
        }
    }
}

impl fmt::Display for FdkFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RamLak => "ram_lak",
            Self::SheppLogan => "shepp_logan",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdkConfig {
    pub filter: FdkFilter,
    /// Smooth redundancy weights so each line integral counts once overall.
    pub redundancy_weights: bool,
}

impl Default for FdkConfig {
    fn default() -> Self {
        Self {
            filter: FdkFilter::default(),
            redundancy_weights: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SartConfig {
    pub n_iterations: usize,
    pub relaxation: f64,
    pub nonnegativity: bool,
}

impl Default for SartConfig {
    fn default() -> Self {
        Self {
            n_iterations: 30,
            relaxation: 0.5,
            nonnegativity: true,
        }
    }
}

impl SartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(invalid("SART needs at least one iteration"));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(invalid(format!("SART relaxation must lie in (0, 2), got {}", self.relaxation)));
        }
        Ok(())
    }
}

/// Discrete filter taps `h[n]` for `n = -(len-1)..=(len-1)`, sample pitch `delta`.
pub fn filter_kernel(filter: FdkFilter, len: usize, delta: f64) -> Vec<f64> {
    let n_max = len as i64 - 1;
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    (-n_max..=n_max)
        .map(|n| match filter {
            FdkFilter::RamLak if n == 0 => 1.0 / (4.0 * delta * delta),
            FdkFilter::RamLak if n % 2 == 0 => 0.0,
            FdkFilter::RamLak => -1.0 / ((n * n) as f64 * pi2 * delta * delta),
            FdkFilter::SheppLogan => -2.0 / (pi2 * delta * delta * (4.0 * (n * n) as f64 - 1.0)),
        })
        .collect()
}

fn output_volume(geom: &ScannerGeometry, out_shape: [usize; 3]) -> Result<Volume3D> {
    if out_shape.contains(&0) {
        return Err(invalid(format!("output shape must be positive, got {out_shape:?}")));
    }
    let extent = geom.volume_extent();
    Volume3D::zeros(out_shape, std::array::from_fn(|a| extent[a] / out_shape[a] as f64))
}

/// Bilinear detector lookup at continuous `(u, v)`; `None` when no tap is on the detector.
#[inline]
fn detector_lookup(img: &[f64], rows: usize, cols: usize, u: f64, v: f64) -> Option<f64> {
    if !(u > -1.0 && v > -1.0 && u < cols as f64 && v < rows as f64) {
        return None;
    }
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let (c0, r0) = (u0 as i64, v0 as i64);
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for (dr, wr) in [(0, 1.0 - fv), (1, fv)] {
        for (dc, wc) in [(0, 1.0 - fu), (1, fu)] {
            let (r, c) = (r0 + dr, c0 + dc);
            let w = wr * wc;
            if w > 0.0 && r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
                acc += w * img[r as usize * cols + c as usize];
                wsum += w;
            }
        }
    }
    (wsum > 0.0).then(|| acc / wsum)
}

/// Applies `f(voxel, view_projector)` over every voxel in parallel, slice by slice.
fn for_each_voxel(vol: &mut Volume3D, vp: &ViewProjector, f: impl Fn(&mut f32, (f64, f64), f64) + Sync) {
    let shape = vol.shape();
    let spacing = vol.spacing();
    let slab = shape[1] * shape[2];
    vol.data_mut().par_chunks_mut(slab).enumerate().for_each(|(i, plane)| {
        let x = (i as f64 + 0.5) * spacing[0];
        for j in 0..shape[1] {
            let y = (j as f64 + 0.5) * spacing[1];
            for k in 0..shape[2] {
                let p = [x, y, (k as f64 + 0.5) * spacing[2]];
                let depth = vp.depth(p);
                if let Ok(uv) = vp.project(p) {
                    f(&mut plane[j * shape[2] + k], uv, depth);
                }
            }
        }
    });
}

/// Angular width each view stands for (uniform spacing assumed; one view covers pi).
fn view_increment(angles: &[f64]) -> f64 {
    match angles.len() {
        0 | 1 => std::f64::consts::PI,
        k => (angles[k - 1] - angles[0]) / (k - 1) as f64,
    }
}

/// Per-view, per-column weights `f(b) / (f(b) + f(b_c))` where `b_c = b + pi + 2 gamma`
/// is the source angle measuring the same line from the other side and `f` is a
/// window over the scanned arc with sine-squared tapers of width `2 gamma_max`.
fn redundancy_weights(geom: &ScannerGeometry) -> Vec<Vec<f64>> {
    use std::f64::consts::{PI, TAU};
    let delta = view_increment(&geom.angles);
    let start = geom.angles[0] - delta / 2.0;
    let range = (delta * geom.n_views() as f64).min(TAU);
    let (cu, _) = geom.detector_center_px();
    let gammas: Vec<f64> = (0..geom.det_cols)
        .map(|c| ((c as f64 - cu) * geom.det_spacing_u / geom.dsd).atan())
        .collect();
    let gamma_max = gammas.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let taper = (2.0 * gamma_max).min(range / 4.0);
    let window = |b: f64| -> f64 {
        if range >= TAU - 1e-9 {
            return 1.0;
        }
        let t = (b - start).rem_euclid(TAU);
        if t > range {
            return 0.0;
        }
        let edge = t.min(range - t);
        if taper <= 0.0 || edge >= taper {
            1.0
        } else {
            (PI / 2.0 * edge / taper).sin().powi(2)
        }
    };
    geom.angles
        .iter()
        .map(|&b| {
            gammas
                .iter()
                .map(|&g| {
                    let (f, fc) = (window(b), window(b + PI - 2.0 * g));
                    if f + fc > 0.0 {
                        f / (f + fc)
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Cosine-weighted, row-filtered projections on the detector grid.
fn filtered_views(proj: &ProjectionStack, geom: &ScannerGeometry, cfg: &FdkConfig) -> Vec<Vec<f64>> {
    let filter = cfg.filter;
    let redundancy = cfg.redundancy_weights.then(|| redundancy_weights(geom));
    let (rows, cols) = (geom.det_rows, geom.det_cols);
    let scale = geom.dso / geom.dsd;
    // Virtual detector through the isocenter.
    let (da, db) = (geom.det_spacing_u * scale, geom.det_spacing_v * scale);
    let (cu, cv) = geom.detector_center_px();
    let kernel = filter_kernel(filter, cols, da);
    let centre = cols - 1;
    let d = geom.dso;
    (0..proj.n_views())
        .into_par_iter()
        .map(|view| {
            let img = proj.view(view);
            let mut out = vec![0.0; rows * cols];
            let mut weighted = vec![0.0; cols];
            for r in 0..rows {
                let b = (r as f64 - cv) * db;
                for (c, w) in weighted.iter_mut().enumerate() {
                    let a = (c as f64 - cu) * da;
                    let rw = redundancy.as_ref().map_or(1.0, |w| w[view][c]);
                    *w = rw * img[r * cols + c] as f64 * d / (d * d + a * a + b * b).sqrt();
                }
                for c in 0..cols {
                    let acc: f64 = weighted.iter().enumerate().map(|(m, &p)| p * kernel[centre + c - m]).sum();
                    out[r * cols + c] = acc * da;
                }
            }
            out
        })
        .collect()
}

/// FDK reconstruction onto an `out_shape` lattice covering the geometry's volume extent.
pub fn fdk_reconstruct(proj: &ProjectionStack, geom: &ScannerGeometry, out_shape: [usize; 3], cfg: &FdkConfig) -> Result<Volume3D> {
    geom.validate()?;
    proj.check_compatible(geom)?;
    let mut vol = output_volume(geom, out_shape)?;
    let filtered = filtered_views(proj, geom, cfg);
    let (rows, cols) = (geom.det_rows, geom.det_cols);
    let d = geom.dso;
    let norm = if cfg.redundancy_weights {
        view_increment(&geom.angles)
    } else {
        std::f64::consts::PI / proj.n_views() as f64
    };
    let mut acc = vec![0f64; vol.len()];
    for (view, img) in filtered.iter().enumerate() {
        let vp = geom.view_projector(view)?;
        let mut contrib = Volume3D::zeros(vol.shape(), vol.spacing())?;
        for_each_voxel(&mut contrib, &vp, |out, (u, v), depth| {
            if let Some(q) = detector_lookup(img, rows, cols, u, v) {
                *out = (q * d * d / (depth * depth)) as f32;
            }
        });
        for (a, &c) in acc.iter_mut().zip(contrib.data()) {
            *a += c as f64;
        }
    }
    for (o, a) in vol.data_mut().iter_mut().zip(&acc) {
        *o = (a * norm).max(0.0) as f32;
    }
    Ok(vol)
}

/// SART result with the projection-space RMS residual after each sweep.
#[derive(Debug, Clone)]
pub struct SartTrace {
    pub volume: Volume3D,
    pub residual_rms: Vec<f64>,
}

pub fn sart_reconstruct(proj: &ProjectionStack, geom: &ScannerGeometry, out_shape: [usize; 3], cfg: &SartConfig) -> Result<Volume3D> {
    Ok(sart_run(proj, geom, out_shape, cfg, false)?.volume)
}

/// Like [`sart_reconstruct`] but also re-projects after every sweep to record the data residual.
pub fn sart_reconstruct_traced(proj: &ProjectionStack, geom: &ScannerGeometry, out_shape: [usize; 3], cfg: &SartConfig) -> Result<SartTrace> {
    sart_run(proj, geom, out_shape, cfg, true)
}

fn projection_residual_rms(vol: &Volume3D, proj: &ProjectionStack, geom: &ScannerGeometry) -> Result<f64> {
    let mut sq = 0.0;
    for view in 0..proj.n_views() {
        let img = forward_project_single(vol, geom, view)?;
        sq += img.iter().zip(proj.view(view)).map(|(&a, &b)| ((b - a) as f64).powi(2)).sum::<f64>();
    }
    Ok((sq / proj.data().len() as f64).sqrt())
}

fn sart_run(proj: &ProjectionStack, geom: &ScannerGeometry, out_shape: [usize; 3], cfg: &SartConfig, trace: bool) -> Result<SartTrace> {
    geom.validate()?;
    cfg.validate()?;
    proj.check_compatible(geom)?;
    let mut vol = output_volume(geom, out_shape)?;
    let (rows, cols) = (geom.det_rows, geom.det_cols);
    let min_len = vol.spacing().iter().copied().fold(f64::INFINITY, f64::min) * 1e-3;
    let lengths = (0..proj.n_views()).map(|v| ray_lengths(geom, v)).collect::<Result<Vec<_>>>()?;
    let projectors = (0..proj.n_views()).map(|v| geom.view_projector(v)).collect::<Result<Vec<_>>>()?;
    let mut residual_rms = Vec::new();
    let lambda = cfg.relaxation as f32;
    for iteration in 0..cfg.n_iterations {
        for view in 0..proj.n_views() {
            let current = forward_project_single(&vol, geom, view)?;
            let mut normalized = vec![0f64; rows * cols];
            for (idx, n) in normalized.iter_mut().enumerate() {
                let r = proj.view(view)[idx] as f64 - current[idx] as f64;
                if r.is_nan() {
                    return Err(Error::NumericalDivergence { iteration, view });
                }
                let len = lengths[view][idx];
                if len > min_len {
                    *n = r / len;
                }
            }
            let clamp = cfg.nonnegativity;
            for_each_voxel(&mut vol, &projectors[view], |x, (u, v), _| {
                if let Some(c) = detector_lookup(&normalized, rows, cols, u, v) {
                    *x += lambda * c as f32;
                    if clamp && *x < 0.0 {
                        *x = 0.0;
                    }
                }
            });
            if vol.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalDivergence { iteration, view });
            }
        }
        if trace {
            residual_rms.push(projection_residual_rms(&vol, proj, geom)?);
        }
    }
    Ok(SartTrace { volume: vol, residual_rms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::uniform_angles;
    use crate::phantom::{make_phantom, PhantomKind};
    use crate::projector::forward_project;

    fn geom(k: usize) -> ScannerGeometry {
        ScannerGeometry::new(200.0, 300.0, [24, 24], [3.0, 3.0], uniform_angles(k).unwrap(), [16; 3], [2.0; 3]).unwrap()
    }

    #[test]
    fn ram_lak_kernel_is_symmetric_and_zero_mean_in_the_limit() {
        let h = filter_kernel(FdkFilter::RamLak, 512, 1.0);
        let mid = 511;
        for n in 1..511 {
            assert_eq!(h[mid + n], h[mid - n]);
        }
        assert_eq!(h[mid + 2], 0.0);
        let total: f64 = h.iter().sum();
        // Tail of -2/(pi^2) sum over odd n > 511 of 1/n^2.
        assert!(total.abs() < 1e-3, "{total}");
        let sl = filter_kernel(FdkFilter::SheppLogan, 4, 1.0);
        assert!((sl[3] - 2.0 / std::f64::consts::PI.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn zero_projections_give_zero_volumes() {
        let g = geom(6);
        let p = ProjectionStack::zeros(&g);
        let f = fdk_reconstruct(&p, &g, [16; 3], &FdkConfig::default()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        let s = sart_reconstruct(&p, &g, [16; 3], &SartConfig { n_iterations: 2, ..Default::default() }).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fdk_is_linear_in_the_projections() {
        let g = geom(8);
        let v = make_phantom(PhantomKind::SheppLogan3d, [16; 3], [2.0; 3], 0).unwrap();
        let p = forward_project(&v, &g).unwrap();
        let a = fdk_reconstruct(&p, &g, [16; 3], &FdkConfig::default()).unwrap();
        let b = fdk_reconstruct(&p.map(|x| 3.0 * x), &g, [16; 3], &FdkConfig::default()).unwrap();
        let scale = b.min_max().1;
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((3.0 * x - y).abs() <= 1e-5 * scale);
        }
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let g = geom(6);
        let p = ProjectionStack::zeros(&g);
        assert!(fdk_reconstruct(&p, &geom(5), [16; 3], &FdkConfig::default()).is_err());
        assert!(sart_reconstruct(&p, &geom(5), [16; 3], &SartConfig::default()).is_err());
    }

    #[test]
    fn sart_config_validation() {
        assert!(SartConfig { relaxation: 2.0, ..Default::default() }.validate().is_err());
        assert!(SartConfig { n_iterations: 0, ..Default::default() }.validate().is_err());
        assert!(SartConfig::default().validate().is_ok());
    }

    #[test]
    fn sart_residual_decreases_on_consistent_data() {
        let g = geom(8);
        let v = make_phantom(PhantomKind::RandomEllipsoids, [16; 3], [2.0; 3], 3).unwrap();
        let p = forward_project(&v, &g).unwrap();
        let t = sart_reconstruct_traced(&p, &g, [16; 3], &SartConfig { n_iterations: 8, ..Default::default() }).unwrap();
        for w in t.residual_rms.windows(2) {
            assert!(w[1] <= w[0], "{:?}", t.residual_rms);
        }
    }

    #[test]
    fn filter_names_round_trip() {
        for f in [FdkFilter::RamLak, FdkFilter::SheppLogan] {
            assert_eq!(f.to_string().parse::<FdkFilter>().unwrap(), f);
        }
    }
}
