//! Volumes, world/voxel mapping, trilinear lookup and point sampling.
//!
//! Voxel `(i, j, k)` occupies `[i*s_h, (i+1)*s_h) x ...` and its center sits at
//! `((i + 1/2) s_h, (j + 1/2) s_w, (k + 1/2) s_d)`. Storage is `k`-fastest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Foreground / background split used by the balanced sampler.
pub const DEFAULT_THRESHOLD: f32 = 1e-5;

/// Rejection sampling gives up after this many candidate draws.
pub const MAX_SAMPLING_ATTEMPTS: u64 = 10_000_000;

/// Points farther than this outside the extent are rejected by `trilinear_sample`.
const EXTENT_TOLERANCE_MM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid(format!("volume shape must be positive, got {shape:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(invalid(format!("shape {shape:?} needs {n} voxels, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(shape, spacing, vec![0.0; shape.iter().product()])
    }

    pub fn from_fn(shape: [usize; 3], spacing: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(shape, spacing, data)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.shape[a] as f64 * self.spacing[a])
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            (i as f64 + 0.5) * self.spacing[0],
            (j as f64 + 0.5) * self.spacing[1],
            (k as f64 + 0.5) * self.spacing[2],
        ]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Fraction of voxels strictly above `threshold`.
    pub fn foreground_fraction(&self, threshold: f32) -> f64 {
        self.data.iter().filter(|&&v| v > threshold).count() as f64 / self.data.len() as f64
    }

    /// Min-max rescale to `[0, 1]`; returns `(offset, scale)` so that
    /// `original = normalized * scale + offset`.
    pub fn normalize(&mut self) -> (f32, f32) {
        let (lo, hi) = self.min_max();
        let scale = if hi > lo { hi - lo } else { 1.0 };
        for v in &mut self.data {
            *v = ((*v - lo) / scale).clamp(0.0, 1.0);
        }
        (lo, scale)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Trilinear blend of the 8 voxel centers around `p` (world mm).
    ///
    /// Between the outermost voxel centers and the extent boundary the value
    /// is clamped to the border voxel.
    pub fn trilinear_sample(&self, p: [f64; 3]) -> Result<f32> {
        let extent = self.extent_mm();
        for a in 0..3 {
            if !(p[a] >= -EXTENT_TOLERANCE_MM && p[a] <= extent[a] + EXTENT_TOLERANCE_MM) {
                return Err(Error::OutOfBounds { point: p, extent });
            }
        }
        Ok(self.sample_clamped(p) as f32)
    }

    /// Trilinear lookup for points already known to be inside the extent.
    #[inline]
    pub(crate) fn sample_clamped(&self, p: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut next = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let n = self.shape[a];
            let c = (p[a] / self.spacing[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let f = c.floor();
            base[a] = f as usize;
            next[a] = (base[a] + 1).min(n - 1);
            frac[a] = c - f;
        }
        let (s1, s2) = (self.shape[1], self.shape[2]);
        let at = |i: usize, j: usize, k: usize| self.data[(i * s1 + j) * s2 + k] as f64;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(at(base[0], base[1], base[2]), at(next[0], base[1], base[2]), frac[0]);
        let c10 = lerp(at(base[0], next[1], base[2]), at(next[0], next[1], base[2]), frac[0]);
        let c01 = lerp(at(base[0], base[1], next[2]), at(next[0], base[1], next[2]), frac[0]);
        let c11 = lerp(at(base[0], next[1], next[2]), at(next[0], next[1], next[2]), frac[0]);
        lerp(lerp(c00, c10, frac[1]), lerp(c01, c11, frac[1]), frac[2])
    }

    /// Resamples onto a lattice of `out_shape` voxel centers covering the same extent.
    pub fn resample(&self, out_shape: [usize; 3]) -> Result<Self> {
        if out_shape == self.shape {
            return Ok(self.clone());
        }
        let pts = grid_points(self.extent_mm(), out_shape)?;
        let data = pts.coords.iter().map(|&p| self.sample_clamped(p) as f32).collect();
        let extent = self.extent_mm();
        let spacing = std::array::from_fn(|a| extent[a] / out_shape[a] as f64);
        Self::new(out_shape, spacing, data)
    }
}

/// World-space sample points with optional ground-truth intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBatch {
    pub coords: Vec<[f64; 3]>,
    pub values: Option<Vec<f32>>,
}

impl PointBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Attaches trilinear ground truth from `vol`.
    pub fn with_values_from(mut self, vol: &Volume3D) -> Result<Self> {
        let values = self
            .coords
            .iter()
            .map(|&p| vol.trilinear_sample(p))
            .collect::<Result<Vec<_>>>()?;
        self.values = Some(values);
        Ok(self)
    }
}

/// Voxel-center lattice of `out_shape` points spanning `[0, extent]`, `k`-fastest.
pub fn grid_points(extent_mm: [f64; 3], out_shape: [usize; 3]) -> Result<PointBatch> {
    if out_shape.contains(&0) {
        return Err(invalid(format!("grid shape must be positive, got {out_shape:?}")));
    }
    let step: [f64; 3] = std::array::from_fn(|a| extent_mm[a] / out_shape[a] as f64);
    let n: usize = out_shape.iter().product();
    let mut coords = Vec::with_capacity(n);
    for i in 0..out_shape[0] {
        let x = (i as f64 + 0.5) * step[0];
        for j in 0..out_shape[1] {
            let y = (j as f64 + 0.5) * step[1];
            for k in 0..out_shape[2] {
                coords.push([x, y, (k as f64 + 0.5) * step[2]]);
            }
        }
    }
    Ok(PointBatch { coords, values: None })
}

/// `n / 2` points with trilinear value above `threshold` and `n / 2` at or
/// below it, each uniform within its class (rejection sampling).
pub fn sample_balanced_points(vol: &Volume3D, n: usize, threshold: f32, seed: u64) -> Result<PointBatch> {
    if !n.is_multiple_of(2) {
        return Err(invalid(format!("balanced sampling needs an even point count, got {n}")));
    }
    let (lo, hi) = vol.min_max();
    if hi <= threshold {
        return Err(Error::DegenerateVolume(format!(
            "no foreground above threshold {threshold} (max intensity {hi})"
        )));
    }
    if lo > threshold {
        return Err(Error::DegenerateVolume(format!(
            "no background at or below threshold {threshold} (min intensity {lo})"
        )));
    }
    let half = n / 2;
    let extent = vol.extent_mm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let (mut fg, mut bg) = (0usize, 0usize);
    let mut attempts = 0u64;
    while fg < half || bg < half {
        if attempts >= MAX_SAMPLING_ATTEMPTS {
            return Err(Error::DegenerateVolume(format!(
                "rejection sampling exhausted {MAX_SAMPLING_ATTEMPTS} attempts ({fg} foreground, {bg} background)"
            )));
        }
        attempts += 1;
        let p = [
            rng.gen_range(0.0..extent[0]),
            rng.gen_range(0.0..extent[1]),
            rng.gen_range(0.0..extent[2]),
        ];
        let v = vol.sample_clamped(p) as f32;
        let take = if v > threshold {
            fg < half && {
                fg += 1;
                true
            }
        } else {
            bg < half && {
                bg += 1;
                true
            }
        };
        if take {
            coords.push(p);
            values.push(v);
        }
    }
    Ok(PointBatch {
        coords,
        values: Some(values),
    })
}
