//! Synthetic ellipsoid phantoms standing in for clinical CT volumes.
//!
//! Shapes are defined in normalized coordinates `[-1, 1]^3` over the volume
//! extent (axis 2 is the rotation axis). Each voxel is the average of a 2x2x2
//! set of sub-samples, so edges carry partial-volume values while voxels fully
//! outside every shape stay exactly zero.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    SheppLogan3d,
    RandomEllipsoids,
    /// Centered uniform sphere, radius 0.6 of the half extent, intensity 1.
    Sphere,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp_logan_3d" | "shepp-logan" => Ok(Self::SheppLogan3d),
            "random_ellipsoids" | "ellipsoids" => Ok(Self::RandomEllipsoids),
            "sphere" => Ok(Self::Sphere),
            other => Err(invalid(format!(
                "unknown phantom kind {other:?} (expected shepp_logan_3d, random_ellipsoids or sphere)"
            ))),
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SheppLogan3d => "shepp_logan_3d",
            Self::RandomEllipsoids => "random_ellipsoids",
            Self::Sphere => "sphere",
        })
    }
}

pub const SPHERE_RADIUS: f64 = 0.6;
pub const SPHERE_INTENSITY: f32 = 1.0;

#[derive(Debug, Clone, Copy)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// ZXZ Euler angles (radians).
    pub euler: [f64; 3],
    pub intensity: f64,
}

impl Ellipsoid {
    fn rotation(&self) -> [[f64; 3]; 3] {
        let (sp, cp) = self.euler[0].sin_cos();
        let (st, ct) = self.euler[1].sin_cos();
        let (ss, cs) = self.euler[2].sin_cos();
        [
            [cs * cp - ct * sp * ss, cs * sp + ct * cp * ss, ss * st],
            [-ss * cp - ct * sp * cs, -ss * sp + ct * cp * cs, cs * st],
            [st * sp, -st * cp, ct],
        ]
    }

    fn contains(&self, rot: &[[f64; 3]; 3], q: [f64; 3]) -> bool {
        let d = [q[0] - self.center[0], q[1] - self.center[1], q[2] - self.center[2]];
        let mut r = 0.0;
        for (row, axis) in rot.iter().zip(self.semi_axes) {
            let l = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
            r += (l / axis) * (l / axis);
        }
        r <= 1.0
    }
}

/// Modified 3D Shepp-Logan head: `(A, a, b, c, x0, y0, z0, phi, theta, psi)`.
const SHEPP_LOGAN: [[f64; 10]; 10] = [
    [1.0, 0.6900, 0.920, 0.810, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.780, 0.0, -0.0184, 0.0, 0.0, 0.0, 0.0],
    [-0.2, 0.1100, 0.310, 0.220, 0.22, 0.0, 0.0, -18.0, 0.0, 10.0],
    [-0.2, 0.1600, 0.410, 0.280, -0.22, 0.0, 0.0, 18.0, 0.0, 10.0],
    [0.1, 0.2100, 0.250, 0.410, 0.0, 0.35, -0.15, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.0, 0.1, 0.25, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.0, -0.1, 0.25, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.023, 0.050, -0.08, -0.605, 0.0, 0.0, 0.0, 0.0],
    [0.1, 0.0230, 0.023, 0.020, 0.0, -0.606, 0.0, 0.0, 0.0, 0.0],
    [0.1, 0.0230, 0.046, 0.020, 0.06, -0.605, 0.0, 0.0, 0.0, 0.0],
];

pub fn shepp_logan_ellipsoids() -> Vec<Ellipsoid> {
    SHEPP_LOGAN
        .iter()
        .map(|r| Ellipsoid {
            center: [r[4], r[5], r[6]],
            semi_axes: [r[1], r[2], r[3]],
            euler: [r[7].to_radians(), r[8].to_radians(), r[9].to_radians()],
            intensity: r[0],
        })
        .collect()
}

/// 5 to 12 ellipsoids: one body ellipsoid plus smaller inclusions (some of
/// them negative) centered inside it.
pub fn random_ellipsoids(seed: u64) -> Vec<Ellipsoid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(5..=12);
    let body = Ellipsoid {
        center: [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), rng.gen_range(-0.05..0.05)],
        semi_axes: [rng.gen_range(0.45..0.72), rng.gen_range(0.45..0.72), rng.gen_range(0.55..0.8)],
        euler: [rng.gen_range(0.0..std::f64::consts::PI), 0.0, 0.0],
        intensity: rng.gen_range(0.2..0.45),
    };
    let mut out = vec![body];
    while out.len() < count {
        // Center uniformly inside 70% of the body.
        let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        if u.iter().map(|x| x * x).sum::<f64>() > 1.0 {
            continue;
        }
        let rot = body.rotation();
        let local: [f64; 3] = std::array::from_fn(|a| 0.7 * u[a] * body.semi_axes[a]);
        // Inverse rotation = transpose.
        let center: [f64; 3] = std::array::from_fn(|a| body.center[a] + (0..3).map(|r| rot[r][a] * local[r]).sum::<f64>());
        let negative = rng.gen_bool(0.3);
        out.push(Ellipsoid {
            center,
            semi_axes: [rng.gen_range(0.06..0.3), rng.gen_range(0.06..0.3), rng.gen_range(0.06..0.3)],
            euler: [rng.gen_range(0.0..std::f64::consts::PI), rng.gen_range(-0.4..0.4), 0.0],
            intensity: if negative { -rng.gen_range(0.05..0.2) } else { rng.gen_range(0.1..0.55) },
        });
    }
    out
}

/// Rasterizes additive ellipsoids, clipped to `[0, 1]`.
pub fn rasterize(ellipsoids: &[Ellipsoid], shape: [usize; 3], spacing: [f64; 3]) -> Result<Volume3D> {
    const SUB: usize = 2;
    let rots: Vec<_> = ellipsoids.iter().map(Ellipsoid::rotation).collect();
    let norm = |idx: usize, sub: usize, n: usize| -> f64 {
        let pos = idx as f64 + (sub as f64 + 0.5) / SUB as f64;
        2.0 * pos / n as f64 - 1.0
    };
    Volume3D::from_fn(shape, spacing, |i, j, k| {
        let mut acc = 0.0;
        for si in 0..SUB {
            for sj in 0..SUB {
                for sk in 0..SUB {
                    let q = [norm(i, si, shape[0]), norm(j, sj, shape[1]), norm(k, sk, shape[2])];
                    let v: f64 = ellipsoids
                        .iter()
                        .zip(&rots)
                        .filter(|(e, r)| e.contains(r, q))
                        .map(|(e, _)| e.intensity)
                        .sum();
                    acc += v.clamp(0.0, 1.0);
                }
            }
        }
        (acc / (SUB * SUB * SUB) as f64) as f32
    })
}

pub fn make_phantom(kind: PhantomKind, shape: [usize; 3], spacing: [f64; 3], seed: u64) -> Result<Volume3D> {
    if shape.contains(&0) {
        return Err(invalid("phantom shape must be positive"));
    }
    let shapes = match kind {
        PhantomKind::SheppLogan3d => shepp_logan_ellipsoids(),
        PhantomKind::RandomEllipsoids => random_ellipsoids(seed),
        PhantomKind::Sphere => vec![Ellipsoid {
            center: [0.0; 3],
            semi_axes: [SPHERE_RADIUS; 3],
            euler: [0.0; 3],
            intensity: SPHERE_INTENSITY as f64,
        }],
    };
    rasterize(&shapes, shape, spacing)
}
