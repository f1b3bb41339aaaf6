//! Volume quality metrics.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::volume::Volume3D;

/// PSNR reported for identical volumes.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

fn same_shape(a: &Volume3D, b: &Volume3D) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("volume shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(range^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Volume3D, b: &Volume3D, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(invalid(format!("data range must be positive, got {data_range}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP_DB))
}

/// Sliding sums over every valid window position along one axis.
fn box_sum_axis(src: &[f64], shape: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_shape = shape;
    out_shape[axis] = shape[axis] + 1 - w;
    let stride = |s: [usize; 3]| [s[1] * s[2], s[2], 1];
    let (si, so) = (stride(shape), stride(out_shape));
    let mut out = vec![0.0; out_shape.iter().product()];
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for p in 0..out_shape[a1] {
        for q in 0..out_shape[a2] {
            let base_in = p * si[a1] + q * si[a2];
            let base_out = p * so[a1] + q * so[a2];
            let mut run: f64 = (0..w).map(|t| src[base_in + t * si[axis]]).sum();
            out[base_out] = run;
            for t in 1..out_shape[axis] {
                run += src[base_in + (t + w - 1) * si[axis]] - src[base_in + (t - 1) * si[axis]];
                out[base_out + t * so[axis]] = run;
            }
        }
    }
    (out, out_shape)
}

fn window_means(src: Vec<f64>, shape: [usize; 3], w: usize) -> Vec<f64> {
    let (a, s) = box_sum_axis(&src, shape, 0, w);
    let (b, s) = box_sum_axis(&a, s, 1, w);
    let (c, _) = box_sum_axis(&b, s, 2, w);
    let n = (w * w * w) as f64;
    c.into_iter().map(|v| v / n).collect()
}

/// Mean 3D SSIM over all fully contained cubic windows (uniform weights, population statistics).
pub fn ssim(a: &Volume3D, b: &Volume3D, params: &SsimParams) -> Result<f64> {
    same_shape(a, b)?;
    let w = params.window;
    if w == 0 || w.is_multiple_of(2) {
        return Err(invalid(format!("SSIM window must be odd, got {w}")));
    }
    let shape = a.shape();
    if shape.iter().any(|&n| n < w) {
        return Err(invalid(format!("volume {shape:?} is smaller than the {w}^3 SSIM window")));
    }
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let mx = window_means(x.clone(), shape, w);
    let my = window_means(y.clone(), shape, w);
    let mxx = window_means(x.iter().map(|v| v * v).collect(), shape, w);
    let myy = window_means(y.iter().map(|v| v * v).collect(), shape, w);
    let mxy = window_means(x.iter().zip(&y).map(|(p, q)| p * q).collect(), shape, w);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Quality of one reconstructed case.
#[derive(Debug, Clone, Serialize)]
pub struct CaseMetrics {
    pub case: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub identical: bool,
    pub seconds: f64,
}

impl CaseMetrics {
    pub fn evaluate(case: impl Into<String>, pred: &Volume3D, gt: &Volume3D, seconds: f64) -> Result<Self> {
        Ok(Self {
            case: case.into(),
            psnr_db: psnr(pred, gt, 1.0)?,
            ssim: ssim(pred, gt, &SsimParams::default())?,
            identical: mse(pred, gt)? == 0.0,
            seconds,
        })
    }
}

/// Per-case and mean metrics for one method at one `(K, resolution)` cell.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub n_views: usize,
    pub resolution: [usize; 3],
    pub data_range: f64,
    pub cases: Vec<CaseMetrics>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.cases.iter().map(|c| c.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.cases.iter().map(|c| c.ssim))
    }

    pub fn mean_seconds(&self) -> f64 {
        mean(self.cases.iter().map(|c| c.seconds))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return f64::NAN;
    }
    it.sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Volume3D {
        Volume3D::from_fn([n; 3], [1.0; 3], |i, j, k| ((i * 7 + j * 3 + k) % 11) as f32 / 10.0).unwrap()
    }

    #[test]
    fn psnr_anchors() {
        let a = ramp(8);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let zeros = Volume3D::zeros([8; 3], [1.0; 3]).unwrap();
        let ones = zeros.map(|_| 1.0);
        assert!(psnr(&zeros, &ones, 1.0).unwrap().abs() < 1e-12);
        let b = zeros.map(|v| v + 0.1);
        assert!((psnr(&zeros, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &ramp(9), 1.0).is_err());
    }

    #[test]
    fn ssim_of_identical_volumes_is_one() {
        let a = ramp(10);
        assert_eq!(ssim(&a, &a, &SsimParams::default()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_inverted_volume_is_low() {
        let a = ramp(10);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b, &SsimParams::default()).unwrap() < 0.5);
    }

    #[test]
    fn ssim_rejects_small_volumes_and_even_windows() {
        let a = ramp(6);
        assert!(ssim(&a, &a, &SsimParams::default()).is_err());
        let p = SsimParams { window: 4, ..Default::default() };
        assert!(ssim(&ramp(8), &ramp(8), &p).is_err());
    }

    #[test]
    fn box_sums_match_brute_force() {
        let shape = [5, 6, 7];
        let src: Vec<f64> = (0..210).map(|v| (v as f64 * 0.37).sin()).collect();
        let m = window_means(src.clone(), shape, 3);
        let mut idx = 0;
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    let mut s = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            for c in 0..3 {
                                s += src[((i + a) * 6 + j + b) * 7 + k + c];
                            }
                        }
                    }
                    assert!((m[idx] - s / 27.0).abs() < 1e-12);
                    idx += 1;
                }
            }
        }
    }
}
