//! Bilinear sampling of feature maps at continuous pixel coordinates.
//!
//! Pixel `(i, j)` (column, row) has its center at continuous `(i, j)`. A
//! coordinate outside `[0, W-1] x [0, H-1]` samples as zero.

use crate::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap<T> {
    pub offset: [usize; 4],
    pub weight: [T; 4],
}

impl<T: Scalar> Tap<T> {
    fn empty() -> Self {
        Self {
            offset: [0; 4],
            weight: [T::zero(); 4],
        }
    }
}

/// Interpolation taps for one coordinate against an `h x w` plane.
pub(crate) fn bilinear_tap<T: Scalar>(x: T, y: T, h: usize, w: usize) -> Tap<T> {
    let (xf, yf) = (x.as_f64(), y.as_f64());
    if !(0.0..=(w - 1) as f64).contains(&xf) || !(0.0..=(h - 1) as f64).contains(&yf) {
        return Tap::empty();
    }
    let x0 = xf.floor() as usize;
    let y0 = yf.floor() as usize;
    let fx = x - T::lit(x0 as f64);
    let fy = y - T::lit(y0 as f64);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let one = T::one();
    Tap {
        offset: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        weight: [
            (one - fx) * (one - fy),
            fx * (one - fy),
            (one - fx) * fy,
            fx * fy,
        ],
    }
}

/// Channel-last copy `[B, H*W, C]` of a `[B, C, H, W]` buffer.
pub(crate) fn to_channel_last<T: Scalar>(f: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); f.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &f[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (p, &v) in src.iter().enumerate() {
                out[(bi * hw + p) * c + ci] = v;
            }
        }
    }
    out
}

pub(crate) fn from_channel_last<T: Scalar>(f: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); f.len()];
    for bi in 0..b {
        for p in 0..hw {
            let src = &f[(bi * hw + p) * c..(bi * hw + p + 1) * c];
            for (ci, &v) in src.iter().enumerate() {
                out[(bi * c + ci) * hw + p] = v;
            }
        }
    }
    out
}

/// `taps` is `[B, N]`; returns `[B, N, C]`.
pub(crate) fn sample_forward<T: Scalar>(
    features_cl: &[T],
    taps: &[Tap<T>],
    b: usize,
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); b * n * c];
    for bi in 0..b {
        let plane = &features_cl[bi * hw * c..(bi + 1) * hw * c];
        for ni in 0..n {
            let tap = &taps[bi * n + ni];
            let dst = &mut out[(bi * n + ni) * c..(bi * n + ni + 1) * c];
            for t in 0..4 {
                let wt = tap.weight[t];
                if wt == T::zero() {
                    continue;
                }
                let src = &plane[tap.offset[t] * c..(tap.offset[t] + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. features, returned channel-last `[B, H*W, C]`.
pub(crate) fn sample_backward<T: Scalar>(
    dout: &[T],
    taps: &[Tap<T>],
    b: usize,
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<T> {
    let mut grad = vec![T::zero(); b * hw * c];
    for bi in 0..b {
        let plane = &mut grad[bi * hw * c..(bi + 1) * hw * c];
        for ni in 0..n {
            let tap = &taps[bi * n + ni];
            let src = &dout[(bi * n + ni) * c..(bi * n + ni + 1) * c];
            for t in 0..4 {
                let wt = tap.weight[t];
                if wt == T::zero() {
                    continue;
                }
                let dst = &mut plane[tap.offset[t] * c..(tap.offset[t] + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    grad
}
