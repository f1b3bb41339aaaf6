//! 2D convolution kernels (im2col + GEMM) and window-2 pooling helpers.

use crate::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output index range `[lo, hi)` for which `o * stride + offset - pad` lands in `[0, len)`.
fn valid_range(len: usize, out_len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < out_len && (lo * stride + offset) < pad {
        lo += 1;
    }
    let mut hi = out_len;
    while hi > lo && ((hi - 1) * stride + offset) >= pad + len {
        hi -= 1;
    }
    (lo, hi)
}

/// Target size (elements) of one im2col tile, small enough to stay cache resident.
const TILE_ELEMS: usize = 1 << 18;

/// Output rows per tile for these dimensions.
fn tile_rows(d: &ConvDims) -> usize {
    (TILE_ELEMS / (d.patch_len() * d.wo).max(1)).clamp(1, d.ho)
}

/// Patch matrix `[cin*k*k, (oy1-oy0)*wo]` for output rows `oy0..oy1`.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, oy0: usize, oy1: usize, col: &mut [T]) {
    let p = (oy1 - oy0) * d.wo;
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            let (ylo, yhi) = valid_range(d.h, d.ho, d.stride, ki, d.pad);
            let (ylo, yhi) = (ylo.max(oy0), yhi.min(oy1));
            for kj in 0..d.k {
                let row = &mut col[((c * d.k + ki) * d.k + kj) * p..][..p];
                row.fill(T::zero());
                let (xlo, xhi) = valid_range(d.w, d.wo, d.stride, kj, d.pad);
                for oy in ylo..yhi {
                    let iy = oy * d.stride + ki - d.pad;
                    let src = &plane[iy * d.w..(iy + 1) * d.w];
                    let dst = &mut row[(oy - oy0) * d.wo..(oy - oy0 + 1) * d.wo];
                    if d.stride == 1 {
                        let ix0 = xlo + kj - d.pad;
                        dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[ox * d.stride + kj - d.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix tile for output rows `oy0..oy1` back into `dx`.
fn col2im<T: Scalar>(col: &[T], d: &ConvDims, oy0: usize, oy1: usize, dx: &mut [T]) {
    let p = (oy1 - oy0) * d.wo;
    for c in 0..d.cin {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            let (ylo, yhi) = valid_range(d.h, d.ho, d.stride, ki, d.pad);
            let (ylo, yhi) = (ylo.max(oy0), yhi.min(oy1));
            for kj in 0..d.k {
                let row = &col[((c * d.k + ki) * d.k + kj) * p..][..p];
                let (xlo, xhi) = valid_range(d.w, d.wo, d.stride, kj, d.pad);
                for oy in ylo..yhi {
                    let iy = oy * d.stride + ki - d.pad;
                    let src = &row[(oy - oy0) * d.wo..(oy - oy0 + 1) * d.wo];
                    if d.stride == 1 {
                        let ix0 = xlo + kj - d.pad;
                        let dst = &mut plane[iy * d.w + ix0..iy * d.w + ix0 + (xhi - xlo)];
                        dst.iter_mut().zip(&src[xlo..xhi]).for_each(|(a, &b)| *a += b);
                    } else {
                        for ox in xlo..xhi {
                            plane[iy * d.w + ox * d.stride + kj - d.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let p = d.out_pixels();
    let kk = d.patch_len();
    let mut out = vec![T::zero(); d.batch * d.cout * p];
    let rows = tile_rows(d);
    let mut col = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * rows * d.wo] };
    for b in 0..d.batch {
        let xb = &x[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
        let ob = &mut out[b * d.cout * p..(b + 1) * d.cout * p];
        for (co, row) in ob.chunks_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        if d.is_pointwise() {
            T::gemm(d.cout, kk, p, T::one(), w, (kk as isize, 1), xb, (p as isize, 1), T::one(), ob, (p as isize, 1));
            continue;
        }
        for oy0 in (0..d.ho).step_by(rows) {
            let oy1 = (oy0 + rows).min(d.ho);
            let tp = (oy1 - oy0) * d.wo;
            im2col(xb, d, oy0, oy1, &mut col);
            T::gemm(
                d.cout,
                kk,
                tp,
                T::one(),
                w,
                (kk as isize, 1),
                &col[..kk * tp],
                (tp as isize, 1),
                T::one(),
                &mut ob[oy0 * d.wo..],
                (p as isize, 1),
            );
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is only computed when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    d: &ConvDims,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let p = d.out_pixels();
    let kk = d.patch_len();
    let mut dw = vec![T::zero(); d.cout * kk];
    let mut db = vec![T::zero(); d.cout];
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let rows = if d.is_pointwise() { d.ho } else { tile_rows(d) };
    let mut col = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * rows * d.wo] };
    let mut dcol = if want_dx && !d.is_pointwise() { vec![T::zero(); kk * rows * d.wo] } else { Vec::new() };

    for b in 0..d.batch {
        let xb = &x[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
        let gb = &dout[b * d.cout * p..(b + 1) * d.cout * p];
        for (co, row) in gb.chunks(p).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
        let mut dxb = dx.as_mut().map(|dx| &mut dx[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w]);
        for oy0 in (0..d.ho).step_by(rows) {
            let oy1 = (oy0 + rows).min(d.ho);
            let tp = (oy1 - oy0) * d.wo;
            let g_tile = &gb[oy0 * d.wo..];
            let cols: &[T] = if d.is_pointwise() {
                &xb[oy0 * d.wo..]
            } else {
                im2col(xb, d, oy0, oy1, &mut col);
                &col[..kk * tp]
            };
            let col_rs = if d.is_pointwise() { p } else { tp } as isize;
            // dW^T += cols * dOut_tile^T
            T::gemm(kk, tp, d.cout, T::one(), cols, (col_rs, 1), g_tile, (1, p as isize), T::one(), &mut dw, (1, kk as isize));
            if let Some(dxb) = dxb.as_deref_mut() {
                if d.is_pointwise() {
                    T::gemm(kk, d.cout, tp, T::one(), w, (1, kk as isize), g_tile, (p as isize, 1), T::zero(), &mut dxb[oy0 * d.wo..], (p as isize, 1));
                } else {
                    T::gemm(kk, d.cout, tp, T::one(), w, (1, kk as isize), g_tile, (p as isize, 1), T::zero(), &mut dcol[..kk * tp], (tp as isize, 1));
                    col2im(&dcol[..kk * tp], d, oy0, oy1, dxb);
                }
            }
        }
    }
    (dx, dw, db)
}
