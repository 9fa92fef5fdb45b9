//! Raw loops behind the differentiable operators. Everything here works on
//! flat slices of one batch item and trusts its caller for shape checks.

use super::Float;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1×1, stride 1, unpadded convolution reads its input as the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose tap `k` lands inside an input line of
/// length `len`.
fn valid_span(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ix = o·stride + k − pad must lie in [0, len)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold one `in_c × in_h × in_w` item into a `patch_len × out_plane` matrix.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for ci in 0..g.in_c {
        let src = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            let (y_lo, y_hi) = valid_span(g.out_h, g.in_h, ky, g.stride, g.pad);
            for kx in 0..g.k_w {
                let (x_lo, x_hi) = valid_span(g.out_w, g.in_w, kx, g.stride, g.pad);
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst[..y_lo * g.out_w].fill(T::zero());
                dst[y_hi * g.out_w..].fill(T::zero());
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &src[iy * g.in_w..(iy + 1) * g.in_w];
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    line[..x_lo].fill(T::zero());
                    line[x_hi..].fill(T::zero());
                    if x_hi > x_lo {
                        let ix0 = x_lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            line[x_lo..x_hi].copy_from_slice(&srow[ix0..ix0 + x_hi - x_lo]);
                        } else {
                            for (slot, &v) in line[x_lo..x_hi].iter_mut().zip(srow[ix0..].iter().step_by(g.stride)) {
                                *slot = v;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto an item.
pub(crate) fn col2im_add<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for ci in 0..g.in_c {
        let dst = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            let (y_lo, y_hi) = valid_span(g.out_h, g.in_h, ky, g.stride, g.pad);
            for kx in 0..g.k_w {
                let (x_lo, x_hi) = valid_span(g.out_w, g.in_w, kx, g.stride, g.pad);
                let src = &cols[row * plane..(row + 1) * plane];
                row += 1;
                if x_hi <= x_lo {
                    continue;
                }
                let ix0 = x_lo * g.stride + kx - g.pad;
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut dst[iy * g.in_w..(iy + 1) * g.in_w];
                    let line = &src[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                    if g.stride == 1 {
                        for (d, &v) in drow[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in drow[ix0..].iter_mut().step_by(g.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a whole batch. `out` holds `batch × out_c × out_plane`.
pub(crate) fn conv_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom, batch: usize, out: &mut [T]) {
    let k = g.patch_len();
    let n = g.out_plane();
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * n;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * n]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let patches: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        T::gemm(
            g.out_c,
            k,
            n,
            w,
            (k as isize, 1),
            patches,
            (n as isize, 1),
            T::zero(),
            ob,
        );
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_exact_mut(n).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Backward convolution. Each gradient buffer is optional and accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Float>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    batch: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let k = g.patch_len();
    let n = g.out_plane();
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * n;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * n] };
    let mut dcols = if dx.is_some() && !pointwise {
        vec![T::zero(); k * n]
    } else {
        Vec::new()
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let db = &dout[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_deref_mut() {
            let patches: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW (out_c × k) += dOut (out_c × n) · patchesᵀ (n × k)
            T::gemm(
                g.out_c,
                n,
                k,
                db,
                (n as isize, 1),
                patches,
                (1, n as isize),
                T::one(),
                dw,
            );
        }
        if let Some(dbias) = dbias.as_deref_mut() {
            for (co, row) in db.chunks_exact(n).enumerate() {
                let mut s = T::zero();
                for &v in row {
                    s += v;
                }
                dbias[co] += s;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                // dX (k × n) += Wᵀ · dOut
                T::gemm(k, g.out_c, n, w, (1, k as isize), db, (n as isize, 1), T::one(), dxb);
            } else {
                T::gemm(
                    k,
                    g.out_c,
                    n,
                    w,
                    (1, k as isize),
                    db,
                    (n as isize, 1),
                    T::zero(),
                    &mut dcols,
                );
                col2im_add(&dcols, g, dxb);
            }
        }
    }
}

/// Source taps for one output coordinate of a half-pixel-centred bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

pub(crate) fn bilinear_taps<T: Float>(n_in: usize, factor: usize) -> Vec<Tap<T>> {
    let f = factor as f64;
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: T::from_f64(1.0 - w1),
                w1: T::from_f64(w1),
            }
        })
        .collect()
}

/// Upsample `planes` consecutive `h × w` planes by `factor`.
pub(crate) fn upsample_forward<T: Float>(x: &[T], planes: usize, h: usize, w: usize, factor: usize, out: &mut [T]) {
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            let r0 = &src[ry.i0 * w..(ry.i0 + 1) * w];
            let r1 = &src[ry.i1 * w..(ry.i1 + 1) * w];
            let line = &mut dst[oy * ow..(oy + 1) * ow];
            // lerp form, so equal taps reproduce their value exactly
            for (slot, cx) in line.iter_mut().zip(&tx) {
                let top = r0[cx.i0] + cx.w1 * (r0[cx.i1] - r0[cx.i0]);
                let bot = r1[cx.i0] + cx.w1 * (r1[cx.i1] - r1[cx.i0]);
                *slot = top + ry.w1 * (bot - top);
            }
        }
    }
}

pub(crate) fn upsample_backward<T: Float>(dout: &[T], planes: usize, h: usize, w: usize, factor: usize, dx: &mut [T]) {
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            let line = &src[oy * ow..(oy + 1) * ow];
            for (&g, cx) in line.iter().zip(&tx) {
                let gt = ry.w0 * g;
                let gb = ry.w1 * g;
                dst[ry.i0 * w + cx.i0] += cx.w0 * gt;
                dst[ry.i0 * w + cx.i1] += cx.w1 * gt;
                dst[ry.i1 * w + cx.i0] += cx.w0 * gb;
                dst[ry.i1 * w + cx.i1] += cx.w1 * gb;
            }
        }
    }
}
