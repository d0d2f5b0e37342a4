//! Plane-level convolution kernels shared by the strided convolution, its
//! transpose, and their backward passes.
//!
//! All three routines walk the same index map `big = small * stride + k - pad`
//! and differ only in which side is read and which is accumulated into.

/// Range of `o` in `0..out_len` such that `o * stride + k - pad` lies in `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if in_len + pad <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Plane geometry for one kernel application: `small` is the strided side.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub small_h: usize,
    pub small_w: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[cfg(test)]
/// `small[o] += sum_k w[k] * big[o * s + k - p]` (strided correlation).
pub(crate) fn gather(small: &mut [f64], big: &[f64], w: &[f64], g: Geometry) {
    for ky in 0..g.k {
        let (oy0, oy1) = valid_range(g.small_h, g.big_h, ky, g.stride, g.pad);
        for kx in 0..g.k {
            let wv = w[ky * g.k + kx];
            if wv == 0.0 {
                continue;
            }
            let (ox0, ox1) = valid_range(g.small_w, g.big_w, kx, g.stride, g.pad);
            for oy in oy0..oy1 {
                let iy = oy * g.stride + ky - g.pad;
                let src = &big[iy * g.big_w..(iy + 1) * g.big_w];
                let dst = &mut small[oy * g.small_w..(oy + 1) * g.small_w];
                for ox in ox0..ox1 {
                    dst[ox] += wv * src[ox * g.stride + kx - g.pad];
                }
            }
        }
    }
}

#[cfg(test)]
/// `big[o * s + k - p] += w[k] * small[o]` (adjoint of [`gather`]).
pub(crate) fn scatter(big: &mut [f64], small: &[f64], w: &[f64], g: Geometry) {
    for ky in 0..g.k {
        let (oy0, oy1) = valid_range(g.small_h, g.big_h, ky, g.stride, g.pad);
        for kx in 0..g.k {
            let wv = w[ky * g.k + kx];
            if wv == 0.0 {
                continue;
            }
            let (ox0, ox1) = valid_range(g.small_w, g.big_w, kx, g.stride, g.pad);
            for oy in oy0..oy1 {
                let iy = oy * g.stride + ky - g.pad;
                let src = &small[oy * g.small_w..(oy + 1) * g.small_w];
                let dst = &mut big[iy * g.big_w..(iy + 1) * g.big_w];
                for ox in ox0..ox1 {
                    dst[ox * g.stride + kx - g.pad] += wv * src[ox];
                }
            }
        }
    }
}

#[cfg(test)]
/// `dw[k] += sum_o small[o] * big[o * s + k - p]`.
pub(crate) fn weight_corr(dw: &mut [f64], big: &[f64], small: &[f64], g: Geometry) {
    for ky in 0..g.k {
        let (oy0, oy1) = valid_range(g.small_h, g.big_h, ky, g.stride, g.pad);
        for kx in 0..g.k {
            let (ox0, ox1) = valid_range(g.small_w, g.big_w, kx, g.stride, g.pad);
            let mut acc = 0.0;
            for oy in oy0..oy1 {
                let iy = oy * g.stride + ky - g.pad;
                let b = &big[iy * g.big_w..(iy + 1) * g.big_w];
                let s = &small[oy * g.small_w..(oy + 1) * g.small_w];
                for ox in ox0..ox1 {
                    acc += s[ox] * b[ox * g.stride + kx - g.pad];
                }
            }
            dw[ky * g.k + kx] += acc;
        }
    }
}

/// Shape bookkeeping for a batched multi-channel convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub c_small: usize,
    pub c_big: usize,
    pub geo: Geometry,
}

impl ConvShape {
    fn small_plane(&self) -> usize {
        self.geo.small_h * self.geo.small_w
    }
    fn big_plane(&self) -> usize {
        self.geo.big_h * self.geo.big_w
    }
    fn kk(&self) -> usize {
        self.geo.k * self.geo.k
    }
}

#[cfg(test)]
/// Offset of the `(cs, cb)` kernel; weights are laid out `[c_small, c_big, k, k]`.
#[inline]
fn widx(s: &ConvShape, cs: usize, cb: usize) -> usize {
    (cs * s.c_big + cb) * s.kk()
}

/// Unfolds the `[c_big, big_h, big_w]` planes of one batch entry into a
/// `[c_big * k * k, small_h * small_w]` matrix (zero where the tap falls in
/// the padding).
fn im2col(cols: &mut [f64], big: &[f64], s: ConvShape) {
    let g = s.geo;
    let sp = s.small_plane();
    let bp = s.big_plane();
    cols.fill(0.0);
    for cb in 0..s.c_big {
        let plane = &big[cb * bp..(cb + 1) * bp];
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(g.small_h, g.big_h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(g.small_w, g.big_w, kx, g.stride, g.pad);
                let row = &mut cols[((cb * g.k + ky) * g.k + kx) * sp..][..sp];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.big_w..(iy + 1) * g.big_w];
                    let dst = &mut row[oy * g.small_w..(oy + 1) * g.small_w];
                    for ox in ox0..ox1 {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the columns back into the planes.
fn col2im(big: &mut [f64], cols: &[f64], s: ConvShape) {
    let g = s.geo;
    let sp = s.small_plane();
    let bp = s.big_plane();
    for cb in 0..s.c_big {
        let plane = &mut big[cb * bp..(cb + 1) * bp];
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(g.small_h, g.big_h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(g.small_w, g.big_w, kx, g.stride, g.pad);
                let row = &cols[((cb * g.k + ky) * g.k + kx) * sp..][..sp];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.big_w..(iy + 1) * g.big_w];
                    let src = &row[oy * g.small_w..(oy + 1) * g.small_w];
                    for ox in ox0..ox1 {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// Row-major matrix operand: `rows x cols` view with explicit strides so
/// transposes need no copy.
struct Mat<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

/// `c = a * b + beta * c` for row-major `c` of shape `m x n`.
fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    let span = |rows: usize, cols: usize, mat: &Mat<'_>| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * mat.rs + (cols - 1) as isize * mat.cs) as usize + 1
        }
    };
    assert!(a.data.len() >= span(m, k, &a) && b.data.len() >= span(k, n, &b) && c.len() >= m * n);
    // SAFETY: the assertion above keeps every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched gather: `small[n, cs] += sum_cb big[n, cb] (*) w[cs, cb]`.
pub(crate) fn batched_gather(small: &mut [f64], big: &[f64], w: &[f64], s: ConvShape) {
    let (sp, bp, ckk) = (s.small_plane(), s.big_plane(), s.c_big * s.kk());
    let mut cols = vec![0.0; ckk * sp];
    for n in 0..s.batch {
        im2col(&mut cols, &big[n * s.c_big * bp..(n + 1) * s.c_big * bp], s);
        let out = &mut small[n * s.c_small * sp..(n + 1) * s.c_small * sp];
        let a = Mat { data: w, rs: ckk as isize, cs: 1 };
        let b = Mat { data: &cols, rs: sp as isize, cs: 1 };
        gemm(s.c_small, ckk, sp, a, b, 1.0, out);
    }
}

/// Batched scatter: `big[n, cb] += sum_cs small[n, cs] (*)^T w[cs, cb]`.
pub(crate) fn batched_scatter(big: &mut [f64], small: &[f64], w: &[f64], s: ConvShape) {
    let (sp, bp, ckk) = (s.small_plane(), s.big_plane(), s.c_big * s.kk());
    let mut cols = vec![0.0; ckk * sp];
    for n in 0..s.batch {
        let a = Mat { data: w, rs: 1, cs: ckk as isize };
        let b = Mat {
            data: &small[n * s.c_small * sp..(n + 1) * s.c_small * sp],
            rs: sp as isize,
            cs: 1,
        };
        gemm(ckk, s.c_small, sp, a, b, 0.0, &mut cols);
        col2im(&mut big[n * s.c_big * bp..(n + 1) * s.c_big * bp], &cols, s);
    }
}

/// Weight gradient, reduced over the batch in a fixed order.
pub(crate) fn batched_weight_grad(big: &[f64], small: &[f64], s: ConvShape) -> Vec<f64> {
    let (sp, bp, ckk) = (s.small_plane(), s.big_plane(), s.c_big * s.kk());
    let mut cols = vec![0.0; ckk * sp];
    let mut dw = vec![0.0; s.c_small * ckk];
    for n in 0..s.batch {
        im2col(&mut cols, &big[n * s.c_big * bp..(n + 1) * s.c_big * bp], s);
        let a = Mat {
            data: &small[n * s.c_small * sp..(n + 1) * s.c_small * sp],
            rs: sp as isize,
            cs: 1,
        };
        let b = Mat { data: &cols, rs: 1, cs: sp as isize };
        gemm(s.c_small, sp, ckk, a, b, 1.0, &mut dw);
    }
    dw
}
