//! Strided cross-correlation kernels shared by conv, transposed conv and
//! their backward passes.
//!
//! Layouts: activations are `[C, D, H, W]` (3D) or `[C, H, W]` (2D), weights
//! `[A, B, kd, kh, kw]` row-major. The transposed convolution reuses these
//! three kernels with the roles of the channel axes swapped, so no weight
//! transposition is ever materialized.

use crate::scalar::Scalar;

/// Valid output-index range `[lo, hi)` for one kernel offset along one axis:
/// all `q` in `[0, n_out)` with `0 <= q*stride + k - pad < n_in`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    let hi_in = n_in + pad;
    if hi_in <= k {
        return (0, 0);
    }
    let hi = ((hi_in - 1 - k) / stride + 1).min(n_out);
    (lo, hi.max(lo))
}

/// One fused multiply-accumulate row: `out[j] += w * inp[j*stride]`.
#[inline]
fn axpy_row<T: Scalar>(out: &mut [T], inp: &[T], w: T, stride: usize) {
    if stride == 1 {
        for (o, i) in out.iter_mut().zip(inp.iter()) {
            *o = *o + w * *i;
        }
    } else {
        for (j, o) in out.iter_mut().enumerate() {
            *o = *o + w * inp[j * stride];
        }
    }
}

/// Dot of an output-row gradient with a strided input row.
#[inline]
fn dot_row<T: Scalar>(g: &[T], inp: &[T], stride: usize) -> T {
    let mut acc = T::zero();
    if stride == 1 {
        for (a, b) in g.iter().zip(inp.iter()) {
            acc = acc + *a * *b;
        }
    } else {
        for (j, a) in g.iter().enumerate() {
            acc = acc + *a * inp[j * stride];
        }
    }
    acc
}

/// Scatter one row: `out[j*stride] += w * g[j]`.
#[inline]
fn scatter_row<T: Scalar>(out: &mut [T], g: &[T], w: T, stride: usize) {
    if stride == 1 {
        for (o, i) in out.iter_mut().zip(g.iter()) {
            *o = *o + w * *i;
        }
    } else {
        for (j, i) in g.iter().enumerate() {
            out[j * stride] = out[j * stride] + w * *i;
        }
    }
}

/// y[a, q] += sum_{b,k} w[a,b,k] * x[b, q*s + k - p]; `y` preallocated.
#[allow(clippy::too_many_arguments)]
pub fn gather3<T: Scalar>(
    x: &[T],
    bc: usize,
    xd: [usize; 3],
    w: &[T],
    ac: usize,
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    y: &mut [T],
    yd: [usize; 3],
) {
    let xvol = xd[0] * xd[1] * xd[2];
    let yvol = yd[0] * yd[1] * yd[2];
    let kvol = k[0] * k[1] * k[2];
    for a in 0..ac {
        let ybase = a * yvol;
        for b in 0..bc {
            let xbase = b * xvol;
            let wbase = (a * bc + b) * kvol;
            for kd in 0..k[0] {
                let (qd_lo, qd_hi) = valid_range(kd, p[0], s[0], xd[0], yd[0]);
                for kh in 0..k[1] {
                    let (qh_lo, qh_hi) = valid_range(kh, p[1], s[1], xd[1], yd[1]);
                    for kw in 0..k[2] {
                        let (qw_lo, qw_hi) = valid_range(kw, p[2], s[2], xd[2], yd[2]);
                        if qw_lo >= qw_hi {
                            continue;
                        }
                        let wv = w[wbase + (kd * k[1] + kh) * k[2] + kw];
                        if wv == T::zero() {
                            continue;
                        }
                        for qd in qd_lo..qd_hi {
                            let id = qd * s[0] + kd - p[0];
                            for qh in qh_lo..qh_hi {
                                let ih = qh * s[1] + kh - p[1];
                                let iw0 = qw_lo * s[2] + kw - p[2];
                                let yoff = ybase + (qd * yd[1] + qh) * yd[2] + qw_lo;
                                let xoff = xbase + (id * xd[1] + ih) * xd[2] + iw0;
                                let n = qw_hi - qw_lo;
                                axpy_row(
                                    &mut y[yoff..yoff + n],
                                    &x[xoff..xoff + (n - 1) * s[2] + 1],
                                    wv,
                                    s[2],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dx[b, q*s + k - p] += sum_{a,k} w[a,b,k] * g[a, q]; `dx` preallocated.
#[allow(clippy::too_many_arguments)]
pub fn scatter3<T: Scalar>(
    g: &[T],
    ac: usize,
    gd: [usize; 3],
    w: &[T],
    bc: usize,
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    dx: &mut [T],
    xd: [usize; 3],
) {
    let gvol = gd[0] * gd[1] * gd[2];
    let xvol = xd[0] * xd[1] * xd[2];
    let kvol = k[0] * k[1] * k[2];
    for b in 0..bc {
        let xbase = b * xvol;
        for a in 0..ac {
            let gbase = a * gvol;
            let wbase = (a * bc + b) * kvol;
            for kd in 0..k[0] {
                let (qd_lo, qd_hi) = valid_range(kd, p[0], s[0], xd[0], gd[0]);
                for kh in 0..k[1] {
                    let (qh_lo, qh_hi) = valid_range(kh, p[1], s[1], xd[1], gd[1]);
                    for kw in 0..k[2] {
                        let (qw_lo, qw_hi) = valid_range(kw, p[2], s[2], xd[2], gd[2]);
                        if qw_lo >= qw_hi {
                            continue;
                        }
                        let wv = w[wbase + (kd * k[1] + kh) * k[2] + kw];
                        if wv == T::zero() {
                            continue;
                        }
                        for qd in qd_lo..qd_hi {
                            let id = qd * s[0] + kd - p[0];
                            for qh in qh_lo..qh_hi {
                                let ih = qh * s[1] + kh - p[1];
                                let iw0 = qw_lo * s[2] + kw - p[2];
                                let goff = gbase + (qd * gd[1] + qh) * gd[2] + qw_lo;
                                let xoff = xbase + (id * xd[1] + ih) * xd[2] + iw0;
                                let n = qw_hi - qw_lo;
                                scatter_row(
                                    &mut dx[xoff..xoff + (n - 1) * s[2] + 1],
                                    &g[goff..goff + n],
                                    wv,
                                    s[2],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dw[a,b,k] += sum_q g[a,q] * x[b, q*s + k - p]; `dw` preallocated.
#[allow(clippy::too_many_arguments)]
pub fn weight_grad3<T: Scalar>(
    x: &[T],
    bc: usize,
    xd: [usize; 3],
    g: &[T],
    ac: usize,
    gd: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    dw: &mut [T],
) {
    let xvol = xd[0] * xd[1] * xd[2];
    let gvol = gd[0] * gd[1] * gd[2];
    let kvol = k[0] * k[1] * k[2];
    for a in 0..ac {
        let gbase = a * gvol;
        for b in 0..bc {
            let xbase = b * xvol;
            let wbase = (a * bc + b) * kvol;
            for kd in 0..k[0] {
                let (qd_lo, qd_hi) = valid_range(kd, p[0], s[0], xd[0], gd[0]);
                for kh in 0..k[1] {
                    let (qh_lo, qh_hi) = valid_range(kh, p[1], s[1], xd[1], gd[1]);
                    for kw in 0..k[2] {
                        let (qw_lo, qw_hi) = valid_range(kw, p[2], s[2], xd[2], gd[2]);
                        if qw_lo >= qw_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for qd in qd_lo..qd_hi {
                            let id = qd * s[0] + kd - p[0];
                            for qh in qh_lo..qh_hi {
                                let ih = qh * s[1] + kh - p[1];
                                let iw0 = qw_lo * s[2] + kw - p[2];
                                let goff = gbase + (qd * gd[1] + qh) * gd[2] + qw_lo;
                                let xoff = xbase + (id * xd[1] + ih) * xd[2] + iw0;
                                let n = qw_hi - qw_lo;
                                acc = acc
                                    + dot_row(
                                        &g[goff..goff + n],
                                        &x[xoff..xoff + (n - 1) * s[2] + 1],
                                        s[2],
                                    );
                            }
                        }
                        dw[wbase + (kd * k[1] + kh) * k[2] + kw] =
                            dw[wbase + (kd * k[1] + kh) * k[2] + kw] + acc;
                    }
                }
            }
        }
    }
}

/// 2D variants: delegate to the 3D kernels with a unit leading axis.
#[allow(clippy::too_many_arguments)]
pub fn gather2<T: Scalar>(
    x: &[T],
    bc: usize,
    xd: [usize; 2],
    w: &[T],
    ac: usize,
    k: [usize; 2],
    s: [usize; 2],
    p: [usize; 2],
    y: &mut [T],
    yd: [usize; 2],
) {
    gather3(
        x,
        bc,
        [1, xd[0], xd[1]],
        w,
        ac,
        [1, k[0], k[1]],
        [1, s[0], s[1]],
        [0, p[0], p[1]],
        y,
        [1, yd[0], yd[1]],
    );
}

#[allow(clippy::too_many_arguments)]
pub fn scatter2<T: Scalar>(
    g: &[T],
    ac: usize,
    gd: [usize; 2],
    w: &[T],
    bc: usize,
    k: [usize; 2],
    s: [usize; 2],
    p: [usize; 2],
    dx: &mut [T],
    xd: [usize; 2],
) {
    scatter3(
        g,
        ac,
        [1, gd[0], gd[1]],
        w,
        bc,
        [1, k[0], k[1]],
        [1, s[0], s[1]],
        [0, p[0], p[1]],
        dx,
        [1, xd[0], xd[1]],
    );
}

#[allow(clippy::too_many_arguments)]
pub fn weight_grad2<T: Scalar>(
    x: &[T],
    bc: usize,
    xd: [usize; 2],
    g: &[T],
    ac: usize,
    gd: [usize; 2],
    k: [usize; 2],
    s: [usize; 2],
    p: [usize; 2],
    dw: &mut [T],
) {
    weight_grad3(
        x,
        bc,
        [1, xd[0], xd[1]],
        g,
        ac,
        [1, gd[0], gd[1]],
        [1, k[0], k[1]],
        [1, s[0], s[1]],
        [0, p[0], p[1]],
        dw,
    );
}
