//! Numeric kernels behind the graph ops.
//!
//! Every kernel is deterministic: parallel work splits over disjoint
//! output chunks and each chunk accumulates in a fixed sequential
//! order, so results do not depend on thread count or scheduling.

use super::{Dims5, Element};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub co: usize,
    pub ci: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        if shape.len() != 5 {
            return None;
        }
        Some(ConvDims {
            co: shape[0],
            ci: shape[1],
            kd: shape[2],
            kh: shape[3],
            kw: shape[4],
        })
    }

    pub fn kernel_len(&self) -> usize {
        self.kd * self.kh * self.kw
    }

    fn idx(&self, co: usize, ci: usize, kd: usize, kh: usize, kw: usize) -> usize {
        (((co * self.ci + ci) * self.kd + kd) * self.kh + kh) * self.kw + kw
    }
}

pub fn conv_out_spatial(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_out_dims(xd: Dims5, wd: ConvDims, stride: usize, pad: usize) -> Option<Dims5> {
    Some(Dims5 {
        n: xd.n,
        c: wd.co,
        d: conv_out_spatial(xd.d, wd.kd, stride, pad)?,
        h: conv_out_spatial(xd.h, wd.kh, stride, pad)?,
        w: conv_out_spatial(xd.w, wd.kw, stride, pad)?,
    })
}

/// Range of output positions `o` with `0 <= o*stride + k - pad < limit`.
fn out_range(limit: usize, out_extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let mut lo = 0usize;
    if k < pad {
        // need o*stride >= pad - k
        lo = (pad - k + stride - 1) / stride;
    }
    // need o*stride <= limit - 1 + pad - k
    let top = limit as i64 - 1 + pad as i64 - k as i64;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top as usize) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

pub fn conv3d_forward<E: Element>(
    x: &[E],
    xd: Dims5,
    w: &[E],
    wd: ConvDims,
    bias: Option<&[E]>,
    stride: usize,
    pad: usize,
) -> (Vec<E>, Dims5) {
    let od = conv_out_dims(xd, wd, stride, pad).expect("validated by caller");
    let osp = od.spatial_len();
    let xsp = xd.spatial_len();
    let mut out = vec![E::ZERO; od.numel()];

    out.par_chunks_mut(osp).enumerate().for_each(|(chunk, o)| {
        let n = chunk / wd.co;
        let co = chunk % wd.co;
        if let Some(b) = bias {
            let bv = b[co];
            for v in o.iter_mut() {
                *v = bv;
            }
        }
        for ci in 0..wd.ci {
            let xbase = (n * xd.c + ci) * xsp;
            for kd in 0..wd.kd {
                let (d_lo, d_hi) = out_range(xd.d, od.d, kd, stride, pad);
                for kh in 0..wd.kh {
                    let (h_lo, h_hi) = out_range(xd.h, od.h, kh, stride, pad);
                    for kw in 0..wd.kw {
                        let (w_lo, w_hi) = out_range(xd.w, od.w, kw, stride, pad);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let wv = w[wd.idx(co, ci, kd, kh, kw)];
                        for op in d_lo..d_hi {
                            let ip = op * stride + kd - pad;
                            for oh in h_lo..h_hi {
                                let ih = oh * stride + kh - pad;
                                let orow = (op * od.h + oh) * od.w;
                                let xrow = xbase + (ip * xd.h + ih) * xd.w;
                                if stride == 1 {
                                    let xoff = xrow + w_lo + kw - pad;
                                    let dst = &mut o[orow + w_lo..orow + w_hi];
                                    let src = &x[xoff..xoff + (w_hi - w_lo)];
                                    for (d, &s) in dst.iter_mut().zip(src) {
                                        *d = wv.mul_add(s, *d);
                                    }
                                } else {
                                    for ow in w_lo..w_hi {
                                        let iw = ow * stride + kw - pad;
                                        o[orow + ow] = wv.mul_add(x[xrow + iw], o[orow + ow]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    (out, od)
}

/// Gradient w.r.t. the convolution input.
pub fn conv3d_backward_input<E: Element>(
    dy: &[E],
    od: Dims5,
    w: &[E],
    wd: ConvDims,
    xd: Dims5,
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let xsp = xd.spatial_len();
    let osp = od.spatial_len();
    let mut dx = vec![E::ZERO; xd.numel()];

    dx.par_chunks_mut(xsp).enumerate().for_each(|(chunk, g)| {
        let n = chunk / xd.c;
        let ci = chunk % xd.c;
        for co in 0..wd.co {
            let ybase = (n * od.c + co) * osp;
            for kd in 0..wd.kd {
                let (d_lo, d_hi) = out_range(xd.d, od.d, kd, stride, pad);
                for kh in 0..wd.kh {
                    let (h_lo, h_hi) = out_range(xd.h, od.h, kh, stride, pad);
                    for kw in 0..wd.kw {
                        let (w_lo, w_hi) = out_range(xd.w, od.w, kw, stride, pad);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let wv = w[wd.idx(co, ci, kd, kh, kw)];
                        for op in d_lo..d_hi {
                            let ip = op * stride + kd - pad;
                            for oh in h_lo..h_hi {
                                let ih = oh * stride + kh - pad;
                                let yrow = ybase + (op * od.h + oh) * od.w;
                                let grow = (ip * xd.h + ih) * xd.w;
                                if stride == 1 {
                                    let goff = grow + w_lo + kw - pad;
                                    let dst = &mut g[goff..goff + (w_hi - w_lo)];
                                    let src = &dy[yrow + w_lo..yrow + w_hi];
                                    for (d, &s) in dst.iter_mut().zip(src) {
                                        *d = wv.mul_add(s, *d);
                                    }
                                } else {
                                    for ow in w_lo..w_hi {
                                        let iw = ow * stride + kw - pad;
                                        g[grow + iw] = wv.mul_add(dy[yrow + ow], g[grow + iw]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient w.r.t. the convolution weights.
pub fn conv3d_backward_weight<E: Element>(
    dy: &[E],
    od: Dims5,
    x: &[E],
    xd: Dims5,
    wd: ConvDims,
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let xsp = xd.spatial_len();
    let osp = od.spatial_len();
    let per_co = wd.ci * wd.kernel_len();
    let mut dw = vec![E::ZERO; wd.co * per_co];

    dw.par_chunks_mut(per_co).enumerate().for_each(|(co, g)| {
        for n in 0..xd.n {
            let ybase = (n * od.c + co) * osp;
            for ci in 0..wd.ci {
                let xbase = (n * xd.c + ci) * xsp;
                for kd in 0..wd.kd {
                    let (d_lo, d_hi) = out_range(xd.d, od.d, kd, stride, pad);
                    for kh in 0..wd.kh {
                        let (h_lo, h_hi) = out_range(xd.h, od.h, kh, stride, pad);
                        for kw in 0..wd.kw {
                            let (w_lo, w_hi) = out_range(xd.w, od.w, kw, stride, pad);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let mut acc = E::ZERO;
                            for op in d_lo..d_hi {
                                let ip = op * stride + kd - pad;
                                for oh in h_lo..h_hi {
                                    let ih = oh * stride + kh - pad;
                                    let yrow = ybase + (op * od.h + oh) * od.w;
                                    let xrow = xbase + (ip * xd.h + ih) * xd.w;
                                    if stride == 1 {
                                        let xoff = xrow + w_lo + kw - pad;
                                        let ys = &dy[yrow + w_lo..yrow + w_hi];
                                        let xs = &x[xoff..xoff + (w_hi - w_lo)];
                                        for (&yv, &xv) in ys.iter().zip(xs) {
                                            acc = yv.mul_add(xv, acc);
                                        }
                                    } else {
                                        for ow in w_lo..w_hi {
                                            let iw = ow * stride + kw - pad;
                                            acc = dy[yrow + ow].mul_add(x[xrow + iw], acc);
                                        }
                                    }
                                }
                            }
                            g[(ci * wd.kd + kd) * wd.kh * wd.kw + kh * wd.kw + kw] += acc;
                        }
                    }
                }
            }
        }
    });
    dw
}

/// Gradient w.r.t. the convolution bias: sum of `dy` per out channel.
pub fn conv3d_backward_bias<E: Element>(dy: &[E], od: Dims5) -> Vec<E> {
    let osp = od.spatial_len();
    let mut db = vec![E::ZERO; od.c];
    for n in 0..od.n {
        for (co, slot) in db.iter_mut().enumerate() {
            let base = (n * od.c + co) * osp;
            let mut acc = E::ZERO;
            for &v in &dy[base..base + osp] {
                acc += v;
            }
            *slot += acc;
        }
    }
    db
}

pub fn upsample_out_dims(xd: Dims5, factor: usize) -> Dims5 {
    Dims5 {
        n: xd.n,
        c: xd.c,
        d: xd.d * factor,
        h: xd.h * factor,
        w: xd.w * factor,
    }
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample3d_forward<E: Element>(x: &[E], xd: Dims5, factor: usize) -> (Vec<E>, Dims5) {
    let od = upsample_out_dims(xd, factor);
    let osp = od.spatial_len();
    let xsp = xd.spatial_len();
    let mut out = vec![E::ZERO; od.numel()];
    out.par_chunks_mut(osp).enumerate().for_each(|(chunk, o)| {
        let base = chunk * xsp;
        for od_ in 0..od.d {
            let id = od_ / factor;
            for oh in 0..od.h {
                let ih = oh / factor;
                let xrow = base + (id * xd.h + ih) * xd.w;
                let orow = (od_ * od.h + oh) * od.w;
                for ow in 0..od.w {
                    o[orow + ow] = x[xrow + ow / factor];
                }
            }
        }
    });
    (out, od)
}

pub fn upsample3d_backward<E: Element>(dy: &[E], od: Dims5, xd: Dims5, factor: usize) -> Vec<E> {
    let osp = od.spatial_len();
    let xsp = xd.spatial_len();
    let mut dx = vec![E::ZERO; xd.numel()];
    dx.par_chunks_mut(xsp).enumerate().for_each(|(chunk, g)| {
        let base = chunk * osp;
        for od_ in 0..od.d {
            let id = od_ / factor;
            for oh in 0..od.h {
                let ih = oh / factor;
                let yrow = base + (od_ * od.h + oh) * od.w;
                let grow = (id * xd.h + ih) * xd.w;
                for ow in 0..od.w {
                    g[grow + ow / factor] += dy[yrow + ow];
                }
            }
        }
    });
    dx
}

/// Per-sample, per-channel normalization over the spatial extent.
pub fn instance_norm_forward<E: Element>(
    x: &[E],
    xd: Dims5,
    gamma: &[E],
    beta: &[E],
    eps: f64,
) -> Vec<E> {
    let m = xd.spatial_len();
    let mut out = vec![E::ZERO; x.len()];
    out.par_chunks_mut(m).enumerate().for_each(|(group, o)| {
        let c = group % xd.c;
        let xs = &x[group * m..(group + 1) * m];
        let (mean, inv_std) = group_stats(xs, eps);
        let g = gamma[c];
        let b = beta[c];
        for (dst, &xv) in o.iter_mut().zip(xs) {
            *dst = g * ((xv - mean) * inv_std) + b;
        }
    });
    out
}

fn group_stats<E: Element>(xs: &[E], eps: f64) -> (E, E) {
    let m = E::from_f64(xs.len() as f64);
    let mut sum = E::ZERO;
    for &v in xs {
        sum += v;
    }
    let mean = sum / m;
    let mut var = E::ZERO;
    for &v in xs {
        let d = v - mean;
        var = d.mul_add(d, var);
    }
    var = var / m;
    let inv_std = E::ONE / (var + E::from_f64(eps)).sqrt();
    (mean, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn instance_norm_backward<E: Element>(
    dy: &[E],
    x: &[E],
    xd: Dims5,
    gamma: &[E],
    eps: f64,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let m = xd.spatial_len();
    let groups = xd.n * xd.c;
    let mut dx = vec![E::ZERO; x.len()];
    // Per-group partials for the affine parameters, reduced over the
    // batch afterwards in a fixed order.
    let mut dgamma_part = vec![E::ZERO; groups];
    let mut dbeta_part = vec![E::ZERO; groups];

    dx.par_chunks_mut(m)
        .zip(dgamma_part.par_iter_mut())
        .zip(dbeta_part.par_iter_mut())
        .enumerate()
        .for_each(|(group, ((gx, dgp), dbp))| {
            let c = group % xd.c;
            let xs = &x[group * m..(group + 1) * m];
            let dys = &dy[group * m..(group + 1) * m];
            let (mean, inv_std) = group_stats(xs, eps);
            let inv_m = E::ONE / E::from_f64(m as f64);

            let mut sum_dy = E::ZERO;
            let mut sum_dy_xhat = E::ZERO;
            for (&d, &xv) in dys.iter().zip(xs) {
                let xhat = (xv - mean) * inv_std;
                sum_dy += d;
                sum_dy_xhat = d.mul_add(xhat, sum_dy_xhat);
            }
            *dgp = sum_dy_xhat;
            *dbp = sum_dy;

            let mean_dy = sum_dy * inv_m;
            let mean_dy_xhat = sum_dy_xhat * inv_m;
            let scale = gamma[c] * inv_std;
            for ((g, &d), &xv) in gx.iter_mut().zip(dys).zip(xs) {
                let xhat = (xv - mean) * inv_std;
                *g = scale * (d - mean_dy - xhat * mean_dy_xhat);
            }
        });

    let mut dgamma = vec![E::ZERO; xd.c];
    let mut dbeta = vec![E::ZERO; xd.c];
    for n in 0..xd.n {
        for c in 0..xd.c {
            dgamma[c] += dgamma_part[n * xd.c + c];
            dbeta[c] += dbeta_part[n * xd.c + c];
        }
    }
    (dx, dgamma, dbeta)
}
