//! Forward and backward kernels behind the [`Graph`](super::Graph) ops.
//!
//! Everything runs single-threaded with fixed reduction order, so results are
//! bitwise deterministic across runs on the same build.

use super::graph::PointwiseKind;
use super::Shape;

/// Elementwise combine of two equal-length slices.
pub(crate) fn zip2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// Indices o in [0, extent_out) with 0 <= o*stride + k_off - pad < extent_in.
#[inline]
fn out_range(
    extent_in: usize,
    k_off: usize,
    pad: usize,
    stride: usize,
    extent_out: usize,
) -> (usize, usize) {
    let s = stride as i64;
    let lo_num = pad as i64 - k_off as i64;
    let lo = if lo_num <= 0 {
        0
    } else {
        ((lo_num + s - 1) / s) as usize
    };
    let hi_num = extent_in as i64 + pad as i64 - k_off as i64;
    let hi = if hi_num <= 0 {
        0
    } else {
        (((hi_num + s - 1) / s) as usize).min(extent_out)
    };
    (lo, hi.max(lo))
}

// ---- conv2d -----------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    ws: Shape,
    bias: &[f64],
    stride: usize,
    pad: usize,
    os: Shape,
) -> Vec<f64> {
    let (n_batch, cin, h, width) = (xs.n(), xs.c(), xs.h(), xs.w());
    let (cout, _, kh, kw) = (ws.n(), ws.c(), ws.h(), ws.w());
    let (oh, ow) = (os.h(), os.w());
    let mut out = vec![0.0; os.numel()];

    for n in 0..n_batch {
        for co in 0..cout {
            let out_plane = &mut out[(n * cout + co) * oh * ow..(n * cout + co + 1) * oh * ow];
            out_plane.fill(bias[co]);
            for ci in 0..cin {
                let x_plane = &x[(n * cin + ci) * h * width..(n * cin + ci + 1) * h * width];
                for kh_off in 0..kh {
                    let (oh_lo, oh_hi) = out_range(h, kh_off, pad, stride, oh);
                    for kw_off in 0..kw {
                        let wv = w[((co * cin + ci) * kh + kh_off) * kw + kw_off];
                        let (ow_lo, ow_hi) = out_range(width, kw_off, pad, stride, ow);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        let count = ow_hi - ow_lo;
                        for oi in oh_lo..oh_hi {
                            let ih = oi * stride + kh_off - pad;
                            let iw0 = ow_lo * stride + kw_off - pad;
                            let src = &x_plane
                                [ih * width + iw0..ih * width + iw0 + (count - 1) * stride + 1];
                            let dst = &mut out_plane[oi * ow + ow_lo..oi * ow + ow_lo + count];
                            if stride == 1 {
                                for (d, v) in dst.iter_mut().zip(src) {
                                    *d += wv * *v;
                                }
                            } else {
                                for (d, v) in dst.iter_mut().zip(src.iter().step_by(stride)) {
                                    *d += wv * *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_input(
    gout: &[f64],
    os: Shape,
    w: &[f64],
    ws: Shape,
    stride: usize,
    pad: usize,
    xs: Shape,
    gx: &mut [f64],
) {
    let (n_batch, cin, h, width) = (xs.n(), xs.c(), xs.h(), xs.w());
    let (cout, _, kh, kw) = (ws.n(), ws.c(), ws.h(), ws.w());
    let (oh, ow) = (os.h(), os.w());

    for n in 0..n_batch {
        for ci in 0..cin {
            let gx_plane = &mut gx[(n * cin + ci) * h * width..(n * cin + ci + 1) * h * width];
            for co in 0..cout {
                let g_plane = &gout[(n * cout + co) * oh * ow..(n * cout + co + 1) * oh * ow];
                for kh_off in 0..kh {
                    let (oh_lo, oh_hi) = out_range(h, kh_off, pad, stride, oh);
                    for kw_off in 0..kw {
                        let wv = w[((co * cin + ci) * kh + kh_off) * kw + kw_off];
                        let (ow_lo, ow_hi) = out_range(width, kw_off, pad, stride, ow);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        let count = ow_hi - ow_lo;
                        for oi in oh_lo..oh_hi {
                            let ih = oi * stride + kh_off - pad;
                            let iw0 = ow_lo * stride + kw_off - pad;
                            let grow = &g_plane[oi * ow + ow_lo..oi * ow + ow_lo + count];
                            let dst = &mut gx_plane
                                [ih * width + iw0..ih * width + iw0 + (count - 1) * stride + 1];
                            if stride == 1 {
                                for (d, g) in dst.iter_mut().zip(grow) {
                                    *d += wv * *g;
                                }
                            } else {
                                for (d, g) in dst.iter_mut().step_by(stride).zip(grow) {
                                    *d += wv * *g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_weight(
    gout: &[f64],
    os: Shape,
    x: &[f64],
    xs: Shape,
    ws: Shape,
    stride: usize,
    pad: usize,
    gw: &mut [f64],
) {
    let (n_batch, cin, h, width) = (xs.n(), xs.c(), xs.h(), xs.w());
    let (cout, _, kh, kw) = (ws.n(), ws.c(), ws.h(), ws.w());
    let (oh, ow) = (os.h(), os.w());

    for co in 0..cout {
        for ci in 0..cin {
            for kh_off in 0..kh {
                let (oh_lo, oh_hi) = out_range(h, kh_off, pad, stride, oh);
                for kw_off in 0..kw {
                    let (ow_lo, ow_hi) = out_range(width, kw_off, pad, stride, ow);
                    if ow_hi <= ow_lo {
                        continue;
                    }
                    let count = ow_hi - ow_lo;
                    let mut acc = 0.0;
                    for n in 0..n_batch {
                        let g_plane =
                            &gout[(n * cout + co) * oh * ow..(n * cout + co + 1) * oh * ow];
                        let x_plane =
                            &x[(n * cin + ci) * h * width..(n * cin + ci + 1) * h * width];
                        for oi in oh_lo..oh_hi {
                            let ih = oi * stride + kh_off - pad;
                            let iw0 = ow_lo * stride + kw_off - pad;
                            let grow = &g_plane[oi * ow + ow_lo..oi * ow + ow_lo + count];
                            let xrow = &x_plane
                                [ih * width + iw0..ih * width + iw0 + (count - 1) * stride + 1];
                            if stride == 1 {
                                for (g, v) in grow.iter().zip(xrow) {
                                    acc += g * v;
                                }
                            } else {
                                for (g, v) in grow.iter().zip(xrow.iter().step_by(stride)) {
                                    acc += g * v;
                                }
                            }
                        }
                    }
                    gw[((co * cin + ci) * kh + kh_off) * kw + kw_off] += acc;
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_bias(gout: &[f64], os: Shape, gb: &mut [f64]) {
    let (n_batch, cout, oh, ow) = (os.n(), os.c(), os.h(), os.w());
    for n in 0..n_batch {
        for co in 0..cout {
            let plane = &gout[(n * cout + co) * oh * ow..(n * cout + co + 1) * oh * ow];
            gb[co] += plane.iter().sum::<f64>();
        }
    }
}

// ---- linear -----------------------------------------------------------------

pub(crate) fn linear_forward(x: &[f64], xs: Shape, w: &[f64], ws: Shape, bias: &[f64]) -> Vec<f64> {
    let (n_batch, cin) = (xs.n(), xs.c());
    let cout = ws.n();
    let mut out = vec![0.0; n_batch * cout];
    for n in 0..n_batch {
        let xr = &x[n * cin..(n + 1) * cin];
        for co in 0..cout {
            let wr = &w[co * cin..(co + 1) * cin];
            let dot: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
            out[n * cout + co] = dot + bias[co];
        }
    }
    out
}

pub(crate) fn linear_backward_input(gout: &[f64], w: &[f64], ws: Shape, xs: Shape, gx: &mut [f64]) {
    let (n_batch, cin) = (xs.n(), xs.c());
    let cout = ws.n();
    for n in 0..n_batch {
        for co in 0..cout {
            let g = gout[n * cout + co];
            let wr = &w[co * cin..(co + 1) * cin];
            for (gi, wv) in gx[n * cin..(n + 1) * cin].iter_mut().zip(wr) {
                *gi += g * wv;
            }
        }
    }
}

pub(crate) fn linear_backward_weight(
    gout: &[f64],
    x: &[f64],
    xs: Shape,
    ws: Shape,
    gw: &mut [f64],
) {
    let (n_batch, cin) = (xs.n(), xs.c());
    let cout = ws.n();
    for n in 0..n_batch {
        let xr = &x[n * cin..(n + 1) * cin];
        for co in 0..cout {
            let g = gout[n * cout + co];
            for (gv, xv) in gw[co * cin..(co + 1) * cin].iter_mut().zip(xr) {
                *gv += g * xv;
            }
        }
    }
}

// ---- group norm ---------------------------------------------------------------

pub(crate) fn group_norm_forward(
    x: &[f64],
    xs: Shape,
    gamma: &[f64],
    beta: &[f64],
    groups: usize,
    eps: f64,
) -> (Vec<f64>, Vec<(f64, f64)>) {
    let (n_batch, c, h, w) = (xs.n(), xs.c(), xs.h(), xs.w());
    let cpg = c / groups;
    let group_len = cpg * h * w;
    let mut out = vec![0.0; xs.numel()];
    let mut stats = Vec::with_capacity(n_batch * groups);

    for n in 0..n_batch {
        for g in 0..groups {
            let base = (n * c + g * cpg) * h * w;
            let xg = &x[base..base + group_len];
            let mean = xg.iter().sum::<f64>() / group_len as f64;
            let var = xg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv));
            for local_c in 0..cpg {
                let ch = g * cpg + local_c;
                let (ga, be) = (gamma[ch], beta[ch]);
                let pbase = base + local_c * h * w;
                for i in 0..h * w {
                    out[pbase + i] = ga * (x[pbase + i] - mean) * inv + be;
                }
            }
        }
    }
    (out, stats)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    gout: &[f64],
    x: &[f64],
    xs: Shape,
    gamma: &[f64],
    groups: usize,
    stats: &[(f64, f64)],
    mut gx: Option<&mut [f64]>,
    mut ggamma: Option<&mut [f64]>,
    mut gbeta: Option<&mut [f64]>,
) {
    let (n_batch, c, h, w) = (xs.n(), xs.c(), xs.h(), xs.w());
    let cpg = c / groups;
    let plane = h * w;
    let group_len = cpg * plane;

    for n in 0..n_batch {
        for g in 0..groups {
            let (mean, inv) = stats[n * groups + g];
            let base = (n * c + g * cpg) * plane;

            // Per-channel affine grads use the normalized values directly.
            if ggamma.is_some() || gbeta.is_some() {
                for local_c in 0..cpg {
                    let ch = g * cpg + local_c;
                    let pbase = base + local_c * plane;
                    let mut s_gamma = 0.0;
                    let mut s_beta = 0.0;
                    for i in 0..plane {
                        let xhat = (x[pbase + i] - mean) * inv;
                        s_gamma += gout[pbase + i] * xhat;
                        s_beta += gout[pbase + i];
                    }
                    if let Some(gg) = ggamma.as_deref_mut() {
                        gg[ch] += s_gamma;
                    }
                    if let Some(gb) = gbeta.as_deref_mut() {
                        gb[ch] += s_beta;
                    }
                }
            }

            if let Some(gx) = gx.as_deref_mut() {
                // dL/dx = inv * (g1 - mean(g1) - xhat * mean(g1*xhat)),
                // g1 = gout * gamma, means over the whole group.
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for local_c in 0..cpg {
                    let ch = g * cpg + local_c;
                    let pbase = base + local_c * plane;
                    for i in 0..plane {
                        let g1 = gout[pbase + i] * gamma[ch];
                        let xhat = (x[pbase + i] - mean) * inv;
                        s1 += g1;
                        s2 += g1 * xhat;
                    }
                }
                let m = group_len as f64;
                for local_c in 0..cpg {
                    let ch = g * cpg + local_c;
                    let pbase = base + local_c * plane;
                    for i in 0..plane {
                        let g1 = gout[pbase + i] * gamma[ch];
                        let xhat = (x[pbase + i] - mean) * inv;
                        gx[pbase + i] += inv * (g1 - s1 / m - xhat * s2 / m);
                    }
                }
            }
        }
    }
}

// ---- pointwise ----------------------------------------------------------------

/// Standard normal CDF, the exact form used by GELU.
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn pointwise_forward(x: &[f64], kind: PointwiseKind) -> Vec<f64> {
    match kind {
        PointwiseKind::Gelu => x.iter().map(|v| v * gauss_cdf(*v)).collect(),
        PointwiseKind::Sigmoid => x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        PointwiseKind::Tanh => x.iter().map(|v| v.tanh()).collect(),
        PointwiseKind::ExpNegScale(a) => {
            let f = (-a).exp();
            x.iter().map(|v| f * v).collect()
        }
    }
}

pub(crate) fn pointwise_backward(
    gout: &[f64],
    x: &[f64],
    y: &[f64],
    kind: PointwiseKind,
    gx: &mut [f64],
) {
    match kind {
        PointwiseKind::Gelu => {
            for i in 0..x.len() {
                gx[i] += gout[i] * (gauss_cdf(x[i]) + x[i] * gauss_pdf(x[i]));
            }
        }
        PointwiseKind::Sigmoid => {
            for i in 0..x.len() {
                gx[i] += gout[i] * y[i] * (1.0 - y[i]);
            }
        }
        PointwiseKind::Tanh => {
            for i in 0..x.len() {
                gx[i] += gout[i] * (1.0 - y[i] * y[i]);
            }
        }
        PointwiseKind::ExpNegScale(a) => {
            let f = (-a).exp();
            for i in 0..x.len() {
                gx[i] += gout[i] * f;
            }
        }
    }
}

// ---- spatial mean / resampling ---------------------------------------------------

pub(crate) fn spatial_mean_forward(x: &[f64], xs: Shape) -> Vec<f64> {
    let plane = xs.h() * xs.w();
    (0..xs.n() * xs.c())
        .map(|nc| x[nc * plane..(nc + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

pub(crate) fn upsample_forward(x: &[f64], xs: Shape, f: usize) -> Vec<f64> {
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; xs.n() * xs.c() * oh * ow];
    for nc in 0..xs.n() * xs.c() {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            let iy = oy / f;
            for ox in 0..ow {
                dst[oy * ow + ox] = src[iy * w + ox / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(gout: &[f64], os: Shape, xs: Shape, f: usize, gx: &mut [f64]) {
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (os.h(), os.w());
    for nc in 0..xs.n() * xs.c() {
        let g = &gout[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let iy = oy / f;
            for ox in 0..ow {
                dst[iy * w + ox / f] += g[oy * ow + ox];
            }
        }
    }
}

pub(crate) fn subsample2_forward(x: &[f64], xs: Shape, os: Shape) -> Vec<f64> {
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (os.h(), os.w());
    let mut out = vec![0.0; os.numel()];
    for nc in 0..xs.n() * xs.c() {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy * 2) * w + ox * 2];
            }
        }
    }
    out
}

pub(crate) fn subsample2_backward(gout: &[f64], os: Shape, xs: Shape, gx: &mut [f64]) {
    let (h, w) = (xs.h(), xs.w());
    let (oh, ow) = (os.h(), os.w());
    for nc in 0..xs.n() * xs.c() {
        let g = &gout[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy * 2) * w + ox * 2] += g[oy * ow + ox];
            }
        }
    }
}

// ---- concat / broadcast ----------------------------------------------------------

pub(crate) fn concat_forward(a: &[f64], sa: Shape, b: &[f64], sb: Shape) -> Vec<f64> {
    let plane = sa.h() * sa.w();
    let (ca, cb) = (sa.c(), sb.c());
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n() {
        out.extend_from_slice(&a[n * ca * plane..(n + 1) * ca * plane]);
        out.extend_from_slice(&b[n * cb * plane..(n + 1) * cb * plane]);
    }
    out
}

pub(crate) fn concat_backward(gout: &[f64], sa: Shape, sb: Shape, first: bool, gdst: &mut [f64]) {
    let plane = sa.h() * sa.w();
    let (ca, cb) = (sa.c(), sb.c());
    let stride_out = (ca + cb) * plane;
    for n in 0..sa.n() {
        let (off, len, dst_base) = if first {
            (n * stride_out, ca * plane, n * ca * plane)
        } else {
            (n * stride_out + ca * plane, cb * plane, n * cb * plane)
        };
        for i in 0..len {
            gdst[dst_base + i] += gout[off + i];
        }
    }
}

#[inline]
fn broadcast_index(sb: Shape, n: usize, c: usize) -> usize {
    let bn = if sb.n() == 1 { 0 } else { n };
    let bc = if sb.c() == 1 { 0 } else { c };
    bn * sb.c() + bc
}

pub(crate) fn broadcast_forward(
    a: &[f64],
    sa: Shape,
    b: &[f64],
    sb: Shape,
    is_mul: bool,
) -> Vec<f64> {
    let plane = sa.h() * sa.w();
    let mut out = vec![0.0; a.len()];
    for n in 0..sa.n() {
        for c in 0..sa.c() {
            let bv = b[broadcast_index(sb, n, c)];
            let base = (n * sa.c() + c) * plane;
            if is_mul {
                for i in 0..plane {
                    out[base + i] = a[base + i] * bv;
                }
            } else {
                for i in 0..plane {
                    out[base + i] = a[base + i] + bv;
                }
            }
        }
    }
    out
}

pub(crate) fn broadcast_grad_lhs(gout: &[f64], sa: Shape, b: &[f64], sb: Shape, ga: &mut [f64]) {
    let plane = sa.h() * sa.w();
    for n in 0..sa.n() {
        for c in 0..sa.c() {
            let bv = b[broadcast_index(sb, n, c)];
            let base = (n * sa.c() + c) * plane;
            for i in 0..plane {
                ga[base + i] += gout[base + i] * bv;
            }
        }
    }
}

/// Gradient for the broadcast operand: sums over the broadcast axes. When
/// `a` is given the op was a multiply, otherwise an add.
pub(crate) fn broadcast_backward_rhs(
    gout: &[f64],
    sa: Shape,
    sb: Shape,
    a: Option<&[f64]>,
    gb: &mut [f64],
) {
    let plane = sa.h() * sa.w();
    for n in 0..sa.n() {
        for c in 0..sa.c() {
            let base = (n * sa.c() + c) * plane;
            let s: f64 = match a {
                Some(av) => (0..plane).map(|i| gout[base + i] * av[base + i]).sum(),
                None => gout[base..base + plane].iter().sum(),
            };
            gb[broadcast_index(sb, n, c)] += s;
        }
    }
}
