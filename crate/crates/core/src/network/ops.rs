//! Raw kernels for the two linear layer kinds. Masked output channels are
//! forced to zero in every direction so stale weights can never leak.

use super::{ConvGeometry, LinearKind};

/// Output positions `o` for which `o * stride + k - pad` lands inside `0..in_len`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if in_len + pad <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// `y = W x` (no bias); masked rows produce 0.
pub(crate) fn apply(kind: &LinearKind, weight: &[f64], mask: &[bool], x: &[f64], y: &mut [f64]) {
    match *kind {
        LinearKind::Dense { in_dim, out_dim } => {
            for o in 0..out_dim {
                y[o] = if mask[o] { dot(&weight[o * in_dim..(o + 1) * in_dim], x) } else { 0.0 };
            }
        }
        LinearKind::Conv(g) => conv_apply(&g, weight, mask, x, y),
    }
}

/// `y = W x + b`; masked rows produce 0.
pub(crate) fn forward(kind: &LinearKind, weight: &[f64], bias: &[f64], mask: &[bool], x: &[f64], y: &mut [f64]) {
    apply(kind, weight, mask, x, y);
    let per = y.len() / bias.len();
    for (c, chunk) in y.chunks_mut(per).enumerate() {
        if mask[c] && bias[c] != 0.0 {
            chunk.iter_mut().for_each(|v| *v += bias[c]);
        }
    }
}

/// `x_grad = Wᵀ g`, overwriting `x_grad`.
pub(crate) fn transpose(kind: &LinearKind, weight: &[f64], mask: &[bool], g: &[f64], x_grad: &mut [f64]) {
    x_grad.iter_mut().for_each(|v| *v = 0.0);
    match *kind {
        LinearKind::Dense { in_dim, out_dim } => {
            for o in 0..out_dim {
                let go = g[o];
                if !mask[o] || go == 0.0 {
                    continue;
                }
                let row = &weight[o * in_dim..(o + 1) * in_dim];
                for (xg, w) in x_grad.iter_mut().zip(row) {
                    *xg += w * go;
                }
            }
        }
        LinearKind::Conv(geom) => conv_transpose(&geom, weight, mask, g, x_grad),
    }
}

/// Accumulates `dL/dW += g xᵀ` and `dL/db += g` (summed over spatial positions).
pub(crate) fn weight_grad(
    kind: &LinearKind,
    mask: &[bool],
    x: &[f64],
    g: &[f64],
    w_grad: &mut [f64],
    b_grad: &mut [f64],
) {
    match *kind {
        LinearKind::Dense { in_dim, out_dim } => {
            for o in 0..out_dim {
                let go = g[o];
                if !mask[o] || go == 0.0 {
                    continue;
                }
                b_grad[o] += go;
                let row = &mut w_grad[o * in_dim..(o + 1) * in_dim];
                for (wg, xv) in row.iter_mut().zip(x) {
                    *wg += go * xv;
                }
            }
        }
        LinearKind::Conv(geom) => conv_weight_grad(&geom, mask, x, g, w_grad, b_grad),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_apply(g: &ConvGeometry, weight: &[f64], mask: &[bool], x: &[f64], y: &mut [f64]) {
    let k = g.kernel;
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let s = g.stride;
    y.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..g.out_channels {
        if !mask[o] {
            continue;
        }
        let out = &mut y[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..g.in_channels {
            let inp = &x[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, g.padding, s, ih, oh);
                for kx in 0..k {
                    let w = weight[((o * g.in_channels + c) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(kx, g.padding, s, iw, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.padding;
                        let row_in = &inp[iy * iw..(iy + 1) * iw];
                        let row_out = &mut out[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            row_out[ox] += w * row_in[ox * s + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
}

fn conv_transpose(g: &ConvGeometry, weight: &[f64], mask: &[bool], gy: &[f64], gx: &mut [f64]) {
    let k = g.kernel;
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let s = g.stride;
    for o in 0..g.out_channels {
        if !mask[o] {
            continue;
        }
        let gout = &gy[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..g.in_channels {
            let gin = &mut gx[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, g.padding, s, ih, oh);
                for kx in 0..k {
                    let w = weight[((o * g.in_channels + c) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(kx, g.padding, s, iw, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.padding;
                        for ox in x0..x1 {
                            gin[iy * iw + ox * s + kx - g.padding] += w * gout[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_weight_grad(g: &ConvGeometry, mask: &[bool], x: &[f64], gy: &[f64], w_grad: &mut [f64], b_grad: &mut [f64]) {
    let k = g.kernel;
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let s = g.stride;
    for o in 0..g.out_channels {
        if !mask[o] {
            continue;
        }
        let gout = &gy[o * oh * ow..(o + 1) * oh * ow];
        b_grad[o] += gout.iter().sum::<f64>();
        for c in 0..g.in_channels {
            let inp = &x[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, g.padding, s, ih, oh);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, g.padding, s, iw, ow);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.padding;
                        for ox in x0..x1 {
                            acc += gout[oy * ow + ox] * inp[iy * iw + ox * s + kx - g.padding];
                        }
                    }
                    w_grad[((o * g.in_channels + c) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}
