//! Direct (loop) kernels for strided convolution and its transpose.
//!
//! Both operators share the index map `out = in_pos * stride + k - padding`
//! read in opposite directions: convolution gathers over it, transposed
//! convolution scatters over it.

use super::layer::ConvGeometry;

/// Positions `q` in `0..n_q` for which `q * stride + k - padding` lands in
/// `0..n_target`.
#[inline]
fn valid_range(k: usize, stride: usize, padding: usize, n_q: usize, n_target: usize) -> (usize, usize) {
    let lo = if k >= padding { 0 } else { (padding - k).div_ceil(stride) };
    let top = n_target + padding;
    if top <= k {
        return (0, 0);
    }
    let hi = ((top - 1 - k) / stride + 1).min(n_q);
    (lo.min(hi), hi)
}

pub(crate) struct Dims {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Convolution forward. Weights are `[out][in][k][k]`.
pub(crate) fn conv_forward(g: &ConvGeometry, d: &Dims, input: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let k = g.kernel;
    let (s, p) = (g.stride, g.padding);
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    for o in 0..g.out_channels {
        let out_o = &mut out[o * out_plane..(o + 1) * out_plane];
        out_o.fill(bias[o]);
        for i in 0..g.in_channels {
            let in_i = &input[i * in_plane..(i + 1) * in_plane];
            let w_oi = &weights[(o * g.in_channels + i) * k * k..(o * g.in_channels + i + 1) * k * k];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, s, p, d.out_h, d.in_h);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, s, p, d.out_w, d.in_w);
                    let w = w_oi[ky * k + kx];
                    for y in y0..y1 {
                        let iy = y * s + ky - p;
                        let row_in = &in_i[iy * d.in_w..(iy + 1) * d.in_w];
                        let row_out = &mut out_o[y * d.out_w..(y + 1) * d.out_w];
                        for x in x0..x1 {
                            row_out[x] += w * row_in[x * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution backward: accumulates weight/bias gradients and writes the
/// input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: &ConvGeometry,
    d: &Dims,
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
    grad_in: &mut [f64],
) {
    let k = g.kernel;
    let (s, p) = (g.stride, g.padding);
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    grad_in.fill(0.0);
    for o in 0..g.out_channels {
        let g_o = &grad_out[o * out_plane..(o + 1) * out_plane];
        grad_bias[o] += g_o.iter().sum::<f64>();
        for i in 0..g.in_channels {
            let in_i = &input[i * in_plane..(i + 1) * in_plane];
            let gin_i = &mut grad_in[i * in_plane..(i + 1) * in_plane];
            let base = (o * g.in_channels + i) * k * k;
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, s, p, d.out_h, d.in_h);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, s, p, d.out_w, d.in_w);
                    let w = weights[base + ky * k + kx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y * s + ky - p;
                        let row_g = &g_o[y * d.out_w..(y + 1) * d.out_w];
                        let row_in = &in_i[iy * d.in_w..(iy + 1) * d.in_w];
                        let row_gin = &mut gin_i[iy * d.in_w..(iy + 1) * d.in_w];
                        for x in x0..x1 {
                            let ix = x * s + kx - p;
                            acc += row_g[x] * row_in[ix];
                            row_gin[ix] += w * row_g[x];
                        }
                    }
                    grad_weights[base + ky * k + kx] += acc;
                }
            }
        }
    }
}

/// Transposed convolution forward. Weights are `[in][out][k][k]`.
pub(crate) fn deconv_forward(g: &ConvGeometry, d: &Dims, input: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let k = g.kernel;
    let (s, p) = (g.stride, g.padding);
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    for o in 0..g.out_channels {
        out[o * out_plane..(o + 1) * out_plane].fill(bias[o]);
    }
    for i in 0..g.in_channels {
        let in_i = &input[i * in_plane..(i + 1) * in_plane];
        for o in 0..g.out_channels {
            let out_o = &mut out[o * out_plane..(o + 1) * out_plane];
            let base = (i * g.out_channels + o) * k * k;
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, s, p, d.in_h, d.out_h);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, s, p, d.in_w, d.out_w);
                    let w = weights[base + ky * k + kx];
                    for iy in y0..y1 {
                        let y = iy * s + ky - p;
                        let row_in = &in_i[iy * d.in_w..(iy + 1) * d.in_w];
                        let row_out = &mut out_o[y * d.out_w..(y + 1) * d.out_w];
                        for ix in x0..x1 {
                            row_out[ix * s + kx - p] += w * row_in[ix];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv_backward(
    g: &ConvGeometry,
    d: &Dims,
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
    grad_in: &mut [f64],
) {
    let k = g.kernel;
    let (s, p) = (g.stride, g.padding);
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    grad_in.fill(0.0);
    for o in 0..g.out_channels {
        grad_bias[o] += grad_out[o * out_plane..(o + 1) * out_plane].iter().sum::<f64>();
    }
    for i in 0..g.in_channels {
        let in_i = &input[i * in_plane..(i + 1) * in_plane];
        let gin_i = &mut grad_in[i * in_plane..(i + 1) * in_plane];
        for o in 0..g.out_channels {
            let g_o = &grad_out[o * out_plane..(o + 1) * out_plane];
            let base = (i * g.out_channels + o) * k * k;
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, s, p, d.in_h, d.out_h);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, s, p, d.in_w, d.out_w);
                    let w = weights[base + ky * k + kx];
                    let mut acc = 0.0;
                    for iy in y0..y1 {
                        let y = iy * s + ky - p;
                        let row_g = &g_o[y * d.out_w..(y + 1) * d.out_w];
                        let row_in = &in_i[iy * d.in_w..(iy + 1) * d.in_w];
                        let row_gin = &mut gin_i[iy * d.in_w..(iy + 1) * d.in_w];
                        for ix in x0..x1 {
                            let gv = row_g[ix * s + kx - p];
                            acc += gv * row_in[ix];
                            row_gin[ix] += w * gv;
                        }
                    }
                    grad_weights[base + ky * k + kx] += acc;
                }
            }
        }
    }
}
