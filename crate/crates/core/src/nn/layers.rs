use super::{gemm, Act, Grads, ParamSet};

pub(crate) const BN_EPS: f32 = 1e-5;
/// Weight of the previous running statistic in the exponential average.
pub(crate) const BN_MOMENTUM: f32 = 0.9;

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; optionally fold them into the running averages.
    Batch { update_running: bool },
    /// Frozen running statistics.
    Running,
}

/// Options for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    pub bn: BnMode,
    /// Keep intermediate values for a backward pass.
    pub record: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        bn: BnMode::Batch {
            update_running: true,
        },
        record: true,
    };
    /// Training pass that leaves running statistics untouched (second SAM pass).
    pub const TRAIN_NO_UPDATE: Pass = Pass {
        bn: BnMode::Batch {
            update_running: false,
        },
        record: true,
    };
    /// Frozen statistics, but differentiable.
    pub const FROZEN_BN: Pass = Pass {
        bn: BnMode::Running,
        record: true,
    };
    pub const EVAL: Pass = Pass {
        bn: BnMode::Running,
        record: false,
    };
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Conv {
        weight: usize,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        weight: usize,
        bias: usize,
        in_f: usize,
        out_f: usize,
    },
    Bn {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Relu,
}

#[derive(Debug)]
pub(crate) enum Saved {
    Input(Act),
    Bn { xhat: Act, inv_std: Vec<f32>, batch: bool },
    Output(Act),
    Nothing,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f32],
) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let hw = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                        {
                            img[ch * h * w + iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    img: &mut [f32],
) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let hw = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[ch * h * w + iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Op {
    pub(crate) fn forward(
        &self,
        params: &ParamSet,
        buffers: &mut ParamSet,
        x: Act,
        pass: Pass,
    ) -> (Act, Saved) {
        match *self {
            Op::Conv {
                weight,
                in_c,
                out_c,
                k,
                stride,
                pad,
            } => {
                debug_assert_eq!(x.c, in_c);
                let (ho, wo) = (conv_out(x.h, k, stride, pad), conv_out(x.w, k, stride, pad));
                let ckk = in_c * k * k;
                let mut out = Act::zeros(x.n, out_c, ho, wo);
                let mut cols = vec![0.0; ckk * ho * wo];
                let wt = params.data(weight);
                let (in_len, out_len) = (x.per_example(), out.per_example());
                for i in 0..x.n {
                    im2col(&x.data[i * in_len..(i + 1) * in_len], in_c, x.h, x.w, k, stride, pad, &mut cols);
                    gemm(
                        out_c,
                        ckk,
                        ho * wo,
                        1.0,
                        wt,
                        false,
                        &cols,
                        false,
                        0.0,
                        &mut out.data[i * out_len..(i + 1) * out_len],
                    );
                }
                let saved = if pass.record { Saved::Input(x) } else { Saved::Nothing };
                (out, saved)
            }
            Op::Linear {
                weight,
                bias,
                in_f,
                out_f,
            } => {
                debug_assert_eq!(x.per_example(), in_f);
                let mut out = Act::zeros(x.n, out_f, 1, 1);
                let b = params.data(bias);
                for row in out.data.chunks_mut(out_f) {
                    row.copy_from_slice(b);
                }
                gemm(x.n, in_f, out_f, 1.0, &x.data, false, params.data(weight), true, 1.0, &mut out.data);
                let saved = if pass.record { Saved::Input(x) } else { Saved::Nothing };
                (out, saved)
            }
            Op::Bn {
                gamma,
                beta,
                mean,
                var,
            } => bn_forward(params, buffers, (gamma, beta, mean, var), x, pass),
            Op::Relu => {
                let mut out = x;
                for v in &mut out.data {
                    *v = v.max(0.0);
                }
                let saved = if pass.record {
                    Saved::Output(out.clone())
                } else {
                    Saved::Nothing
                };
                (out, saved)
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_dx`.
    pub(crate) fn backward(
        &self,
        params: &ParamSet,
        saved: &Saved,
        dy: Act,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Act> {
        match (self, saved) {
            (
                &Op::Conv {
                    weight,
                    in_c,
                    out_c,
                    k,
                    stride,
                    pad,
                },
                Saved::Input(x),
            ) => {
                let hw = dy.h * dy.w;
                let ckk = in_c * k * k;
                let mut cols = vec![0.0; ckk * hw];
                let mut dcols = vec![0.0; ckk * hw];
                let mut dx = if need_dx { Some(x.same_shape()) } else { None };
                let wt = params.data(weight);
                let (in_len, out_len) = (x.per_example(), dy.per_example());
                for i in 0..x.n {
                    let dyi = &dy.data[i * out_len..(i + 1) * out_len];
                    im2col(&x.data[i * in_len..(i + 1) * in_len], in_c, x.h, x.w, k, stride, pad, &mut cols);
                    gemm(out_c, hw, ckk, 1.0, dyi, false, &cols, true, 1.0, &mut grads[weight]);
                    if let Some(dx) = dx.as_mut() {
                        gemm(ckk, out_c, hw, 1.0, wt, true, dyi, false, 0.0, &mut dcols);
                        col2im_add(
                            &dcols,
                            in_c,
                            x.h,
                            x.w,
                            k,
                            stride,
                            pad,
                            &mut dx.data[i * in_len..(i + 1) * in_len],
                        );
                    }
                }
                dx
            }
            (
                &Op::Linear {
                    weight,
                    bias,
                    in_f,
                    out_f,
                },
                Saved::Input(x),
            ) => {
                gemm(out_f, x.n, in_f, 1.0, &dy.data, true, &x.data, false, 1.0, &mut grads[weight]);
                let gb = &mut grads[bias];
                for row in dy.data.chunks(out_f) {
                    for (g, v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                need_dx.then(|| {
                    let mut dx = x.same_shape();
                    gemm(x.n, out_f, in_f, 1.0, &dy.data, false, params.data(weight), false, 0.0, &mut dx.data);
                    dx
                })
            }
            (&Op::Bn { gamma, beta, .. }, Saved::Bn { xhat, inv_std, batch }) => {
                bn_backward(params, (gamma, beta), xhat, inv_std, *batch, dy, grads, need_dx)
            }
            (Op::Relu, Saved::Output(out)) => need_dx.then(|| {
                let mut dx = dy;
                for (g, o) in dx.data.iter_mut().zip(&out.data) {
                    if *o <= 0.0 {
                        *g = 0.0;
                    }
                }
                dx
            }),
            _ => panic!("backward called without a recorded forward pass"),
        }
    }
}

fn bn_forward(
    params: &ParamSet,
    buffers: &mut ParamSet,
    (gamma, beta, mean, var): (usize, usize, usize, usize),
    x: Act,
    pass: Pass,
) -> (Act, Saved) {
    let (n, c, hw) = (x.n, x.c, x.h * x.w);
    let m = (n * hw) as f32;
    let mut mu = vec![0.0f32; c];
    let mut inv_std = vec![0.0f32; c];
    let batch = matches!(pass.bn, BnMode::Batch { .. });
    if batch {
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let s = &x.data[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for &v in s {
                    sum[ch] += v as f64;
                }
            }
        }
        for ch in 0..c {
            mu[ch] = (sum[ch] / m as f64) as f32;
        }
        for i in 0..n {
            for ch in 0..c {
                let s = &x.data[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for &v in s {
                    let d = (v - mu[ch]) as f64;
                    sq[ch] += d * d;
                }
            }
        }
        let var_b: Vec<f32> = sq.iter().map(|s| (s / m as f64) as f32).collect();
        for ch in 0..c {
            inv_std[ch] = 1.0 / (var_b[ch] + BN_EPS).sqrt();
        }
        if let BnMode::Batch {
            update_running: true,
        } = pass.bn
        {
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let rm = &mut buffers.entries[mean].data;
            for ch in 0..c {
                rm[ch] = BN_MOMENTUM * rm[ch] + (1.0 - BN_MOMENTUM) * mu[ch];
            }
            let rv = &mut buffers.entries[var].data;
            for ch in 0..c {
                rv[ch] = BN_MOMENTUM * rv[ch] + (1.0 - BN_MOMENTUM) * var_b[ch] * unbiased;
            }
        }
    } else {
        mu.copy_from_slice(buffers.data(mean));
        for (s, v) in inv_std.iter_mut().zip(buffers.data(var)) {
            *s = 1.0 / (v + BN_EPS).sqrt();
        }
    }
    let (g, b) = (params.data(gamma), params.data(beta));
    let mut xhat = x;
    let mut out = xhat.same_shape();
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (xh, o) in xhat.data[range.clone()].iter_mut().zip(&mut out.data[range]) {
                *xh = (*xh - mu[ch]) * inv_std[ch];
                *o = g[ch] * *xh + b[ch];
            }
        }
    }
    let saved = if pass.record {
        Saved::Bn {
            xhat,
            inv_std,
            batch,
        }
    } else {
        Saved::Nothing
    };
    (out, saved)
}

#[allow(clippy::too_many_arguments)]
fn bn_backward(
    params: &ParamSet,
    (gamma, beta): (usize, usize),
    xhat: &Act,
    inv_std: &[f32],
    batch: bool,
    dy: Act,
    grads: &mut Grads,
    need_dx: bool,
) -> Option<Act> {
    let (n, c, hw) = (xhat.n, xhat.c, xhat.h * xhat.w);
    let m = (n * hw) as f32;
    let mut sum_dy = vec![0.0f32; c];
    let mut sum_dy_xhat = vec![0.0f32; c];
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (d, xh) in dy.data[range.clone()].iter().zip(&xhat.data[range]) {
                sum_dy[ch] += d;
                sum_dy_xhat[ch] += d * xh;
            }
        }
    }
    for ch in 0..c {
        grads[gamma][ch] += sum_dy_xhat[ch];
        grads[beta][ch] += sum_dy[ch];
    }
    if !need_dx {
        return None;
    }
    let g = params.data(gamma);
    let mut dx = dy;
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let scale = g[ch] * inv_std[ch];
            if batch {
                let (mean_dy, mean_dy_xhat) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                for (d, xh) in dx.data[range.clone()].iter_mut().zip(&xhat.data[range]) {
                    *d = scale * (*d - mean_dy - xh * mean_dy_xhat);
                }
            } else {
                for d in &mut dx.data[range] {
                    *d *= scale;
                }
            }
        }
    }
    Some(dx)
}
