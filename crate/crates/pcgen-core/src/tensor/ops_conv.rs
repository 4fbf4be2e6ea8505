//! 2-D convolution (cross-correlation), its adjoint, and pixel shuffle.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{fmt_shape, Error, Result};

use super::{Tape, Tensor};

fn conv_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (inp + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(
    op: &'static str,
    xsh: &[usize],
    wsh: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if xsh.len() != 4 || wsh.len() != 4 {
        return Err(Error::shape_2(op, xsh, wsh));
    }
    if stride == 0 {
        return Err(Error::invalid("stride", "must be positive"));
    }
    let (b, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
    let (o, wc, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
    if wc != c {
        return Err(Error::shape_2(op, xsh, wsh));
    }
    let (ho, wo) = match (conv_out_dim(h, kh, stride, padding), conv_out_dim(w, kw, stride, padding)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::shape(
                op,
                alloc::format!(
                    "kernel {kh}x{kw} exceeds padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ))
        }
    };
    Ok(ConvDims { b, c, h, w, o, kh, kw, ho, wo })
}

/// out[b,o,ho,wo] = bias[o] + sum_{c,i,j} x[b,c,ho*s+i-p,wo*s+j-p] w[o,c,i,j]
fn conv_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: &ConvDims, s: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f64; d.b * d.o * d.ho * d.wo];
    for b in 0..d.b {
        for o in 0..d.o {
            let base = (b * d.o + o) * d.ho * d.wo;
            if let Some(bias) = bias {
                let bv = bias[o] as f64;
                for v in &mut out[base..base + d.ho * d.wo] {
                    *v = bv;
                }
            }
            for c in 0..d.c {
                let x_base = (b * d.c + c) * d.h * d.w;
                let w_base = (o * d.c + c) * d.kh * d.kw;
                for ho in 0..d.ho {
                    for wo in 0..d.wo {
                        let mut acc = 0.0f64;
                        for i in 0..d.kh {
                            let hi = (ho * s + i).wrapping_sub(p);
                            if hi >= d.h {
                                continue;
                            }
                            for j in 0..d.kw {
                                let wi = (wo * s + j).wrapping_sub(p);
                                if wi >= d.w {
                                    continue;
                                }
                                acc += x[x_base + hi * d.w + wi] as f64
                                    * w[w_base + i * d.kw + j] as f64;
                            }
                        }
                        out[base + ho * d.wo + wo] += acc;
                    }
                }
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Scatter adjoint of conv_forward: given grad over conv output, accumulates
/// into a [b,c,h,w] buffer. Shared by conv2d backward-input and the
/// conv_transpose2d forward pass.
fn conv_input_grad(g: &[f32], w: &[f32], d: &ConvDims, s: usize, p: usize) -> Vec<f64> {
    let mut gx = vec![0.0f64; d.b * d.c * d.h * d.w];
    for b in 0..d.b {
        for o in 0..d.o {
            let base = (b * d.o + o) * d.ho * d.wo;
            for c in 0..d.c {
                let x_base = (b * d.c + c) * d.h * d.w;
                let w_base = (o * d.c + c) * d.kh * d.kw;
                for ho in 0..d.ho {
                    for wo in 0..d.wo {
                        let gv = g[base + ho * d.wo + wo] as f64;
                        for i in 0..d.kh {
                            let hi = (ho * s + i).wrapping_sub(p);
                            if hi >= d.h {
                                continue;
                            }
                            for j in 0..d.kw {
                                let wi = (wo * s + j).wrapping_sub(p);
                                if wi >= d.w {
                                    continue;
                                }
                                gx[x_base + hi * d.w + wi] +=
                                    gv * w[w_base + i * d.kw + j] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// dw[o,c,i,j] = sum_{b,ho,wo} g[b,o,ho,wo] x[b,c,ho*s+i-p,wo*s+j-p]
fn conv_weight_grad(g: &[f32], x: &[f32], d: &ConvDims, s: usize, p: usize) -> Vec<f32> {
    let mut gw = vec![0.0f64; d.o * d.c * d.kh * d.kw];
    for b in 0..d.b {
        for o in 0..d.o {
            let base = (b * d.o + o) * d.ho * d.wo;
            for c in 0..d.c {
                let x_base = (b * d.c + c) * d.h * d.w;
                let w_base = (o * d.c + c) * d.kh * d.kw;
                for ho in 0..d.ho {
                    for wo in 0..d.wo {
                        let gv = g[base + ho * d.wo + wo] as f64;
                        for i in 0..d.kh {
                            let hi = (ho * s + i).wrapping_sub(p);
                            if hi >= d.h {
                                continue;
                            }
                            for j in 0..d.kw {
                                let wi = (wo * s + j).wrapping_sub(p);
                                if wi >= d.w {
                                    continue;
                                }
                                gw[w_base + i * d.kw + j] +=
                                    gv * x[x_base + hi * d.w + wi] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    gw.into_iter().map(|v| v as f32).collect()
}

impl Tape {
    /// Cross-correlation of x [B,C,H,W] with w [O,C,kh,kw].
    pub fn conv2d(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let d = conv_dims("conv2d", x.shape(), w.shape(), stride, padding)?;
        if let Some(b) = bias {
            if b.shape() != [d.o] {
                return Err(Error::shape(
                    "conv2d",
                    alloc::format!("bias {} must be [{}]", fmt_shape(b.shape()), d.o),
                ));
            }
        }
        let out = conv_forward(x.data(), w.data(), bias.map(|b| b.data()), &d, stride, padding);
        let out_shape = vec![d.b, d.o, d.ho, d.wo];
        let xd = x.data_arc();
        let wd = w.data_arc();
        let has_bias = bias.is_some();

        let mut inputs: Vec<&Tensor> = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.push_op(
            "conv2d",
            &inputs,
            out_shape,
            out,
            Box::new(move |g, want| {
                let gx = want[0].then(|| {
                    conv_input_grad(g, &wd, &d, stride, padding)
                        .into_iter()
                        .map(|v| v as f32)
                        .collect()
                });
                let gw = want[1].then(|| conv_weight_grad(g, &xd, &d, stride, padding));
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(want[2].then(|| {
                        let mut acc = vec![0.0f64; d.o];
                        for b in 0..d.b {
                            for o in 0..d.o {
                                let base = (b * d.o + o) * d.ho * d.wo;
                                for &gv in &g[base..base + d.ho * d.wo] {
                                    acc[o] += gv as f64;
                                }
                            }
                        }
                        acc.into_iter().map(|v| v as f32).collect()
                    }));
                }
                grads
            }),
        )
    }

    /// Adjoint of conv2d with the same weight layout: maps [B,O,Ho,Wo] back to
    /// [B,C,H,W] with H = (Ho-1)*stride + kh - 2*padding. Bias has C entries.
    pub fn conv_transpose2d(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let xsh = x.shape();
        let wsh = w.shape();
        if xsh.len() != 4 || wsh.len() != 4 || xsh[1] != wsh[0] {
            return Err(Error::shape_2("conv_transpose2d", xsh, wsh));
        }
        if stride == 0 {
            return Err(Error::invalid("stride", "must be positive"));
        }
        let (kh, kw) = (wsh[2], wsh[3]);
        let out_dim = |inp: usize, k: usize| -> Result<usize> {
            match ((inp - 1) * stride + k).checked_sub(2 * padding) {
                Some(v) if v > 0 => Ok(v),
                _ => Err(Error::shape(
                    "conv_transpose2d",
                    alloc::format!("padding {padding} swallows the {kh}x{kw} kernel output"),
                )),
            }
        };
        let h = out_dim(xsh[2], kh)?;
        let w_out = out_dim(xsh[3], kw)?;
        let d = ConvDims {
            b: xsh[0],
            c: wsh[1],
            h,
            w: w_out,
            o: xsh[1],
            kh,
            kw,
            ho: xsh[2],
            wo: xsh[3],
        };
        if let Some(b) = bias {
            if b.shape() != [d.c] {
                return Err(Error::shape(
                    "conv_transpose2d",
                    alloc::format!("bias {} must be [{}]", fmt_shape(b.shape()), d.c),
                ));
            }
        }

        let mut out = conv_input_grad(x.data(), w.data(), &d, stride, padding);
        if let Some(b) = bias {
            let spatial = d.h * d.w;
            for bb in 0..d.b {
                for c in 0..d.c {
                    let bv = b.data()[c] as f64;
                    let base = (bb * d.c + c) * spatial;
                    for v in &mut out[base..base + spatial] {
                        *v += bv;
                    }
                }
            }
        }
        let out: Vec<f32> = out.into_iter().map(|v| v as f32).collect();
        let out_shape = vec![d.b, d.c, d.h, d.w];
        let xd = x.data_arc();
        let wd = w.data_arc();
        let has_bias = bias.is_some();

        let mut inputs: Vec<&Tensor> = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.push_op(
            "conv_transpose2d",
            &inputs,
            out_shape,
            out,
            Box::new(move |g, want| {
                // adjoint of the adjoint: dx is a plain conv of g with w
                let gx = want[0].then(|| conv_forward(g, &wd, None, &d, stride, padding));
                let gw = want[1].then(|| conv_weight_grad(&xd, g, &d, stride, padding));
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(want[2].then(|| {
                        let spatial = d.h * d.w;
                        let mut acc = vec![0.0f64; d.c];
                        for bb in 0..d.b {
                            for c in 0..d.c {
                                let base = (bb * d.c + c) * spatial;
                                for &gv in &g[base..base + spatial] {
                                    acc[c] += gv as f64;
                                }
                            }
                        }
                        acc.into_iter().map(|v| v as f32).collect()
                    }));
                }
                grads
            }),
        )
    }

    /// [B, C·r², H, W] -> [B, C, H·r, W·r];
    /// out[b,c,h·r+i,w·r+j] = x[b, c·r²+i·r+j, h, w].
    pub fn pixel_shuffle(&self, x: &Tensor, r: usize) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() != 4 || r == 0 || sh[1] % (r * r) != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                alloc::format!("channels of {} not divisible by {}", fmt_shape(sh), r * r),
            ));
        }
        let (b, c_in, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let c = c_in / (r * r);
        let out_shape = vec![b, c, h * r, w * r];
        let out = shuffle_copy(x.data(), b, c, h, w, r, true);
        self.push_op(
            "pixel_shuffle",
            &[x],
            out_shape,
            out,
            Box::new(move |g, want| {
                if !want[0] {
                    return vec![None];
                }
                vec![Some(shuffle_copy(g, b, c, h, w, r, false))]
            }),
        )
    }

    /// Inverse of pixel_shuffle: [B, C, H·r, W·r] -> [B, C·r², H, W].
    pub fn pixel_unshuffle(&self, x: &Tensor, r: usize) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() != 4 || r == 0 || sh[2] % r != 0 || sh[3] % r != 0 {
            return Err(Error::shape(
                "pixel_unshuffle",
                alloc::format!("spatial dims of {} not divisible by {r}", fmt_shape(sh)),
            ));
        }
        let (b, c, hr, wr) = (sh[0], sh[1], sh[2], sh[3]);
        let (h, w) = (hr / r, wr / r);
        let out_shape = vec![b, c * r * r, h, w];
        let out = shuffle_copy(x.data(), b, c, h, w, r, false);
        self.push_op(
            "pixel_unshuffle",
            &[x],
            out_shape,
            out,
            Box::new(move |g, want| {
                if !want[0] {
                    return vec![None];
                }
                vec![Some(shuffle_copy(g, b, c, h, w, r, true))]
            }),
        )
    }
}

/// One rearrangement kernel for both directions. `forward` true maps
/// [B,C·r²,H,W] to [B,C,H·r,W·r]; false is the exact inverse.
fn shuffle_copy(src: &[f32], b: usize, c: usize, h: usize, w: usize, r: usize, forward: bool) -> Vec<f32> {
    let mut dst = vec![0.0f32; src.len()];
    for bb in 0..b {
        for cc in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ch_in = bb * c * r * r + cc * r * r + i * r + j;
                    for hh in 0..h {
                        for ww in 0..w {
                            let packed = (ch_in * h + hh) * w + ww;
                            let wide = ((bb * c + cc) * h * r + hh * r + i) * w * r + ww * r + j;
                            if forward {
                                dst[wide] = src[packed];
                            } else {
                                dst[packed] = src[wide];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}
