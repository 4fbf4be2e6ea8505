//! Softmax, layer norm, and batch norm.
//!
//! All slice statistics accumulate in f64. Zero-variance slices stay finite
//! through the epsilon term rather than erroring.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

use super::{Tape, Tensor};

/// Decomposes `shape` around `axis` into (outer, len, inner) so element
/// (o, j, i) of a slice lives at o*len*inner + j*inner + i.
fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            alloc::format!("axis {axis} out of range for {} axes", shape.len()),
        ));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tape {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(x.shape(), axis, "softmax")?;
        let xd = x.data();
        let mut out = vec![0.0f32; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f32::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(xd[at(j)]);
                }
                let mut denom = 0.0f64;
                for j in 0..len {
                    let e = math::expf(xd[at(j)] - mx);
                    out[at(j)] = e;
                    denom += e as f64;
                }
                for j in 0..len {
                    out[at(j)] = (out[at(j)] as f64 / denom) as f32;
                }
            }
        }
        let s = Arc::new(out.clone());
        self.push_op(
            "softmax",
            &[x],
            x.shape().to_vec(),
            out,
            Box::new(move |g, want| {
                if !want[0] {
                    return vec![None];
                }
                let mut gx = vec![0.0f32; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = 0.0f64;
                        for j in 0..len {
                            dot += g[at(j)] as f64 * s[at(j)] as f64;
                        }
                        for j in 0..len {
                            gx[at(j)] = (s[at(j)] as f64 * (g[at(j)] as f64 - dot)) as f32;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Row-causal softmax over the last two axes of scores shaped [..., S, S]:
    /// row t is softmaxed over columns 0..=t and columns t+1.. are exactly 0.0,
    /// so outputs at position t never read logits past t.
    pub fn softmax_causal(&self, x: &Tensor) -> Result<Tensor> {
        let nd = x.shape().len();
        if nd < 2 || x.shape()[nd - 1] != x.shape()[nd - 2] {
            return Err(Error::shape(
                "softmax_causal",
                alloc::format!("need [..., S, S] scores, got {}", crate::error::fmt_shape(x.shape())),
            ));
        }
        let s_len = x.shape()[nd - 1];
        let mats: usize = x.numel() / (s_len * s_len);
        let xd = x.data();
        let mut out = vec![0.0f32; xd.len()];
        for m in 0..mats {
            for t in 0..s_len {
                let row = m * s_len * s_len + t * s_len;
                let valid = &xd[row..row + t + 1];
                let mut mx = f32::NEG_INFINITY;
                for &v in valid {
                    mx = mx.max(v);
                }
                let mut denom = 0.0f64;
                for (j, &v) in valid.iter().enumerate() {
                    let e = math::expf(v - mx);
                    out[row + j] = e;
                    denom += e as f64;
                }
                for j in 0..=t {
                    out[row + j] = (out[row + j] as f64 / denom) as f32;
                }
                // columns t+1.. already hold literal 0.0 from the allocation
            }
        }
        let s = Arc::new(out.clone());
        self.push_op(
            "softmax_causal",
            &[x],
            x.shape().to_vec(),
            out,
            Box::new(move |g, want| {
                if !want[0] {
                    return vec![None];
                }
                let mut gx = vec![0.0f32; g.len()];
                for m in 0..mats {
                    for t in 0..s_len {
                        let row = m * s_len * s_len + t * s_len;
                        let mut dot = 0.0f64;
                        for j in 0..=t {
                            dot += g[row + j] as f64 * s[row + j] as f64;
                        }
                        for j in 0..=t {
                            gx[row + j] =
                                (s[row + j] as f64 * (g[row + j] as f64 - dot)) as f32;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Normalizes along `axis` to zero mean and unit variance (biased, f64
    /// stats, epsilon inside the root), then applies gamma/beta of length
    /// shape[axis].
    pub fn layer_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        axis: usize,
        eps: f32,
    ) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(x.shape(), axis, "layer_norm")?;
        if gamma.shape() != [len] || beta.shape() != [len] {
            return Err(Error::shape(
                "layer_norm",
                alloc::format!(
                    "gamma {} / beta {} must both be [{len}]",
                    crate::error::fmt_shape(gamma.shape()),
                    crate::error::fmt_shape(beta.shape())
                ),
            ));
        }
        let xd = x.data();
        let gd = gamma.data_arc();
        let mut out = vec![0.0f32; xd.len()];
        let mut xhat = vec![0.0f32; xd.len()];
        let mut inv_sd = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mean = 0.0f64;
                for j in 0..len {
                    mean += xd[at(j)] as f64;
                }
                mean /= len as f64;
                let mut var = 0.0f64;
                for j in 0..len {
                    let d = xd[at(j)] as f64 - mean;
                    var += d * d;
                }
                var /= len as f64;
                let inv = 1.0 / math::sqrt64(var + eps as f64);
                inv_sd[o * inner + i] = inv as f32;
                for j in 0..len {
                    let h = ((xd[at(j)] as f64 - mean) * inv) as f32;
                    xhat[at(j)] = h;
                    out[at(j)] = h * gd[j] + beta.data()[j];
                }
            }
        }
        let xhat = Arc::new(xhat);
        let inv_sd = Arc::new(inv_sd);
        self.push_op(
            "layer_norm",
            &[x, gamma, beta],
            x.shape().to_vec(),
            out,
            Box::new(move |g, want| {
                let gx = want[0].then(|| {
                    let mut buf = vec![0.0f32; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let inv = inv_sd[o * inner + i] as f64;
                            let mut mean_gg = 0.0f64;
                            let mut mean_ggx = 0.0f64;
                            for j in 0..len {
                                let gg = g[at(j)] as f64 * gd[j] as f64;
                                mean_gg += gg;
                                mean_ggx += gg * xhat[at(j)] as f64;
                            }
                            mean_gg /= len as f64;
                            mean_ggx /= len as f64;
                            for j in 0..len {
                                let gg = g[at(j)] as f64 * gd[j] as f64;
                                buf[at(j)] = (inv
                                    * (gg - mean_gg - xhat[at(j)] as f64 * mean_ggx))
                                    as f32;
                            }
                        }
                    }
                    buf
                });
                let ggamma = want[1].then(|| {
                    let mut acc = vec![0.0f64; len];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            for j in 0..len {
                                acc[j] += g[at(j)] as f64 * xhat[at(j)] as f64;
                            }
                        }
                    }
                    acc.into_iter().map(|v| v as f32).collect()
                });
                let gbeta = want[2].then(|| {
                    let mut acc = vec![0.0f64; len];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            for j in 0..len {
                                acc[j] += g[at(j)] as f64;
                            }
                        }
                    }
                    acc.into_iter().map(|v| v as f32).collect()
                });
                vec![gx, ggamma, gbeta]
            }),
        )
    }
}

/// Running statistics tracked across batch_norm training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

impl Tape {
    /// Per-channel normalization of a [C, H, W] feature map. Training mode
    /// normalizes with batch statistics and folds them into `state` with the
    /// given momentum (unbiased variance in the running estimate); eval mode
    /// normalizes with the tracked statistics.
    pub fn batch_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        state: &mut BatchNormState,
        training: bool,
        momentum: f32,
        eps: f32,
    ) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() != 3 {
            return Err(Error::shape(
                "batch_norm",
                alloc::format!("need [C, H, W], got {}", crate::error::fmt_shape(sh)),
            ));
        }
        let (c, spatial) = (sh[0], sh[1] * sh[2]);
        if gamma.shape() != [c] || beta.shape() != [c] || state.running_mean.len() != c {
            return Err(Error::shape(
                "batch_norm",
                alloc::format!("gamma/beta/state must all cover {c} channels"),
            ));
        }
        let xd = x.data();
        let gd = gamma.data_arc();

        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        if training {
            for ch in 0..c {
                let sl = &xd[ch * spatial..(ch + 1) * spatial];
                let m: f64 = sl.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64;
                let v: f64 = sl.iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>()
                    / spatial as f64;
                mean[ch] = m;
                var[ch] = v;
                let unbiased = if spatial > 1 {
                    v * spatial as f64 / (spatial - 1) as f64
                } else {
                    v
                };
                state.running_mean[ch] =
                    (1.0 - momentum) * state.running_mean[ch] + momentum * m as f32;
                state.running_var[ch] =
                    (1.0 - momentum) * state.running_var[ch] + momentum * unbiased as f32;
            }
        } else {
            for ch in 0..c {
                mean[ch] = state.running_mean[ch] as f64;
                var[ch] = state.running_var[ch] as f64;
            }
        }

        let mut out = vec![0.0f32; xd.len()];
        let mut xhat = vec![0.0f32; xd.len()];
        let mut inv_sd = vec![0.0f32; c];
        for ch in 0..c {
            let inv = 1.0 / math::sqrt64(var[ch] + eps as f64);
            inv_sd[ch] = inv as f32;
            let g = gd[ch];
            let b = beta.data()[ch];
            for s in 0..spatial {
                let h = ((xd[ch * spatial + s] as f64 - mean[ch]) * inv) as f32;
                xhat[ch * spatial + s] = h;
                out[ch * spatial + s] = h * g + b;
            }
        }
        let xhat = Arc::new(xhat);
        let inv_sd = Arc::new(inv_sd);
        self.push_op(
            "batch_norm",
            &[x, gamma, beta],
            sh.to_vec(),
            out,
            Box::new(move |g, want| {
                let gx = want[0].then(|| {
                    let mut buf = vec![0.0f32; g.len()];
                    for ch in 0..c {
                        let inv = inv_sd[ch] as f64;
                        let gch = gd[ch] as f64;
                        if training {
                            let mut mean_gg = 0.0f64;
                            let mut mean_ggx = 0.0f64;
                            for s in 0..spatial {
                                let gg = g[ch * spatial + s] as f64 * gch;
                                mean_gg += gg;
                                mean_ggx += gg * xhat[ch * spatial + s] as f64;
                            }
                            mean_gg /= spatial as f64;
                            mean_ggx /= spatial as f64;
                            for s in 0..spatial {
                                let gg = g[ch * spatial + s] as f64 * gch;
                                buf[ch * spatial + s] = (inv
                                    * (gg - mean_gg
                                        - xhat[ch * spatial + s] as f64 * mean_ggx))
                                    as f32;
                            }
                        } else {
                            // eval stats are constants, so the chain is linear
                            for s in 0..spatial {
                                buf[ch * spatial + s] =
                                    (g[ch * spatial + s] as f64 * gch * inv) as f32;
                            }
                        }
                    }
                    buf
                });
                let ggamma = want[1].then(|| {
                    let mut acc = vec![0.0f64; c];
                    for ch in 0..c {
                        for s in 0..spatial {
                            acc[ch] += g[ch * spatial + s] as f64 * xhat[ch * spatial + s] as f64;
                        }
                    }
                    acc.into_iter().map(|v| v as f32).collect()
                });
                let gbeta = want[2].then(|| {
                    let mut acc = vec![0.0f64; c];
                    for ch in 0..c {
                        for s in 0..spatial {
                            acc[ch] += g[ch * spatial + s] as f64;
                        }
                    }
                    acc.into_iter().map(|v| v as f32).collect()
                });
                vec![gx, ggamma, gbeta]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(tape: &Tape, shape: &[usize], data: &[f32]) -> Tensor {
        tape.leaf(shape, data.to_vec(), true).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = t(&tape, &[3], &[0.0, 0.0, 0.0]);
        let y = tape.softmax(&x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let tape = Tape::new();
        let x = t(&tape, &[2, 4], &[0.3, -1.2, 2.0, 0.7, 5.0, 5.0, 4.0, -3.0]);
        let y = tape.softmax(&x, 1).unwrap();
        for row in y.data().chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let shifted: Vec<f32> = x.data().iter().map(|&v| v + 100.0).collect();
        let xs = t(&tape, &[2, 4], &shifted);
        let ys = tape.softmax(&xs, 1).unwrap();
        for (&a, &b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_along_middle_axis() {
        let tape = Tape::new();
        let x = t(&tape, &[1, 2, 2], &[1.0, 10.0, 1.0, -10.0]);
        let y = tape.softmax(&x, 1).unwrap();
        // columns (axis-1 slices) each sum to 1
        let d = y.data();
        assert!((d[0] + d[2] - 1.0).abs() < 1e-6);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-6);
        assert!((d[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn causal_softmax_zeroes_future_exactly() {
        let tape = Tape::new();
        let x = t(&tape, &[3, 3], &[0.5, 9.0, 9.0, 0.1, 0.2, 9.0, 1.0, 2.0, 3.0]);
        let y = tape.softmax_causal(&x).unwrap();
        let d = y.data();
        assert_eq!(d[0], 1.0); // row 0: single valid entry
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[5], 0.0);
        assert!((d[3] + d[4] - 1.0).abs() < 1e-6);
        assert!((d[6] + d[7] + d[8] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn causal_softmax_row_ignores_future_logits() {
        let tape = Tape::new();
        let a = t(&tape, &[2, 2], &[0.3, 111.0, 0.4, 0.6]);
        let b = t(&tape, &[2, 2], &[0.3, -55.0, 0.4, 0.6]);
        let ya = tape.softmax_causal(&a).unwrap();
        let yb = tape.softmax_causal(&b).unwrap();
        assert_eq!(ya.data()[0], yb.data()[0]);
        assert_eq!(ya.data()[2..], yb.data()[2..]);
    }

    #[test]
    fn layer_norm_centers_and_scales() {
        let tape = Tape::new();
        let x = t(&tape, &[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]);
        let gamma = t(&tape, &[4], &[1.0; 4]);
        let beta = t(&tape, &[4], &[0.0; 4]);
        let y = tape.layer_norm(&x, &gamma, &beta, 1, 1e-5).unwrap();
        for row in y.data().chunks(4) {
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn layer_norm_zero_variance_stays_finite() {
        let tape = Tape::new();
        let x = t(&tape, &[1, 4], &[7.0; 4]);
        let gamma = t(&tape, &[4], &[1.0; 4]);
        let beta = t(&tape, &[4], &[0.5; 4]);
        let y = tape.layer_norm(&x, &gamma, &beta, 1, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn batch_norm_training_updates_running_stats() {
        let tape = Tape::new();
        let x = t(&tape, &[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]);
        let gamma = t(&tape, &[1], &[1.0]);
        let beta = t(&tape, &[1], &[0.0]);
        let mut state = BatchNormState::new(1);
        let y = tape
            .batch_norm(&x, &gamma, &beta, &mut state, true, 0.1, 1e-5)
            .unwrap();
        // batch mean 4, biased var 5, normalized output is centered
        let s: f32 = y.data().iter().sum();
        assert!(s.abs() < 1e-5);
        assert!((state.running_mean[0] - 0.4).abs() < 1e-6);
        // unbiased var = 5 * 4/3; running = 0.9*1 + 0.1*that
        assert!((state.running_var[0] - (0.9 + 0.1 * 5.0 * 4.0 / 3.0)).abs() < 1e-5);
    }

    #[test]
    fn batch_norm_eval_uses_tracked_stats() {
        let tape = Tape::new();
        let x = t(&tape, &[1, 1, 2], &[2.0, 4.0]);
        let gamma = t(&tape, &[1], &[2.0]);
        let beta = t(&tape, &[1], &[1.0]);
        let mut state = BatchNormState {
            running_mean: alloc::vec![2.0],
            running_var: alloc::vec![4.0],
        };
        let y = tape
            .batch_norm(&x, &gamma, &beta, &mut state, false, 0.1, 0.0)
            .unwrap();
        // (2-2)/2*2+1 = 1, (4-2)/2*2+1 = 3
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 3.0).abs() < 1e-6);
    }
}
