//! Elementwise ops, reductions, and shape manipulation.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{fmt_shape, Error, Result};
use crate::math;

use super::{strides_of, Tape, Tensor};

impl Tape {
    fn unary_pointwise(
        &self,
        op: &'static str,
        x: &Tensor,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32) -> f32 + 'static,
    ) -> Result<Tensor> {
        let out: Vec<f32> = x.data().iter().map(|&v| f(v)).collect();
        let xd = x.data_arc();
        self.push_op(
            op,
            &[x],
            x.shape().to_vec(),
            out,
            Box::new(move |g, want| {
                if !want[0] {
                    return vec![None];
                }
                vec![Some(
                    g.iter().zip(xd.iter()).map(|(&gi, &xi)| gi * df(xi)).collect(),
                )]
            }),
        )
    }

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f32, f32) -> f32,
        // per-element partials w.r.t. a and b
        dfa: impl Fn(f32, f32) -> f32 + 'static,
        dfb: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape_2(op, a.shape(), b.shape()));
        }
        let out: Vec<f32> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ad = a.data_arc();
        let bd = b.data_arc();
        self.push_op(
            op,
            &[a, b],
            a.shape().to_vec(),
            out,
            Box::new(move |g, want| {
                let ga = want[0].then(|| {
                    g.iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(&gi, (&x, &y))| gi * dfa(x, y))
                        .collect()
                });
                let gb = want[1].then(|| {
                    g.iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(&gi, (&x, &y))| gi * dfb(x, y))
                        .collect()
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape("add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn neg(&self, x: &Tensor) -> Result<Tensor> {
        self.unary_pointwise("neg", x, |v| -v, |_| -1.0)
    }

    pub fn scale(&self, x: &Tensor, c: f32) -> Result<Tensor> {
        self.unary_pointwise("scale", x, move |v| v * c, move |_| c)
    }

    pub fn add_scalar(&self, x: &Tensor, c: f32) -> Result<Tensor> {
        self.unary_pointwise("add_scalar", x, move |v| v + c, |_| 1.0)
    }

    /// |x|, with subgradient 0 at the kink.
    pub fn abs(&self, x: &Tensor) -> Result<Tensor> {
        self.unary_pointwise(
            "abs",
            x,
            math::fabsf,
            |v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// max(x, 0). Gradient at exactly 0 is defined as 0.
    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        self.unary_pointwise(
            "relu",
            x,
            |v| if v > 0.0 { v } else { 0.0 },
            |v| if v > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        self.unary_pointwise("gelu", x, math::gelu, math::gelu_grad)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.unary_pointwise("sigmoid", x, math::sigmoid, |v| {
            let s = math::sigmoid(v);
            s * (1.0 - s)
        })
    }

    /// ln(1 + e^x), evaluated in the overflow-safe form.
    pub fn softplus(&self, x: &Tensor) -> Result<Tensor> {
        self.unary_pointwise("softplus", x, math::softplus, math::sigmoid)
    }

    /// Sum of all elements into a scalar (f64 accumulation).
    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        let numel = x.numel();
        self.push_op(
            "sum_all",
            &[x],
            vec![],
            vec![s as f32],
            Box::new(move |g, want| {
                if !want[0] {
                    return vec![None];
                }
                vec![Some(vec![g[0]; numel])]
            }),
        )
    }

    /// Mean of all elements into a scalar. Errors on an empty tensor.
    pub fn mean_all(&self, x: &Tensor) -> Result<Tensor> {
        if x.numel() == 0 {
            return Err(Error::shape("mean_all", "empty tensor has no mean".into()));
        }
        let n = x.numel() as f64;
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        let numel = x.numel();
        self.push_op(
            "mean_all",
            &[x],
            vec![],
            vec![(s / n) as f32],
            Box::new(move |g, want| {
                if !want[0] {
                    return vec![None];
                }
                let scale = g[0] / numel as f32;
                vec![Some(vec![scale; numel])]
            }),
        )
    }

    /// x + b where b broadcasts over the last axis: x is [..., d], b is [d].
    pub fn add_bias(&self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let d = match x.shape().last() {
            Some(&d) => d,
            None => return Err(Error::shape("add_bias", "x must have at least 1 axis".into())),
        };
        if b.shape() != [d] {
            return Err(Error::shape(
                "add_bias",
                alloc::format!(
                    "bias {} does not match last axis of {}",
                    fmt_shape(b.shape()),
                    fmt_shape(x.shape())
                ),
            ));
        }
        let bd = b.data();
        let out: Vec<f32> = x
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(bd).map(|(&v, &bv)| v + bv))
            .collect();
        self.push_op(
            "add_bias",
            &[x, b],
            x.shape().to_vec(),
            out,
            Box::new(move |g, want| {
                let gx = want[0].then(|| g.to_vec());
                let gb = want[1].then(|| {
                    let mut acc = vec![0.0f64; d];
                    for row in g.chunks_exact(d) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v as f64;
                        }
                    }
                    acc.into_iter().map(|v| v as f32).collect()
                });
                vec![gx, gb]
            }),
        )
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::shape(
                "reshape",
                alloc::format!(
                    "cannot view {} as {} ({} vs {} elements)",
                    fmt_shape(x.shape()),
                    fmt_shape(shape),
                    x.numel(),
                    numel
                ),
            ));
        }
        self.push_op(
            "reshape",
            &[x],
            shape.to_vec(),
            x.data().to_vec(),
            Box::new(move |g, want| {
                if !want[0] {
                    return vec![None];
                }
                vec![Some(g.to_vec())]
            }),
        )
    }

    /// Reorders axes: output axis i takes input axis `axes[i]`.
    pub fn permute(&self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let nd = x.shape().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || core::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                alloc::format!("{axes:?} is not a permutation of 0..{nd}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let out = permute_copy(x.data(), x.shape(), axes);
        // backward permutes by the inverse axis order
        let mut inv = vec![0usize; nd];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        let fwd_out_shape = out_shape.clone();
        self.push_op(
            "permute",
            &[x],
            out_shape,
            out,
            Box::new(move |g, want| {
                if !want[0] {
                    return vec![None];
                }
                vec![Some(permute_copy(g, &fwd_out_shape, &inv))]
            }),
        )
    }

    /// Concatenates tensors along `axis`. All other axes must agree.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "need at least one tensor".into()));
        }
        let nd = parts[0].shape().len();
        if axis >= nd {
            return Err(Error::shape(
                "concat",
                alloc::format!("axis {axis} out of range for {nd} axes"),
            ));
        }
        for p in parts {
            if p.shape().len() != nd
                || p.shape()
                    .iter()
                    .zip(parts[0].shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape_2("concat", parts[0].shape(), p.shape()));
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();

        // outer = product of axes before `axis`, inner = product after
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_axis: usize = sizes.iter().sum();

        let mut out = vec![0.0f32; outer * total_axis * inner];
        for o in 0..outer {
            let mut dst = o * total_axis * inner;
            for (p, &sz) in parts.iter().zip(&sizes) {
                let src = o * sz * inner;
                out[dst..dst + sz * inner].copy_from_slice(&p.data()[src..src + sz * inner]);
                dst += sz * inner;
            }
        }

        let sizes_b = sizes.clone();
        self.push_op(
            "concat",
            parts,
            out_shape,
            out,
            Box::new(move |g, want| {
                let mut grads: Vec<Option<Vec<f32>>> = sizes_b
                    .iter()
                    .zip(want)
                    .map(|(&sz, &w)| w.then(|| vec![0.0f32; outer * sz * inner]))
                    .collect();
                for o in 0..outer {
                    let mut src = o * total_axis * inner;
                    for (k, &sz) in sizes_b.iter().enumerate() {
                        if let Some(gk) = grads[k].as_mut() {
                            let dst = o * sz * inner;
                            gk[dst..dst + sz * inner].copy_from_slice(&g[src..src + sz * inner]);
                        }
                        src += sz * inner;
                    }
                }
                grads
            }),
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let nd = x.shape().len();
        if axis >= nd {
            return Err(Error::shape(
                "slice",
                alloc::format!("axis {axis} out of range for {nd} axes"),
            ));
        }
        let dim = x.shape()[axis];
        if start + len > dim {
            return Err(Error::shape(
                "slice",
                alloc::format!("range {start}..{} exceeds axis size {dim}", start + len),
            ));
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[axis] = len;
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();

        let mut out = vec![0.0f32; outer * len * inner];
        for o in 0..outer {
            let src = (o * dim + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&x.data()[src..src + len * inner]);
        }
        let x_numel = x.numel();
        self.push_op(
            "slice",
            &[x],
            out_shape,
            out,
            Box::new(move |g, want| {
                if !want[0] {
                    return vec![None];
                }
                let mut gx = vec![0.0f32; x_numel];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// Copies `data` (shaped `shape`) into a new buffer with axes reordered so
/// output axis i is input axis `axes[i]`.
fn permute_copy(data: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let nd = shape.len();
    if nd == 0 {
        return data.to_vec();
    }
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0f32; numel];
    // walk output positions in order, mapping each to its input offset
    let mut idx = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut src = 0usize;
        for (i, &a) in axes.iter().enumerate() {
            src += idx[i] * in_strides[a];
        }
        *slot = data[src];
        for i in (0..nd).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

// Tests live with the op contracts they pin down.
#[cfg(test)]
mod tests {
    use super::*;

    fn t(tape: &Tape, shape: &[usize], data: &[f32]) -> Tensor {
        tape.leaf(shape, data.to_vec(), true).unwrap()
    }

    #[test]
    fn relu_clamps_and_passes() {
        let tape = Tape::new();
        let x = t(&tape, &[2], &[-2.0, 3.0]);
        let y = tape.relu(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0]);
    }

    #[test]
    fn add_rejects_shape_mismatch_naming_both() {
        let tape = Tape::new();
        let a = t(&tape, &[2], &[1.0, 2.0]);
        let b = t(&tape, &[3], &[1.0, 2.0, 3.0]);
        let err = tape.add(&a, &b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn mul_grad_uses_both_factors() {
        let tape = Tape::new();
        let a = t(&tape, &[2], &[3.0, 4.0]);
        let b = t(&tape, &[2], &[5.0, 6.0]);
        let loss = tape.sum_all(&tape.mul(&a, &b).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&a).unwrap().data(), &[5.0, 6.0]);
        assert_eq!(tape.grad(&b).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn nonfinite_forward_is_an_error() {
        let tape = Tape::new();
        let x = t(&tape, &[1], &[1e30]);
        let sq = tape.mul(&x, &x).unwrap_err(); // 1e60 overflows f32
        assert!(matches!(sq, Error::NonFinite { .. }));
    }

    #[test]
    fn permute_roundtrips_and_moves_axes() {
        let tape = Tape::new();
        let x = t(&tape, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = tape.permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = tape.permute(&y, &[1, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn permute_grad_scatters_back() {
        let tape = Tape::new();
        let x = t(&tape, &[2, 3], &[0.0; 6]);
        let y = tape.permute(&x, &[1, 0]).unwrap();
        let w = Tensor::from_vec(&[3, 2], alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let loss = tape.sum_all(&tape.mul(&y, &tape.watch(&w).unwrap()).unwrap()).unwrap();
        // w attaches as a leaf; only x's grad matters here
        tape.backward(&loss).unwrap();
        // grad wrt x = w permuted back to x's layout
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = t(&tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&tape, &[2, 1], &[9.0, 8.0]);
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = tape.slice(&c, 1, 0, 2).unwrap();
        assert_eq!(back.data(), a.data());
        let tail = tape.slice(&c, 1, 2, 1).unwrap();
        assert_eq!(tail.data(), b.data());
    }

    #[test]
    fn concat_grad_splits() {
        let tape = Tape::new();
        let a = t(&tape, &[1, 2], &[0.0, 0.0]);
        let b = t(&tape, &[1, 1], &[0.0]);
        let c = tape.concat(&[&a, &b], 1).unwrap();
        let w = tape
            .watch(&Tensor::from_vec(&[1, 3], alloc::vec![10.0, 20.0, 30.0]).unwrap())
            .unwrap();
        let loss = tape.sum_all(&tape.mul(&c, &w).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(tape.grad(&b).unwrap().data(), &[30.0]);
    }

    #[test]
    fn add_bias_broadcasts_last_axis() {
        let tape = Tape::new();
        let x = t(&tape, &[2, 3], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = t(&tape, &[3], &[Q0, Q1, Q2]);
        let y = tape.add_bias(&x, &b).unwrap();
        assert_eq!(y.data(), &[Q0, Q1, Q2, 1.0 + Q0, 1.0 + Q1, 1.0 + Q2]);
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    const Q0: f32 = 0.5;
    const Q1: f32 = -1.5;
    const Q2: f32 = 2.25;
}
