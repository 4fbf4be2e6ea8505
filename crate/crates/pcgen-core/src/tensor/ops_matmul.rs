//! Matrix multiplication with f64 accumulation.
//!
//! Accepts [m,k]x[k,n], equal-batch [..,m,k]x[..,k,n], and either operand
//! as a shared 2-D matrix broadcast over the other's batch dims.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::{Tape, Tensor};

/// out[i,j] += sum_kk a[i,kk] * b[kk,j], accumulated in f64.
fn mm_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv as f64;
            }
        }
    }
}

/// out[i,kk] += sum_j g[i,j] * b[kk,j]  (g · bᵀ)
fn mm_nt_acc(g: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (kk, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0f64;
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc += gv as f64 * bv as f64;
            }
            *o += acc;
        }
    }
}

/// out[kk,j] += sum_i a[i,kk] * g[i,j]  (aᵀ · g)
fn mm_tn_acc(a: &[f32], g: &[f32], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let o_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in o_row.iter_mut().zip(g_row) {
                *o += av * gv as f64;
            }
        }
    }
}

fn to_f32(buf: Vec<f64>) -> Vec<f32> {
    buf.into_iter().map(|v| v as f32).collect()
}

impl Tape {
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::shape_2("matmul", ash, bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(Error::shape_2("matmul", ash, bsh));
        }
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        // a_shared / b_shared: that operand is a single matrix reused per batch
        let (batch_dims, a_shared, b_shared): (&[usize], bool, bool) =
            if a_batch == b_batch {
                (a_batch, false, false)
            } else if a_batch.is_empty() {
                (b_batch, true, false)
            } else if b_batch.is_empty() {
                (a_batch, false, true)
            } else {
                return Err(Error::shape_2("matmul", ash, bsh));
            };
        let batches: usize = batch_dims.iter().product();
        let mut out_shape = batch_dims.to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let ad = a.data_arc();
        let bd = b.data_arc();
        let mut out = vec![0.0f64; batches * m * n];
        for t in 0..batches {
            let a_off = if a_shared { 0 } else { t * m * k };
            let b_off = if b_shared { 0 } else { t * k * n };
            mm_acc(
                &ad[a_off..a_off + m * k],
                &bd[b_off..b_off + k * n],
                m,
                k,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }

        self.push_op(
            "matmul",
            &[a, b],
            out_shape,
            to_f32(out),
            Box::new(move |g, want| {
                let ga = want[0].then(|| {
                    let a_len = if a_shared { m * k } else { batches * m * k };
                    let mut buf = vec![0.0f64; a_len];
                    for t in 0..batches {
                        let a_off = if a_shared { 0 } else { t * m * k };
                        let b_off = if b_shared { 0 } else { t * k * n };
                        mm_nt_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &bd[b_off..b_off + k * n],
                            m,
                            k,
                            n,
                            &mut buf[a_off..a_off + m * k],
                        );
                    }
                    to_f32(buf)
                });
                let gb = want[1].then(|| {
                    let b_len = if b_shared { k * n } else { batches * k * n };
                    let mut buf = vec![0.0f64; b_len];
                    for t in 0..batches {
                        let a_off = if a_shared { 0 } else { t * m * k };
                        let b_off = if b_shared { 0 } else { t * k * n };
                        mm_tn_acc(
                            &ad[a_off..a_off + m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut buf[b_off..b_off + k * n],
                        );
                    }
                    to_f32(buf)
                });
                vec![ga, gb]
            }),
        )
    }

    /// x · w + b for x [.., m, k], w [k, n], b [n].
    pub fn linear(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        self.add_bias(&y, b)
    }
}
