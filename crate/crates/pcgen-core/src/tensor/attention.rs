//! Multi-head attention assembled from primitive tape ops, so gradients come
//! from the tape rather than a hand-written backward.

use crate::error::{Error, Result};
use crate::math;

use super::{Tape, Tensor};

/// softmax(q·kᵀ/√d_head)·v per head, heads concatenated, then projected by
/// w_o/b_o. Shapes: q [Sq,D], k and v [Sk,D], w_o [D,D], b_o [D].
///
/// With `causal` set (requires Sq == Sk), output row t reads only rows 0..=t
/// of the inputs: masked attention weights are written as literal 0.0, so
/// rows above t cannot move earlier outputs even at the bit level.
pub fn multi_head_attention(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w_o: &Tensor,
    b_o: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<Tensor> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::shape("multi_head_attention", "q/k/v must be [seq, dim]".into()));
    }
    let d = qs[1];
    if ks[1] != d || vs[1] != d || ks[0] != vs[0] {
        return Err(Error::shape_2("multi_head_attention", qs, ks));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "multi_head_attention",
            alloc::format!("dim {d} not divisible by {heads} heads"),
        ));
    }
    let (sq, sk) = (qs[0], ks[0]);
    if causal && sq != sk {
        return Err(Error::shape(
            "multi_head_attention",
            alloc::format!("causal mask needs square attention, got {sq}x{sk}"),
        ));
    }
    let dh = d / heads;

    // [S, D] -> [H, S, dh]
    let split = |x: &Tensor, s: usize| -> Result<Tensor> {
        let r = tape.reshape(x, &[s, heads, dh])?;
        tape.permute(&r, &[1, 0, 2])
    };
    let qh = split(q, sq)?;
    let kh = tape.permute(&tape.reshape(k, &[sk, heads, dh])?, &[1, 2, 0])?; // [H, dh, Sk]
    let vh = split(v, sk)?;

    let scores = tape.scale(&tape.matmul(&qh, &kh)?, 1.0 / math::sqrtf(dh as f32))?;
    let attn = if causal {
        tape.softmax_causal(&scores)?
    } else {
        tape.softmax(&scores, 2)?
    };
    let ctx = tape.matmul(&attn, &vh)?; // [H, Sq, dh]
    let merged = tape.reshape(&tape.permute(&ctx, &[1, 0, 2])?, &[sq, d])?;
    tape.linear(&merged, w_o, b_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::finite_difference_check;
    use alloc::vec::Vec;

    fn rand_t(tape: &Tape, rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect();
        tape.leaf(shape, data, true).unwrap()
    }

    #[test]
    fn single_token_single_head_is_projected_value() {
        let tape = Tape::new();
        let mut rng = Rng::new(31);
        let d = 6;
        let q = rand_t(&tape, &mut rng, &[1, d]);
        let k = rand_t(&tape, &mut rng, &[1, d]);
        let v = rand_t(&tape, &mut rng, &[1, d]);
        let w_o = rand_t(&tape, &mut rng, &[d, d]);
        let b_o = rand_t(&tape, &mut rng, &[d]);
        let out = multi_head_attention(&tape, &q, &k, &v, &w_o, &b_o, 1, false).unwrap();
        let direct = tape.linear(&v, &w_o, &b_o).unwrap();
        assert_eq!(out.data(), direct.data());
    }

    #[test]
    fn indivisible_heads_error() {
        let tape = Tape::new();
        let mut rng = Rng::new(1);
        let q = rand_t(&tape, &mut rng, &[2, 6]);
        let w_o = rand_t(&tape, &mut rng, &[6, 6]);
        let b_o = rand_t(&tape, &mut rng, &[6]);
        assert!(multi_head_attention(&tape, &q, &q, &q, &w_o, &b_o, 4, false).is_err());
    }

    #[test]
    fn causal_outputs_ignore_future_tokens_bitwise() {
        let mut rng = Rng::new(77);
        let (s, d, h) = (5, 8, 2);
        let n = s * d;
        let base: Vec<f32> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let wo: Vec<f32> = (0..d * d).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let bo: Vec<f32> = (0..d).map(|_| rng.uniform(-0.5, 0.5)).collect();

        let run = |inputs: &[f32]| -> Vec<f32> {
            let tape = Tape::inference();
            let x = tape.leaf(&[s, d], inputs.to_vec(), false).unwrap();
            let w_o = tape.leaf(&[d, d], wo.clone(), false).unwrap();
            let b_o = tape.leaf(&[d], bo.clone(), false).unwrap();
            multi_head_attention(&tape, &x, &x, &x, &w_o, &b_o, h, true)
                .unwrap()
                .data()
                .to_vec()
        };

        let reference = run(&base);
        for t in 0..s - 1 {
            // perturb every row past t
            let mut poked = base.clone();
            for val in &mut poked[(t + 1) * d..] {
                *val += 3.5;
            }
            let out = run(&poked);
            assert_eq!(
                &reference[..(t + 1) * d],
                &out[..(t + 1) * d],
                "rows 0..={t} must not move when later rows change"
            );
        }
    }

    #[test]
    fn gradcheck_two_tokens_two_heads() {
        let mut rng = Rng::new(13);
        let (s, d, h) = (2, 8, 2);
        let n = 3 * s * d + d * d + d;
        let data: Vec<f32> = (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let x = Tensor::from_vec(&[n], data).unwrap();
        let err = finite_difference_check(
            &|tape: &Tape, x: &Tensor| {
                let sd = s * d;
                let q = tape.reshape(&tape.slice(x, 0, 0, sd)?, &[s, d])?;
                let k = tape.reshape(&tape.slice(x, 0, sd, sd)?, &[s, d])?;
                let v = tape.reshape(&tape.slice(x, 0, 2 * sd, sd)?, &[s, d])?;
                let w_o = tape.reshape(&tape.slice(x, 0, 3 * sd, d * d)?, &[d, d])?;
                let b_o = tape.slice(x, 0, 3 * sd + d * d, d)?;
                let out = multi_head_attention(tape, &q, &k, &v, &w_o, &b_o, h, false)?;
                tape.sum_all(&out)
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-3, "attention fd err {err}");
    }

    #[test]
    fn causal_gradcheck() {
        let mut rng = Rng::new(14);
        let (s, d, h) = (3, 4, 2);
        let n = s * d + d * d + d;
        let data: Vec<f32> = (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let x = Tensor::from_vec(&[n], data).unwrap();
        let err = finite_difference_check(
            &|tape: &Tape, x: &Tensor| {
                let sd = s * d;
                let q = tape.reshape(&tape.slice(x, 0, 0, sd)?, &[s, d])?;
                let w_o = tape.reshape(&tape.slice(x, 0, sd, d * d)?, &[d, d])?;
                let b_o = tape.slice(x, 0, sd + d * d, d)?;
                let out = multi_head_attention(tape, &q, &q, &q, &w_o, &b_o, h, true)?;
                tape.sum_all(&out)
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-2, "causal attention fd err {err}");
    }
}
