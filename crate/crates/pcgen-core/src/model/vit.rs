//! Encoder side of the generator: patch embedding, the transformer encoder
//! stack, and the sequence-length reduction that turns encoder tokens into a
//! square memory map for the decoder.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{multi_head_attention, Tensor};

use super::params::{Forward, Init, ParamStore};
use super::ModelConfig;

pub(crate) const LN_EPS: f32 = 1e-5;

/// Registers one pre-norm transformer block under `prefix` (self-attention +
/// MLP with their layer norms).
pub(crate) fn register_block(store: &mut ParamStore, prefix: &str, d: usize, mlp_ratio: usize) -> Result<()> {
    let hidden = d * mlp_ratio;
    store.register(&format!("{prefix}.ln1.gamma"), &[d], Init::Ones)?;
    store.register(&format!("{prefix}.ln1.beta"), &[d], Init::Zeros)?;
    for proj in ["wq", "wk", "wv", "wo"] {
        store.register(
            &format!("{prefix}.attn.{proj}"),
            &[d, d],
            Init::Xavier { fan_in: d, fan_out: d },
        )?;
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        store.register(&format!("{prefix}.attn.{bias}"), &[d], Init::Zeros)?;
    }
    store.register(&format!("{prefix}.ln2.gamma"), &[d], Init::Ones)?;
    store.register(&format!("{prefix}.ln2.beta"), &[d], Init::Zeros)?;
    store.register(
        &format!("{prefix}.mlp.w1"),
        &[d, hidden],
        Init::Xavier { fan_in: d, fan_out: hidden },
    )?;
    store.register(&format!("{prefix}.mlp.b1"), &[hidden], Init::Zeros)?;
    store.register(
        &format!("{prefix}.mlp.w2"),
        &[hidden, d],
        Init::Xavier { fan_in: hidden, fan_out: d },
    )?;
    store.register(&format!("{prefix}.mlp.b2"), &[d], Init::Zeros)?;
    Ok(())
}

/// Registers patch embedding, encoder stack, and sequence reduction.
pub(crate) fn register_vit(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.embed_dim;
    let pdim = 3 * cfg.patch * cfg.patch;
    let t = cfg.tokens();
    store.register(
        "patch_embed.weight",
        &[pdim, d],
        Init::Xavier { fan_in: pdim, fan_out: d },
    )?;
    store.register("patch_embed.bias", &[d], Init::Zeros)?;
    store.register("patch_embed.cls", &[1, d], Init::Uniform(0.02))?;
    store.register("patch_embed.pos", &[t, d], Init::Uniform(0.02))?;
    for i in 0..cfg.encoder_layers {
        register_block(store, &format!("encoder.{i}"), d, cfg.mlp_ratio)?;
    }
    store.register(
        "reduce.weight",
        &[t, cfg.reduced_seq],
        Init::Xavier { fan_in: t, fan_out: cfg.reduced_seq },
    )?;
    store.register("reduce.bias", &[cfg.reduced_seq], Init::Zeros)?;
    Ok(())
}

/// Flattens a [3, S, S] image into per-patch rows [patches, 3·p²],
/// channel-major within each row.
fn extract_patches(image: &[f32], s: usize, p: usize) -> Vec<f32> {
    let n = s / p;
    let mut out = Vec::with_capacity(n * n * 3 * p * p);
    for ph in 0..n {
        for pw in 0..n {
            for c in 0..3 {
                for i in 0..p {
                    for j in 0..p {
                        out.push(image[c * s * s + (ph * p + i) * s + (pw * p + j)]);
                    }
                }
            }
        }
    }
    out
}

/// Image [3, S, S] (flat row-major) to tokens [(S/p)² + 1, embed_dim]:
/// linear patch projection, learned class token at index 0, learned
/// positional embeddings added.
pub fn patch_embed(fwd: &Forward, image: &[f32], cfg: &ModelConfig) -> Result<Tensor> {
    let s = cfg.image_in;
    if image.len() != 3 * s * s {
        return Err(Error::shape(
            "patch_embed",
            format!("image has {} values, config wants 3x{s}x{s}", image.len()),
        ));
    }
    if image.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("patch_embed"));
    }
    let p = cfg.patch;
    let n = s / p;
    let tape = fwd.tape();
    let patches = tape.leaf(&[n * n, 3 * p * p], extract_patches(image, s, p), false)?;
    let projected = tape.linear(&patches, &fwd.p("patch_embed.weight")?, &fwd.p("patch_embed.bias")?)?;
    let cls = fwd.p("patch_embed.cls")?;
    let tokens = tape.concat(&[&cls, &projected], 0)?;
    tape.add(&tokens, &fwd.p("patch_embed.pos")?)
}

/// One pre-norm transformer block under `prefix`, shape-preserving on
/// [seq, embed_dim]. `kv` widens self-attention keys/values beyond `x` (used
/// by the decoder's cache); `None` means self-attention over `x` itself.
pub(crate) fn transformer_block(
    fwd: &Forward,
    prefix: &str,
    x: &Tensor,
    kv: Option<&Tensor>,
    heads: usize,
) -> Result<Tensor> {
    let tape = fwd.tape();
    let pf = |suffix: &str| -> String { format!("{prefix}.{suffix}") };

    let normed = tape.layer_norm(x, &fwd.p(&pf("ln1.gamma"))?, &fwd.p(&pf("ln1.beta"))?, 1, LN_EPS)?;
    let kv_src = match kv {
        Some(t) => t.clone(),
        None => normed.clone(),
    };
    let q = tape.linear(&normed, &fwd.p(&pf("attn.wq"))?, &fwd.p(&pf("attn.bq"))?)?;
    let k = tape.linear(&kv_src, &fwd.p(&pf("attn.wk"))?, &fwd.p(&pf("attn.bk"))?)?;
    let v = tape.linear(&kv_src, &fwd.p(&pf("attn.wv"))?, &fwd.p(&pf("attn.bv"))?)?;
    let att = multi_head_attention(
        tape,
        &q,
        &k,
        &v,
        &fwd.p(&pf("attn.wo"))?,
        &fwd.p(&pf("attn.bo"))?,
        heads,
        false,
    )?;
    let x = tape.add(x, &att)?;

    let normed = tape.layer_norm(&x, &fwd.p(&pf("ln2.gamma"))?, &fwd.p(&pf("ln2.beta"))?, 1, LN_EPS)?;
    let h = tape.linear(&normed, &fwd.p(&pf("mlp.w1"))?, &fwd.p(&pf("mlp.b1"))?)?;
    let h = tape.gelu(&h)?;
    let h = tape.linear(&h, &fwd.p(&pf("mlp.w2"))?, &fwd.p(&pf("mlp.b2"))?)?;
    tape.add(&x, &h)
}

/// Pre-norm encoder stack; zero layers is the identity.
pub fn encoder_forward(fwd: &Forward, tokens: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    if tokens.shape().len() != 2 || tokens.shape()[1] != cfg.embed_dim {
        return Err(Error::shape(
            "encoder_forward",
            format!(
                "tokens shaped {}, config wants [seq, {}]",
                crate::error::fmt_shape(tokens.shape()),
                cfg.embed_dim
            ),
        ));
    }
    let mut x = tokens.clone();
    for i in 0..cfg.encoder_layers {
        x = transformer_block(fwd, &format!("encoder.{i}"), &x, None, cfg.heads)?;
    }
    Ok(x)
}

/// [L, embed_dim] -> [reduced_seq, embed_dim] by one linear map across the
/// sequence axis, applied per embedding channel.
pub fn reduce_sequence(fwd: &Forward, hidden: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let sh = hidden.shape();
    if sh.len() != 2 || sh[1] != cfg.embed_dim {
        return Err(Error::shape(
            "reduce_sequence",
            format!(
                "hidden shaped {}, config wants [seq, {}]",
                crate::error::fmt_shape(sh),
                cfg.embed_dim
            ),
        ));
    }
    let tape = fwd.tape();
    let by_channel = tape.permute(hidden, &[1, 0])?;
    let reduced = tape.linear(&by_channel, &fwd.p("reduce.weight")?, &fwd.p("reduce.bias")?)?;
    tape.permute(&reduced, &[1, 0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{finite_difference_check, Tape};
    use alloc::string::ToString;
    use alloc::vec;

    fn zeroed(store: &mut ParamStore) {
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            let len = store.get(&n).unwrap().data.len();
            store.load(&n, vec![0.0; len]).unwrap();
        }
    }

    fn desk_store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new(seed);
        register_vit(&mut s, &ModelConfig::desk()).unwrap();
        s
    }

    #[test]
    fn token_counts_match_patch_grid() {
        let full = ModelConfig::full();
        assert_eq!(full.tokens(), 197);
        let desk = ModelConfig::desk();
        let store = desk_store(1);
        let tape = Tape::inference();
        let fwd = Forward::new(&tape, &store, false);
        let img = vec![0.25f32; 3 * 64 * 64];
        let tokens = patch_embed(&fwd, &img, &desk).unwrap();
        assert_eq!(tokens.shape(), [65, 32]);
    }

    #[test]
    fn zero_image_zero_weights_tokens_equal_positional() {
        let desk = ModelConfig::desk();
        let mut store = desk_store(2);
        zeroed(&mut store);
        let mut pos = vec![0.0f32; 65 * 32];
        let mut rng = Rng::new(9);
        for x in pos.iter_mut() {
            *x = rng.uniform(-1.0, 1.0);
        }
        store.load("patch_embed.pos", pos.clone()).unwrap();

        let tape = Tape::inference();
        let fwd = Forward::new(&tape, &store, false);
        let tokens = patch_embed(&fwd, &vec![0.0; 3 * 64 * 64], &desk).unwrap();
        assert_eq!(tokens.data(), &pos[..]);
    }

    #[test]
    fn patch_rows_carry_patch_pixels() {
        // image where pixel value encodes channel and location; check one row
        let desk = ModelConfig::desk();
        let s = desk.image_in;
        let img: Vec<f32> = (0..3 * s * s).map(|i| i as f32).collect();
        let rows = extract_patches(&img, s, desk.patch);
        // patch (0,1), channel 2, local (3,5) lives at row 1
        let p = desk.patch;
        let row = 1;
        let within = 2 * p * p + 3 * p + 5;
        let want = (2 * s * s + 3 * s + (p + 5)) as f32;
        assert_eq!(rows[row * 3 * p * p + within], want);
    }

    #[test]
    fn zero_layer_encoder_is_identity() {
        let mut cfg = ModelConfig::desk();
        cfg.encoder_layers = 0;
        let mut store = ParamStore::new(3);
        register_vit(&mut store, &cfg).unwrap();
        let tape = Tape::inference();
        let fwd = Forward::new(&tape, &store, false);
        let x = tape
            .leaf(&[5, 32], (0..160).map(|i| i as f32 * 0.01).collect(), false)
            .unwrap();
        let y = encoder_forward(&fwd, &x, &cfg).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn encoder_preserves_shape() {
        let cfg = ModelConfig::desk();
        let store = desk_store(4);
        let tape = Tape::inference();
        let fwd = Forward::new(&tape, &store, false);
        let mut rng = Rng::new(11);
        let x = tape
            .leaf(&[65, 32], (0..65 * 32).map(|_| rng.uniform(-1.0, 1.0)).collect(), false)
            .unwrap();
        let y = encoder_forward(&fwd, &x, &cfg).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
    }

    #[test]
    fn identity_initialized_reduction_is_identity() {
        let mut cfg = ModelConfig::desk();
        cfg.reduced_seq = 16;
        let mut store = ParamStore::new(5);
        // token count must equal reduced_seq for the identity case
        store.register("reduce.weight", &[16, 16], Init::Zeros).unwrap();
        store.register("reduce.bias", &[16], Init::Zeros).unwrap();
        let mut eye = vec![0.0f32; 16 * 16];
        for i in 0..16 {
            eye[i * 16 + i] = 1.0;
        }
        store.load("reduce.weight", eye).unwrap();

        let tape = Tape::inference();
        let fwd = Forward::new(&tape, &store, false);
        let mut rng = Rng::new(12);
        let x = tape
            .leaf(&[16, 32], (0..512).map(|_| rng.uniform(-2.0, 2.0)).collect(), false)
            .unwrap();
        let y = reduce_sequence(&fwd, &x, &cfg).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn reduction_output_reshapes_to_feature_map() {
        let cfg = ModelConfig::desk();
        let store = desk_store(6);
        let tape = Tape::inference();
        let fwd = Forward::new(&tape, &store, false);
        let mut rng = Rng::new(13);
        let x = tape
            .leaf(&[65, 32], (0..65 * 32).map(|_| rng.uniform(-1.0, 1.0)).collect(), false)
            .unwrap();
        let y = reduce_sequence(&fwd, &x, &cfg).unwrap();
        assert_eq!(y.shape(), [16, 32]);
        let map = tape.permute(&y, &[1, 0]).unwrap();
        let map = tape.reshape(&map, &[32, 4, 4]).unwrap();
        assert_eq!(map.shape(), [32, 4, 4]);
    }

    // gradcheck: desk-dimension encoder block + reduction as a function of a
    // single weight, everything else held at init
    #[test]
    fn encoder_stack_gradcheck() {
        let cfg = ModelConfig::desk();
        let store = desk_store(7);
        let mut rng = Rng::new(14);
        let img: Vec<f32> = (0..3 * 64 * 64).map(|_| rng.uniform(0.0, 1.0)).collect();

        // d loss / d mlp.w2 of layer 1 via the Forward cache: rebind the
        // probed weight as the function input
        let probe = "encoder.1.mlp.w2";
        let f = |tape: &Tape, w: &Tensor| -> crate::error::Result<Tensor> {
            let fwd = Forward::new(tape, &store, true);
            fwd.bind(probe, w.clone());
            let tokens = patch_embed(&fwd, &img, &cfg)?;
            let hidden = encoder_forward(&fwd, &tokens, &cfg)?;
            let memory = reduce_sequence(&fwd, &hidden, &cfg)?;
            tape.mean_all(&memory)
        };
        let entry = store.get(probe).unwrap();
        let tape = Tape::inference();
        let w0 = tape.leaf(&entry.shape, entry.data.clone(), false).unwrap();
        let rel = finite_difference_check(&f, &w0, 1e-2).unwrap();
        assert!(rel < 1e-2, "encoder gradcheck rel err {rel}");
    }
}
