//! Autoregressive decoder: each step embeds the previous output view into
//! token space, attends over every earlier step (block-causal via a growing
//! per-layer history), cross-attends to the encoder memory, and a conv +
//! pixel-shuffle head turns the step's tokens into one depth/mask view.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{multi_head_attention, Tensor};

use super::params::{Forward, Init, ParamStore};
use super::vit::LN_EPS;
use super::ModelConfig;

/// Registers decoder stack, view/step embeddings, and the pixel-shuffle head.
pub(crate) fn register_decoder(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.embed_dim;
    let q = cfg.view_patch();
    let vdim = 2 * q * q;
    store.register(
        "decoder.view_embed.weight",
        &[vdim, d],
        Init::Xavier { fan_in: vdim, fan_out: d },
    )?;
    store.register("decoder.view_embed.bias", &[d], Init::Zeros)?;
    store.register("decoder.pos", &[cfg.reduced_seq, d], Init::Uniform(0.02))?;
    store.register("decoder.step_embed", &[cfg.views, d], Init::Uniform(0.02))?;
    for i in 0..cfg.decoder_layers {
        let p = format!("decoder.{i}");
        store.register(&format!("{p}.ln1.gamma"), &[d], Init::Ones)?;
        store.register(&format!("{p}.ln1.beta"), &[d], Init::Zeros)?;
        for proj in ["wq", "wk", "wv", "wo"] {
            store.register(
                &format!("{p}.self.{proj}"),
                &[d, d],
                Init::Xavier { fan_in: d, fan_out: d },
            )?;
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            store.register(&format!("{p}.self.{bias}"), &[d], Init::Zeros)?;
        }
        store.register(&format!("{p}.ln2.gamma"), &[d], Init::Ones)?;
        store.register(&format!("{p}.ln2.beta"), &[d], Init::Zeros)?;
        for proj in ["wq", "wk", "wv", "wo"] {
            store.register(
                &format!("{p}.cross.{proj}"),
                &[d, d],
                Init::Xavier { fan_in: d, fan_out: d },
            )?;
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            store.register(&format!("{p}.cross.{bias}"), &[d], Init::Zeros)?;
        }
        store.register(&format!("{p}.ln3.gamma"), &[d], Init::Ones)?;
        store.register(&format!("{p}.ln3.beta"), &[d], Init::Zeros)?;
        let hidden = d * cfg.mlp_ratio;
        store.register(
            &format!("{p}.mlp.w1"),
            &[d, hidden],
            Init::Xavier { fan_in: d, fan_out: hidden },
        )?;
        store.register(&format!("{p}.mlp.b1"), &[hidden], Init::Zeros)?;
        store.register(
            &format!("{p}.mlp.w2"),
            &[hidden, d],
            Init::Xavier { fan_in: hidden, fan_out: d },
        )?;
        store.register(&format!("{p}.mlp.b2"), &[d], Init::Zeros)?;
    }
    store.register(
        "head.conv.weight",
        &[cfg.head_channels, d, 1, 1],
        Init::Xavier { fan_in: d, fan_out: cfg.head_channels },
    )?;
    store.register("head.conv.bias", &[cfg.head_channels], Init::Zeros)?;
    Ok(())
}

/// Grows monotonically as steps run; all tensors live on the tape of the
/// forward pass that produced them, so a state never outlives its pass.
pub struct DecoderState {
    // per layer: LN1-normed tokens of every step so far, [t·reduced_seq, D]
    history: Vec<Option<Tensor>>,
    step: usize,
}

impl DecoderState {
    pub fn new(cfg: &ModelConfig) -> Self {
        DecoderState {
            history: alloc::vec![None; cfg.decoder_layers],
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// [2, out, out] -> [reduced_seq, embed_dim]: patchify with the view patch
/// size and project. Token order matches the head's pixel-shuffle layout.
fn embed_prev_view(fwd: &Forward, prev: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let tape = fwd.tape();
    let out = cfg.out_size;
    if prev.shape() != [2, out, out] {
        return Err(Error::shape(
            "decoder_step",
            format!(
                "previous view shaped {}, config wants [2, {out}, {out}]",
                crate::error::fmt_shape(prev.shape())
            ),
        ));
    }
    let q = cfg.view_patch();
    let side = cfg.map_side();
    let batched = tape.reshape(prev, &[1, 2, out, out])?;
    let packed = tape.pixel_unshuffle(&batched, q)?;
    let flat = tape.reshape(&packed, &[2 * q * q, cfg.reduced_seq])?;
    let tokens = tape.permute(&flat, &[1, 0])?;
    debug_assert_eq!(side * side, cfg.reduced_seq);
    tape.linear(
        &tokens,
        &fwd.p("decoder.view_embed.weight")?,
        &fwd.p("decoder.view_embed.bias")?,
    )
}

/// One autoregressive step: embeds `prev_view` (all ones at t=0 by the
/// caller's choice of input), adds positional and step embeddings, runs the
/// decoder layers against the growing history and the encoder memory, and
/// returns this step's tokens [reduced_seq, embed_dim].
pub fn decoder_step(
    fwd: &Forward,
    prev_view: &Tensor,
    memory: &Tensor,
    state: &mut DecoderState,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    if state.step >= cfg.views {
        return Err(Error::invalid(
            "decoder_step",
            format!("state already ran {} steps, config has {} views", state.step, cfg.views),
        ));
    }
    if state.history.len() != cfg.decoder_layers {
        return Err(Error::invalid(
            "decoder_step",
            "state was built for a different layer count",
        ));
    }
    let msh = memory.shape();
    if msh.len() != 2 || msh[1] != cfg.embed_dim {
        return Err(Error::shape(
            "decoder_step",
            format!(
                "memory shaped {}, config wants [seq, {}]",
                crate::error::fmt_shape(msh),
                cfg.embed_dim
            ),
        ));
    }
    let tape = fwd.tape();

    let mut x = embed_prev_view(fwd, prev_view, cfg)?;
    x = tape.add(&x, &fwd.p("decoder.pos")?)?;
    let step_row = tape.slice(&fwd.p("decoder.step_embed")?, 0, state.step, 1)?;
    let step_row = tape.reshape(&step_row, &[cfg.embed_dim])?;
    x = tape.add_bias(&x, &step_row)?;

    for i in 0..cfg.decoder_layers {
        let p = format!("decoder.{i}");
        let pf = |suffix: &str| -> String { format!("{p}.{suffix}") };

        // self-attention over every step seen so far, this one included
        let normed = tape.layer_norm(&x, &fwd.p(&pf("ln1.gamma"))?, &fwd.p(&pf("ln1.beta"))?, 1, LN_EPS)?;
        let hist = match &state.history[i] {
            Some(old) => tape.concat(&[old, &normed], 0)?,
            None => normed.clone(),
        };
        state.history[i] = Some(hist.clone());
        let q = tape.linear(&normed, &fwd.p(&pf("self.wq"))?, &fwd.p(&pf("self.bq"))?)?;
        let k = tape.linear(&hist, &fwd.p(&pf("self.wk"))?, &fwd.p(&pf("self.bk"))?)?;
        let v = tape.linear(&hist, &fwd.p(&pf("self.wv"))?, &fwd.p(&pf("self.bv"))?)?;
        let att = multi_head_attention(
            tape,
            &q,
            &k,
            &v,
            &fwd.p(&pf("self.wo"))?,
            &fwd.p(&pf("self.bo"))?,
            cfg.heads,
            false,
        )?;
        x = tape.add(&x, &att)?;

        // cross-attention to the encoder memory
        let normed = tape.layer_norm(&x, &fwd.p(&pf("ln2.gamma"))?, &fwd.p(&pf("ln2.beta"))?, 1, LN_EPS)?;
        let q = tape.linear(&normed, &fwd.p(&pf("cross.wq"))?, &fwd.p(&pf("cross.bq"))?)?;
        let k = tape.linear(memory, &fwd.p(&pf("cross.wk"))?, &fwd.p(&pf("cross.bk"))?)?;
        let v = tape.linear(memory, &fwd.p(&pf("cross.wv"))?, &fwd.p(&pf("cross.bv"))?)?;
        let att = multi_head_attention(
            tape,
            &q,
            &k,
            &v,
            &fwd.p(&pf("cross.wo"))?,
            &fwd.p(&pf("cross.bo"))?,
            cfg.heads,
            false,
        )?;
        x = tape.add(&x, &att)?;

        let normed = tape.layer_norm(&x, &fwd.p(&pf("ln3.gamma"))?, &fwd.p(&pf("ln3.beta"))?, 1, LN_EPS)?;
        let h = tape.linear(&normed, &fwd.p(&pf("mlp.w1"))?, &fwd.p(&pf("mlp.b1"))?)?;
        let h = tape.gelu(&h)?;
        let h = tape.linear(&h, &fwd.p(&pf("mlp.w2"))?, &fwd.p(&pf("mlp.b2"))?)?;
        x = tape.add(&x, &h)?;
    }

    state.step += 1;
    Ok(x)
}

/// [reduced_seq, embed_dim] -> [2, out, out]: reshape to the feature map,
/// 1x1 conv to head_channels, pixel shuffle up to out_size. Channel 0 gets
/// softplus + depth_offset (depth stays positive), channel 1 stays raw mask
/// logits. Channels beyond the first two, if head_channels overshoots, are
/// dropped.
pub fn decoder_head(fwd: &Forward, view_tokens: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let sh = view_tokens.shape();
    if sh != [cfg.reduced_seq, cfg.embed_dim] {
        return Err(Error::shape(
            "decoder_head",
            format!(
                "tokens shaped {}, config wants [{}, {}]",
                crate::error::fmt_shape(sh),
                cfg.reduced_seq,
                cfg.embed_dim
            ),
        ));
    }
    let tape = fwd.tape();
    let side = cfg.map_side();
    let map = tape.permute(view_tokens, &[1, 0])?;
    let map = tape.reshape(&map, &[1, cfg.embed_dim, side, side])?;
    let conv = tape.conv2d(
        &map,
        &fwd.p("head.conv.weight")?,
        Some(&fwd.p("head.conv.bias")?),
        1,
        0,
    )?;
    let up = tape.pixel_shuffle(&conv, cfg.shuffle_r())?;
    let out = cfg.out_size;
    let channels = tape.reshape(&up, &[cfg.head_channels / (cfg.shuffle_r() * cfg.shuffle_r()), out, out])?;
    let depth = tape.slice(&channels, 0, 0, 1)?;
    let depth = tape.softplus(&depth)?;
    let depth = tape.add_scalar(&depth, cfg.depth_offset)?;
    let mask = tape.slice(&channels, 0, 1, 1)?;
    tape.concat(&[&depth, &mask], 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{finite_difference_check, Tape};
    use alloc::vec;

    fn desk_store(seed: u64) -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig::desk();
        let mut s = ParamStore::new(seed);
        register_decoder(&mut s, &cfg).unwrap();
        (cfg, s)
    }

    fn random_view(rng: &mut Rng, out: usize) -> Vec<f32> {
        (0..2 * out * out).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    fn random_memory(rng: &mut Rng, cfg: &ModelConfig) -> Vec<f32> {
        (0..cfg.reduced_seq * cfg.embed_dim)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect()
    }

    #[test]
    fn eight_steps_emit_eight_token_blocks() {
        let (cfg, store) = desk_store(21);
        let tape = Tape::inference();
        let fwd = Forward::new(&tape, &store, false);
        let mut rng = Rng::new(1);
        let memory = tape
            .leaf(&[cfg.reduced_seq, cfg.embed_dim], random_memory(&mut rng, &cfg), false)
            .unwrap();
        let mut state = DecoderState::new(&cfg);
        let mut blocks = vec![];
        for _ in 0..cfg.views {
            let prev = tape
                .leaf(&[2, cfg.out_size, cfg.out_size], random_view(&mut rng, cfg.out_size), false)
                .unwrap();
            blocks.push(decoder_step(&fwd, &prev, &memory, &mut state, &cfg).unwrap());
        }
        assert_eq!(blocks.len(), 8);
        for b in &blocks {
            assert_eq!(b.shape(), [cfg.reduced_seq, cfg.embed_dim]);
        }
        // step 9 exceeds the configured view count
        let prev = tape
            .leaf(&[2, cfg.out_size, cfg.out_size], random_view(&mut rng, cfg.out_size), false)
            .unwrap();
        assert!(decoder_step(&fwd, &prev, &memory, &mut state, &cfg).is_err());
    }

    #[test]
    fn outputs_before_t_ignore_inputs_from_t_onward() {
        let (cfg, store) = desk_store(22);
        let mut rng = Rng::new(2);
        let memory_data = random_memory(&mut rng, &cfg);
        let inputs: Vec<Vec<f32>> = (0..cfg.views).map(|_| random_view(&mut rng, cfg.out_size)).collect();

        let run = |inputs: &[Vec<f32>]| -> Vec<Vec<f32>> {
            let tape = Tape::inference();
            let fwd = Forward::new(&tape, &store, false);
            let memory = tape
                .leaf(&[cfg.reduced_seq, cfg.embed_dim], memory_data.clone(), false)
                .unwrap();
            let mut state = DecoderState::new(&cfg);
            inputs
                .iter()
                .map(|v| {
                    let prev = tape
                        .leaf(&[2, cfg.out_size, cfg.out_size], v.clone(), false)
                        .unwrap();
                    decoder_step(&fwd, &prev, &memory, &mut state, &cfg)
                        .unwrap()
                        .data()
                        .to_vec()
                })
                .collect()
        };

        let base = run(&inputs);
        for t in [3usize, 6] {
            let mut perturbed = inputs.clone();
            for v in perturbed.iter_mut().skip(t) {
                for x in v.iter_mut() {
                    *x += 0.37;
                }
            }
            let got = run(&perturbed);
            for s in 0..t {
                assert_eq!(base[s], got[s], "step {s} changed when inputs >= {t} moved");
            }
            assert_ne!(base[t], got[t], "perturbation at {t} must reach step {t}");
        }
    }

    #[test]
    fn head_emits_two_channel_view_with_positive_depth() {
        let (cfg, store) = desk_store(23);
        let tape = Tape::inference();
        let fwd = Forward::new(&tape, &store, false);
        let mut rng = Rng::new(3);
        let tokens = tape
            .leaf(&[cfg.reduced_seq, cfg.embed_dim], random_memory(&mut rng, &cfg), false)
            .unwrap();
        let view = decoder_head(&fwd, &tokens, &cfg).unwrap();
        assert_eq!(view.shape(), [2, 32, 32]);
        let hw = 32 * 32;
        assert!(view.data()[..hw].iter().all(|&d| d > cfg.depth_offset));
    }

    #[test]
    fn head_chain_holds_at_full_dimensions() {
        let cfg = ModelConfig::full();
        let mut store = ParamStore::new(24);
        register_decoder(&mut store, &cfg).unwrap();
        assert_eq!(store.get("head.conv.weight").unwrap().shape, vec![512, 768, 1, 1]);

        let tape = Tape::inference();
        let fwd = Forward::new(&tape, &store, false);
        let mut rng = Rng::new(4);
        let tokens = tape
            .leaf(
                &[64, 768],
                (0..64 * 768).map(|_| rng.uniform(-0.5, 0.5)).collect(),
                false,
            )
            .unwrap();
        let view = decoder_head(&fwd, &tokens, &cfg).unwrap();
        assert_eq!(view.shape(), [2, 128, 128]);
    }

    #[test]
    fn head_gradcheck() {
        let (cfg, store) = desk_store(25);
        let mut rng = Rng::new(5);
        let tokens_data = random_memory(&mut rng, &cfg);
        let f = |tape: &Tape, w: &Tensor| -> crate::error::Result<Tensor> {
            let fwd = Forward::new(tape, &store, true);
            fwd.bind("head.conv.weight", w.clone());
            let tokens = tape.leaf(&[cfg.reduced_seq, cfg.embed_dim], tokens_data.clone(), false)?;
            let view = decoder_head(&fwd, &tokens, &cfg)?;
            tape.mean_all(&view)
        };
        let entry = store.get("head.conv.weight").unwrap();
        let tape = Tape::inference();
        let w0 = tape.leaf(&entry.shape, entry.data.clone(), false).unwrap();
        let rel = finite_difference_check(&f, &w0, 1e-2).unwrap();
        assert!(rel < 1e-2, "head gradcheck rel err {rel}");
    }

    #[test]
    fn two_step_decoder_gradcheck() {
        let (cfg, store) = desk_store(26);
        let mut rng = Rng::new(6);
        let memory_data = random_memory(&mut rng, &cfg);
        let v0 = random_view(&mut rng, cfg.out_size);
        let v1 = random_view(&mut rng, cfg.out_size);

        let probe = "decoder.0.cross.wv";
        let f = |tape: &Tape, w: &Tensor| -> crate::error::Result<Tensor> {
            let fwd = Forward::new(tape, &store, true);
            fwd.bind(probe, w.clone());
            let memory = tape.leaf(&[cfg.reduced_seq, cfg.embed_dim], memory_data.clone(), false)?;
            let mut state = DecoderState::new(&cfg);
            let p0 = tape.leaf(&[2, cfg.out_size, cfg.out_size], v0.clone(), false)?;
            let t0 = decoder_step(&fwd, &p0, &memory, &mut state, &cfg)?;
            let p1 = tape.leaf(&[2, cfg.out_size, cfg.out_size], v1.clone(), false)?;
            let t1 = decoder_step(&fwd, &p1, &memory, &mut state, &cfg)?;
            let both = tape.concat(&[&t0, &t1], 0)?;
            tape.mean_all(&both)
        };
        let entry = store.get(probe).unwrap();
        let tape = Tape::inference();
        let w0 = tape.leaf(&entry.shape, entry.data.clone(), false).unwrap();
        let rel = finite_difference_check(&f, &w0, 1e-2).unwrap();
        assert!(rel < 1e-2, "decoder gradcheck rel err {rel}");
    }

    #[test]
    fn shape_errors_name_the_mismatch() {
        let (cfg, store) = desk_store(27);
        let tape = Tape::inference();
        let fwd = Forward::new(&tape, &store, false);
        let memory = tape.leaf(&[16, 32], vec![0.0; 512], false).unwrap();
        let mut state = DecoderState::new(&cfg);
        let bad_view = tape.leaf(&[2, 16, 16], vec![1.0; 512], false).unwrap();
        assert!(decoder_step(&fwd, &bad_view, &memory, &mut state, &cfg).is_err());
        let bad_mem = tape.leaf(&[16, 16], vec![0.0; 256], false).unwrap();
        let view = tape.leaf(&[2, 32, 32], vec![1.0; 2048], false).unwrap();
        assert!(decoder_step(&fwd, &view, &bad_mem, &mut state, &cfg).is_err());
    }
}
