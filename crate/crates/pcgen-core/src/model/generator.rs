//! The assembled structure generator and its training-facing controls:
//! parameter initialization, the eight-view forward pass for either head,
//! freezing policy, and checkpoint-shaped (de)serialization of weights.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, Tape, Tensor};

use super::decoder::{decoder_head, decoder_step, register_decoder, DecoderState};
use super::params::{Forward, Init, ParamStore};
use super::vit::{encoder_forward, patch_embed, reduce_sequence, register_vit};
use super::{GeneratorOutput, HeadKind, ModelConfig};

const BN_MOMENTUM: f32 = 0.1;
const BN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Everything trainable.
    Thaw,
    /// Freeze encoder layers 0..n; the rest of the network stays trainable.
    EncoderFirst(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct FreezeReport {
    pub frozen_params: usize,
    pub trainable_params: usize,
}

pub struct StructureModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    // running statistics for the deconv head's batch norms, keyed by block
    bn: RefCell<BTreeMap<String, BatchNormState>>,
}

/// Channel widths of the deconv upsampling chain, halving from embed_dim
/// with a floor of 16.
fn deconv_channels(cfg: &ModelConfig) -> Vec<usize> {
    let blocks = (cfg.out_size / cfg.map_side()).trailing_zeros() as usize;
    let mut chans = vec![cfg.embed_dim];
    for _ in 0..blocks {
        let next = (chans.last().unwrap() / 2).max(16);
        chans.push(next);
    }
    chans
}

fn register_conv_head(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let chans = deconv_channels(cfg);
    for (i, pair) in chans.windows(2).enumerate() {
        let (cin, cout) = (pair[0], pair[1]);
        // conv_transpose2d weights are [in, out, kh, kw]
        store.register(
            &format!("head.up{i}.weight"),
            &[cin, cout, 4, 4],
            Init::Xavier { fan_in: cin * 16, fan_out: cout * 16 },
        )?;
        store.register(&format!("head.up{i}.bias"), &[cout], Init::Zeros)?;
        store.register(&format!("head.up{i}.bn.gamma"), &[cout], Init::Ones)?;
        store.register(&format!("head.up{i}.bn.beta"), &[cout], Init::Zeros)?;
    }
    let last = *chans.last().unwrap();
    store.register(
        "head.final.weight",
        &[2 * cfg.views, last, 3, 3],
        Init::Xavier { fan_in: last * 9, fan_out: 2 * cfg.views * 9 },
    )?;
    store.register("head.final.bias", &[2 * cfg.views], Init::Zeros)?;
    Ok(())
}

impl StructureModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<StructureModel> {
        cfg.validate()?;
        if cfg.head == HeadKind::ConvUpsample {
            let ratio = cfg.out_size / cfg.map_side();
            if !ratio.is_power_of_two() {
                return Err(Error::config(
                    "head",
                    format!("deconv head needs a power-of-two upsample, got {ratio}"),
                ));
            }
        }
        let mut params = ParamStore::new(seed);
        register_vit(&mut params, &cfg)?;
        match cfg.head {
            HeadKind::PixelShuffle => register_decoder(&mut params, &cfg)?,
            HeadKind::ConvUpsample => register_conv_head(&mut params, &cfg)?,
        }
        let mut bn = BTreeMap::new();
        if cfg.head == HeadKind::ConvUpsample {
            for (i, pair) in deconv_channels(&cfg).windows(2).enumerate() {
                bn.insert(format!("head.up{i}"), BatchNormState::new(pair[1]));
            }
        }
        Ok(StructureModel {
            cfg,
            params,
            bn: RefCell::new(bn),
        })
    }

    /// Runs the model on `image` (flat [3, image_in, image_in]) over the
    /// given forward binding; returns one [2, out, out] tensor per view.
    pub fn forward_views(&self, fwd: &Forward, image: &[f32]) -> Result<Vec<Tensor>> {
        let cfg = &self.cfg;
        let tokens = patch_embed(fwd, image, cfg)?;
        let hidden = encoder_forward(fwd, &tokens, cfg)?;
        let memory = reduce_sequence(fwd, &hidden, cfg)?;
        match cfg.head {
            HeadKind::PixelShuffle => self.autoregressive_views(fwd, &memory),
            HeadKind::ConvUpsample => self.deconv_views(fwd, &memory),
        }
    }

    fn autoregressive_views(&self, fwd: &Forward, memory: &Tensor) -> Result<Vec<Tensor>> {
        let cfg = &self.cfg;
        let tape = fwd.tape();
        let out = cfg.out_size;
        let mut state = DecoderState::new(cfg);
        let mut prev = tape.leaf(&[2, out, out], vec![1.0; 2 * out * out], false)?;
        let mut views = Vec::with_capacity(cfg.views);
        for _ in 0..cfg.views {
            let tokens = decoder_step(fwd, &prev, memory, &mut state, cfg)?;
            let view = decoder_head(fwd, &tokens, cfg)?;
            views.push(view.clone());
            prev = view;
        }
        Ok(views)
    }

    fn deconv_views(&self, fwd: &Forward, memory: &Tensor) -> Result<Vec<Tensor>> {
        let cfg = &self.cfg;
        let tape = fwd.tape();
        let side = cfg.map_side();
        let mut x = tape.permute(memory, &[1, 0])?;
        x = tape.reshape(&x, &[1, cfg.embed_dim, side, side])?;
        let chans = deconv_channels(cfg);
        for (i, pair) in chans.windows(2).enumerate() {
            let name = format!("head.up{i}");
            x = tape.conv_transpose2d(
                &x,
                &fwd.p(&format!("{name}.weight"))?,
                Some(&fwd.p(&format!("{name}.bias"))?),
                2,
                1,
            )?;
            let hw = x.shape()[2];
            let squeezed = tape.reshape(&x, &[pair[1], hw, hw])?;
            let mut bn_map = self.bn.borrow_mut();
            let state = bn_map
                .get_mut(&name)
                .ok_or_else(|| Error::invalid("deconv_head", "missing batch norm state"))?;
            let normed = tape.batch_norm(
                &squeezed,
                &fwd.p(&format!("{name}.bn.gamma"))?,
                &fwd.p(&format!("{name}.bn.beta"))?,
                state,
                fwd.training(),
                BN_MOMENTUM,
                BN_EPS,
            )?;
            drop(bn_map);
            let activated = tape.relu(&normed)?;
            x = tape.reshape(&activated, &[1, pair[1], hw, hw])?;
        }
        x = tape.conv2d(
            &x,
            &fwd.p("head.final.weight")?,
            Some(&fwd.p("head.final.bias")?),
            1,
            1,
        )?;
        let out = cfg.out_size;
        let stacked = tape.reshape(&x, &[2 * cfg.views, out, out])?;
        let mut views = Vec::with_capacity(cfg.views);
        for v in 0..cfg.views {
            let depth = tape.slice(&stacked, 0, v, 1)?;
            let depth = tape.softplus(&depth)?;
            let depth = tape.add_scalar(&depth, cfg.depth_offset)?;
            let mask = tape.slice(&stacked, 0, cfg.views + v, 1)?;
            views.push(tape.concat(&[&depth, &mask], 0)?);
        }
        Ok(views)
    }

    /// Eval-mode forward: stacks the per-view outputs into
    /// [views, 2, out, out] and validates the output contract.
    pub fn generate(&self, image: &[f32]) -> Result<GeneratorOutput> {
        let tape = Tape::inference();
        let fwd = Forward::new(&tape, &self.params, false);
        let views = self.forward_views(&fwd, image)?;
        let refs: Vec<&Tensor> = views.iter().collect();
        let stacked = tape.concat(&refs, 0)?;
        let out = self.cfg.out_size;
        let shaped = tape.reshape(&stacked, &[self.cfg.views, 2, out, out])?;
        GeneratorOutput::new(shaped, &self.cfg)
    }

    /// Applies a freezing policy and reports resulting parameter counts.
    pub fn set_freezing(&mut self, policy: FreezePolicy) -> Result<FreezeReport> {
        match policy {
            FreezePolicy::Thaw => {
                self.params.set_frozen_prefix("", false);
            }
            FreezePolicy::EncoderFirst(n) => {
                if n > self.cfg.encoder_layers {
                    return Err(Error::invalid(
                        "set_freezing",
                        format!(
                            "cannot freeze {n} layers, encoder has {}",
                            self.cfg.encoder_layers
                        ),
                    ));
                }
                self.params.set_frozen_prefix("encoder.", false);
                for i in 0..n {
                    self.params.set_frozen_prefix(&format!("encoder.{i}."), true);
                }
            }
        }
        Ok(FreezeReport {
            frozen_params: self.params.count_params(false) - self.params.count_params(true),
            trainable_params: self.params.count_params(true),
        })
    }

    pub fn count_params(&self, trainable_only: bool) -> usize {
        self.params.count_params(trainable_only)
    }

    /// Serializes every parameter to TNSR bytes, name-keyed.
    pub fn export_weights(&self) -> Vec<(String, Vec<u8>)> {
        self.params
            .iter()
            .map(|(name, e)| (name.clone(), crate::tnsr::encode(&e.shape, &e.data)))
            .collect()
    }

    /// Loads TNSR bytes produced by `export_weights`. Every model parameter
    /// must be present with its exact shape; extras are rejected.
    pub fn import_weights(&mut self, entries: &[(String, Vec<u8>)]) -> Result<()> {
        let mut seen = alloc::collections::BTreeSet::new();
        for (name, bytes) in entries {
            let (shape, data) = crate::tnsr::decode(bytes)?;
            let want = &self.params.get(name)?.shape;
            if &shape != want {
                return Err(Error::invalid(
                    "import_weights",
                    format!(
                        "'{name}' stored as {}, model wants {}",
                        crate::error::fmt_shape(&shape),
                        crate::error::fmt_shape(want)
                    ),
                ));
            }
            self.params.load(name, data)?;
            seen.insert(name.clone());
        }
        let missing: Vec<String> = self
            .params
            .names()
            .filter(|n| !seen.contains(*n))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(
                "import_weights",
                format!("missing parameters: {}", missing.join(", ")),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn desk_model(seed: u64) -> StructureModel {
        StructureModel::new(ModelConfig::desk(), seed).unwrap()
    }

    fn random_image(seed: u64, s: usize) -> Vec<f32> {
        let mut rng = Rng::new(seed);
        (0..3 * s * s).map(|_| rng.uniform(0.0, 1.0)).collect()
    }

    #[test]
    fn desk_generate_contract() {
        let model = desk_model(31);
        let img = random_image(1, 64);
        let out = model.generate(&img).unwrap();
        assert_eq!(out.views.shape(), [8, 2, 32, 32]);
        for v in 0..8 {
            assert!(out.depth(v).unwrap().iter().all(|&d| d > 3.0));
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let model = desk_model(32);
        let img = random_image(2, 64);
        let a = model.generate(&img).unwrap();
        let b = model.generate(&img).unwrap();
        assert_eq!(a.views.data(), b.views.data());
    }

    #[test]
    fn zero_weights_make_all_views_identical() {
        let mut model = desk_model(33);
        let names: Vec<String> = model.params.names().cloned().collect();
        for n in names {
            let len = model.params.get(&n).unwrap().data.len();
            model.params.load(&n, vec![0.0; len]).unwrap();
        }
        let out = model.generate(&random_image(3, 64)).unwrap();
        let hw = 2 * 32 * 32;
        let first = &out.views.data()[..hw];
        for v in 1..8 {
            assert_eq!(first, &out.views.data()[v * hw..(v + 1) * hw], "view {v} diverged");
        }
    }

    #[test]
    fn training_forward_reaches_every_trainable_parameter() {
        let model = desk_model(34);
        let img = random_image(4, 64);
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &model.params, true);
        let views = model.forward_views(&fwd, &img).unwrap();
        let refs: Vec<&Tensor> = views.iter().collect();
        let all = tape.concat(&refs, 0).unwrap();
        let loss = tape.mean_all(&all).unwrap();
        tape.backward(&loss).unwrap();
        let grads = fwd.grads().unwrap();

        let registered: Vec<String> = model.params.names().cloned().collect();
        for name in &registered {
            assert!(grads.contains_key(name), "{name} never bound in forward");
        }
        let dead: Vec<&String> = grads
            .iter()
            .filter(|(_, g)| g.iter().all(|&x| x == 0.0))
            .map(|(n, _)| n)
            .collect();
        assert!(dead.is_empty(), "parameters with all-zero gradients: {dead:?}");
    }

    #[test]
    fn freezing_counts_and_checksums() {
        let mut model = desk_model(35);
        let total = model.count_params(false);
        assert_eq!(model.count_params(true), total);

        let layer0 = model.params.checksum_prefix("encoder.0.");
        let report = model.set_freezing(FreezePolicy::EncoderFirst(1)).unwrap();
        // one desk encoder block: 2 layer norms + 4 attn mats + 4 attn biases + mlp
        let d = 32;
        let hidden = 128;
        let block = 2 * (2 * d) + 4 * d * d + 4 * d + d * hidden + hidden + hidden * d + d;
        assert_eq!(report.frozen_params, block);
        assert_eq!(report.trainable_params, total - block);

        assert!(model.set_freezing(FreezePolicy::EncoderFirst(3)).is_err());

        // frozen params take no gradient and stay bitwise intact
        let img = random_image(5, 64);
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &model.params, true);
        let views = model.forward_views(&fwd, &img).unwrap();
        let loss = tape.mean_all(&views[0]).unwrap();
        tape.backward(&loss).unwrap();
        let grads = fwd.grads().unwrap();
        assert!(grads.keys().all(|k| !k.starts_with("encoder.0.")));
        assert_eq!(model.params.checksum_prefix("encoder.0."), layer0);

        let report = model.set_freezing(FreezePolicy::Thaw).unwrap();
        assert_eq!(report.trainable_params, total);
    }

    #[test]
    fn desk_parameter_count_closed_form() {
        let model = desk_model(36);
        let (d, hidden, t, r) = (32usize, 128usize, 65usize, 16usize);
        let patch_embed = 192 * d + d + d + t * d;
        let block = 2 * (2 * d) + 4 * (d * d + d) + d * hidden + hidden + hidden * d + d;
        let reduce = t * r + r;
        let view_embed = 128 * d + d;
        let embeds = r * d + 8 * d;
        let dec_layer = 3 * (2 * d) + 8 * (d * d + d) + d * hidden + hidden + hidden * d + d;
        let head = 128 * d * 1 * 1 + 128;
        let want = patch_embed + 2 * block + reduce + view_embed + embeds + 2 * dec_layer + head;
        assert_eq!(model.count_params(false), want);
    }

    #[test]
    fn weight_round_trip_reproduces_outputs_bitwise() {
        let model = desk_model(37);
        let img = random_image(6, 64);
        let before = model.generate(&img).unwrap();
        let exported = model.export_weights();

        // different seed: fresh weights differ until import
        let mut other = desk_model(38);
        assert_ne!(other.generate(&img).unwrap().views.data(), before.views.data());
        other.import_weights(&exported).unwrap();
        let after = other.generate(&img).unwrap();
        assert_eq!(before.views.data(), after.views.data());
    }

    #[test]
    fn import_rejects_missing_or_misshapen_entries() {
        let model = desk_model(39);
        let mut other = desk_model(40);
        let mut exported = model.export_weights();
        let dropped = exported.pop().unwrap();
        assert!(other.import_weights(&exported).is_err());
        exported.push((dropped.0, crate::tnsr::encode(&[3], &[1.0, 2.0, 3.0])));
        assert!(other.import_weights(&exported).is_err());
    }

    #[test]
    fn conv_head_variant_contract() {
        let mut cfg = ModelConfig::desk();
        cfg.head = HeadKind::ConvUpsample;
        let model = StructureModel::new(cfg, 41).unwrap();
        let img = random_image(7, 64);
        let out = model.generate(&img).unwrap();
        assert_eq!(out.views.shape(), [8, 2, 32, 32]);
        for v in 0..8 {
            assert!(out.depth(v).unwrap().iter().all(|&d| d > 3.0));
        }

        // training forward moves batch norm running stats; eval does not
        let stats_before: Vec<f32> = model.bn.borrow()["head.up0"].running_mean.clone();
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &model.params, true);
        model.forward_views(&fwd, &img).unwrap();
        let stats_after: Vec<f32> = model.bn.borrow()["head.up0"].running_mean.clone();
        assert_ne!(stats_before, stats_after);

        let eval_tape = Tape::inference();
        let eval_fwd = Forward::new(&eval_tape, &model.params, false);
        model.forward_views(&eval_fwd, &img).unwrap();
        assert_eq!(model.bn.borrow()["head.up0"].running_mean, stats_after);
    }

    #[test]
    fn conv_head_gradients_flow() {
        let mut cfg = ModelConfig::desk();
        cfg.head = HeadKind::ConvUpsample;
        let model = StructureModel::new(cfg, 42).unwrap();
        let img = random_image(8, 64);
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &model.params, true);
        let views = model.forward_views(&fwd, &img).unwrap();
        let refs: Vec<&Tensor> = views.iter().collect();
        let all = tape.concat(&refs, 0).unwrap();
        let loss = tape.mean_all(&all).unwrap();
        tape.backward(&loss).unwrap();
        let grads = fwd.grads().unwrap();
        let flowing = grads.values().filter(|g| g.iter().any(|&x| x != 0.0)).count();
        // relu + batch norm can zero a few slots; the bulk must flow
        assert!(flowing * 10 >= grads.len() * 9, "{flowing} of {} flowing", grads.len());
        assert!(grads["head.final.weight"].iter().any(|&x| x != 0.0));
        assert!(grads["patch_embed.weight"].iter().any(|&x| x != 0.0));
    }
}
