//! The structure generator: a patch-embedding transformer encoder, a
//! sequence-reduction projection, an autoregressive transformer decoder, and
//! a convolutional head that emits one depth/mask view per step.

mod decoder;
mod generator;
mod params;
mod vit;



pub use decoder::{decoder_head, decoder_step, DecoderState};
pub use generator::{FreezePolicy, FreezeReport, StructureModel};
pub use params::{Forward, ParamEntry, ParamStore};
pub use vit::{encoder_forward, patch_embed, reduce_sequence};

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which head turns decoder tokens into views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// 1x1 conv + pixel shuffle (the main architecture).
    PixelShuffle,
    /// Deconvolution stack with batch norm and ReLU; emits all views at once
    /// from the reduced memory, bypassing the autoregressive decoder.
    ConvUpsample,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    /// Side length the input image is resized to before patching.
    pub image_in: usize,
    /// Patch side length.
    pub patch: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Sequence length after reduction; a perfect square.
    pub reduced_seq: usize,
    /// Channels after the head's 1x1 conv, consumed by pixel shuffle.
    pub head_channels: usize,
    /// Number of output viewpoints.
    pub views: usize,
    /// Output view side length.
    pub out_size: usize,
    /// MLP hidden width as a multiple of embed_dim.
    pub mlp_ratio: usize,
    /// Added to softplus(depth channel) so predicted depth starts near the
    /// camera distance of the object shell.
    pub depth_offset: f32,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            image_in: 224,
            patch: 16,
            embed_dim: 768,
            encoder_layers: 12,
            decoder_layers: 4,
            heads: 12,
            reduced_seq: 64,
            head_channels: 512,
            views: 8,
            out_size: 128,
            mlp_ratio: 4,
            depth_offset: 3.0,
            head: HeadKind::PixelShuffle,
        }
    }

    /// Small enough that finite-difference checks over the whole model run in
    /// seconds.
    pub fn desk() -> Self {
        ModelConfig {
            image_in: 64,
            patch: 8,
            embed_dim: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            reduced_seq: 16,
            head_channels: 128,
            views: 8,
            out_size: 32,
            mlp_ratio: 4,
            depth_offset: 3.0,
            head: HeadKind::PixelShuffle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &'static str, detail: alloc::string::String| {
            Err(Error::config(field, detail))
        };
        if self.image_in == 0 || self.patch == 0 || self.image_in % self.patch != 0 {
            return err(
                "image_in",
                format!(
                    "image_in {} must be a positive multiple of patch {}",
                    self.image_in, self.patch
                ),
            );
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return err(
                "heads",
                format!(
                    "embed_dim {} must be a positive multiple of heads {}",
                    self.embed_dim, self.heads
                ),
            );
        }
        let side = int_sqrt(self.reduced_seq);
        if side * side != self.reduced_seq || side == 0 {
            return err(
                "reduced_seq",
                format!("reduced_seq {} must be a positive perfect square", self.reduced_seq),
            );
        }
        if self.out_size == 0 || self.out_size % side != 0 {
            return err(
                "out_size",
                format!(
                    "out_size {} must be a positive multiple of the feature side {side}",
                    self.out_size
                ),
            );
        }
        let r = self.out_size / side;
        if self.head_channels % (r * r) != 0 || self.head_channels / (r * r) < 2 {
            return err(
                "head_channels",
                format!(
                    "head_channels {} must be divisible by shuffle factor squared {} with quotient >= 2",
                    self.head_channels,
                    r * r
                ),
            );
        }
        if self.views == 0 {
            return err("views", "views must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio", "mlp_ratio must be >= 1".into());
        }
        if !self.depth_offset.is_finite() || self.depth_offset < 0.0 {
            return err("depth_offset", "depth_offset must be finite and >= 0".into());
        }
        Ok(())
    }

    /// Token count after patch embedding: one per patch plus the class token.
    pub fn tokens(&self) -> usize {
        let n = self.image_in / self.patch;
        n * n + 1
    }

    /// Side length of the square feature map the reduced sequence reshapes to.
    pub fn map_side(&self) -> usize {
        int_sqrt(self.reduced_seq)
    }

    /// Pixel-shuffle upsampling factor in the head.
    pub fn shuffle_r(&self) -> usize {
        self.out_size / self.map_side()
    }

    /// Patch side used when a previous view is re-embedded for the decoder.
    pub fn view_patch(&self) -> usize {
        self.out_size / self.map_side()
    }
}

fn int_sqrt(n: usize) -> usize {
    let mut s = 0usize;
    while (s + 1) * (s + 1) <= n {
        s += 1;
    }
    s
}

/// The generator's output: `views` is [views, 2, out, out] with channel 0
/// holding positive depth and channel 1 raw mask logits.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub views: Tensor,
    pub view_count: usize,
    pub out_size: usize,
}

impl GeneratorOutput {
    pub fn new(views: Tensor, cfg: &ModelConfig) -> Result<GeneratorOutput> {
        let want = [cfg.views, 2, cfg.out_size, cfg.out_size];
        if views.shape() != want {
            return Err(Error::shape(
                "generator_output",
                format!(
                    "views shaped {}, config demands {}",
                    crate::error::fmt_shape(views.shape()),
                    crate::error::fmt_shape(&want)
                ),
            ));
        }
        if !views.is_finite() {
            return Err(Error::non_finite("generator_output"));
        }
        Ok(GeneratorOutput {
            views,
            view_count: cfg.views,
            out_size: cfg.out_size,
        })
    }

    /// Depth map of view `v` as a flat [out, out] row-major copy.
    pub fn depth(&self, v: usize) -> Result<Vec<f32>> {
        self.channel(v, 0)
    }

    /// Mask logits of view `v` as a flat [out, out] row-major copy.
    pub fn mask_logits(&self, v: usize) -> Result<Vec<f32>> {
        self.channel(v, 1)
    }

    fn channel(&self, v: usize, c: usize) -> Result<Vec<f32>> {
        if v >= self.view_count {
            return Err(Error::invalid(
                "generator_output",
                format!("view {v} out of range 0..{}", self.view_count),
            ));
        }
        let hw = self.out_size * self.out_size;
        let base = (v * 2 + c) * hw;
        Ok(self.views.data()[base..base + hw].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn full_preset_dimensions() {
        let cfg = ModelConfig::full();
        assert_eq!(cfg.tokens(), 197);
        assert_eq!(cfg.map_side(), 8);
        assert_eq!(cfg.shuffle_r(), 16);
        assert_eq!(cfg.head_channels / (16 * 16), 2);
    }

    #[test]
    fn desk_preset_dimensions() {
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.tokens(), 65);
        assert_eq!(cfg.map_side(), 4);
        assert_eq!(cfg.shuffle_r(), 8);
        assert_eq!(cfg.head_channels / (8 * 8), 2);
    }

    #[test]
    fn validation_rejects_each_broken_invariant() {
        let ok = ModelConfig::desk();

        let mut c = ok;
        c.image_in = 63;
        assert!(c.validate().is_err());

        let mut c = ok;
        c.reduced_seq = 15;
        assert!(c.validate().is_err());

        // quotient below 2: pixel shuffle could not yield depth + mask
        let mut c = ok;
        c.head_channels = 64;
        assert!(c.validate().is_err());

        let mut c = ok;
        c.heads = 5;
        assert!(c.validate().is_err());

        let mut c = ok;
        c.out_size = 30;
        assert!(c.validate().is_err());
    }

    #[test]
    fn generator_output_rejects_wrong_shape() {
        let cfg = ModelConfig::desk();
        let t = Tensor::zeros(&[8, 2, 16, 16]);
        assert!(GeneratorOutput::new(t, &cfg).is_err());
        let good = Tensor::zeros(&[8, 2, 32, 32]);
        assert!(GeneratorOutput::new(good, &cfg).is_ok());
    }

    #[test]
    fn generator_output_channel_extraction() {
        let cfg = ModelConfig::desk();
        let hw = 32 * 32;
        let mut data = alloc::vec![0.0f32; 8 * 2 * hw];
        // depth of view 3 gets 7.0, mask of view 3 gets -2.0
        for i in 0..hw {
            data[(3 * 2) * hw + i] = 7.0;
            data[(3 * 2 + 1) * hw + i] = -2.0;
        }
        let out = GeneratorOutput::new(Tensor::from_vec(&[8, 2, 32, 32], data).unwrap(), &cfg).unwrap();
        assert!(out.depth(3).unwrap().iter().all(|&d| d == 7.0));
        assert!(out.mask_logits(3).unwrap().iter().all(|&m| m == -2.0));
        assert!(out.depth(0).unwrap().iter().all(|&d| d == 0.0));
        assert!(out.depth(8).is_err());
    }
}
