//! Experiment configuration: one JSON file covering model preset, training
//! schedule, and paths. Unknown fields are rejected, defaults are filled in,
//! and every validation error names the offending field with its allowed
//! range. The resolved (fully defaulted) config is what runs echo to disk.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pcgen_core::geometry::Pose;
use pcgen_core::model::{FreezePolicy, HeadKind, ModelConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model scale: "desk" (seconds-fast, fully checkable) or "full".
    #[serde(default = "default_preset")]
    pub preset: String,
    /// "pixel_shuffle" (main architecture) or "conv_upsample" (the earlier
    /// deconvolution head).
    #[serde(default = "default_head")]
    pub head: String,
    #[serde(default)]
    pub seed: u64,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainParams,
}

fn default_preset() -> String {
    "desk".to_string()
}

fn default_head() -> String {
    "pixel_shuffle".to_string()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub phase1_epochs: u32,
    pub phase2_epochs: u32,
    pub batch_size: usize,
    /// Weight of the depth L1 term against the mask BCE term.
    pub lambda_depth: f32,
    /// Novel viewpoints sampled per phase-2 step.
    pub novel_views_k: usize,
    pub head_lr_max: f32,
    pub head_lr_min: f32,
    /// Phase-1 encoder-group learning rate as a fraction of the head rate.
    pub encoder_lr_scale: f32,
    pub clip_norm: f32,
    /// Encoder layers frozen from the bottom; absent means half the stack.
    pub freeze_encoder_layers: Option<usize>,
    pub keep_checkpoints: usize,
    pub eval_every_epochs: u32,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            phase1_epochs: 80,
            phase2_epochs: 20,
            batch_size: 4,
            lambda_depth: 1.0,
            novel_views_k: 3,
            head_lr_max: 1e-3,
            head_lr_min: 1e-5,
            encoder_lr_scale: 0.1,
            clip_norm: 5.0,
            freeze_encoder_layers: None,
            keep_checkpoints: 3,
            eval_every_epochs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.preset != "desk" && self.preset != "full" {
            anyhow::bail!(
                "field 'preset' is '{}', allowed values are 'desk' and 'full'",
                self.preset
            );
        }
        if self.head != "pixel_shuffle" && self.head != "conv_upsample" {
            anyhow::bail!(
                "field 'head' is '{}', allowed values are 'pixel_shuffle' and 'conv_upsample'",
                self.head
            );
        }
        let t = &self.train;
        if t.batch_size < 1 {
            anyhow::bail!("field 'train.batch_size' is {}, allowed range is >= 1", t.batch_size);
        }
        if !(t.lambda_depth.is_finite() && t.lambda_depth >= 0.0) {
            anyhow::bail!(
                "field 'train.lambda_depth' is {}, allowed range is finite and >= 0",
                t.lambda_depth
            );
        }
        if t.novel_views_k < 1 {
            anyhow::bail!(
                "field 'train.novel_views_k' is {}, allowed range is >= 1",
                t.novel_views_k
            );
        }
        for (name, value) in [
            ("train.head_lr_max", t.head_lr_max),
            ("train.head_lr_min", t.head_lr_min),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                anyhow::bail!("field '{name}' is {value}, allowed range is finite and >= 0");
            }
        }
        if t.head_lr_min > t.head_lr_max {
            anyhow::bail!(
                "field 'train.head_lr_min' is {} which exceeds head_lr_max {}, allowed range is lr_min <= lr_max",
                t.head_lr_min,
                t.head_lr_max
            );
        }
        if !(t.encoder_lr_scale.is_finite() && (0.0..=1.0).contains(&t.encoder_lr_scale)) {
            anyhow::bail!(
                "field 'train.encoder_lr_scale' is {}, allowed range is 0.0..=1.0 so the encoder group never outpaces the head in phase 1",
                t.encoder_lr_scale
            );
        }
        if !(t.clip_norm.is_finite() && t.clip_norm > 0.0) {
            anyhow::bail!(
                "field 'train.clip_norm' is {}, allowed range is finite and > 0",
                t.clip_norm
            );
        }
        if t.keep_checkpoints < 1 {
            anyhow::bail!(
                "field 'train.keep_checkpoints' is {}, allowed range is >= 1",
                t.keep_checkpoints
            );
        }
        if t.eval_every_epochs < 1 {
            anyhow::bail!(
                "field 'train.eval_every_epochs' is {}, allowed range is >= 1",
                t.eval_every_epochs
            );
        }
        let model = self.model_config()?;
        if let Some(n) = t.freeze_encoder_layers {
            if n > model.encoder_layers {
                anyhow::bail!(
                    "field 'train.freeze_encoder_layers' is {n}, allowed range is 0..={} for this preset",
                    model.encoder_layers
                );
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match self.preset.as_str() {
            "desk" => ModelConfig::desk(),
            "full" => ModelConfig::full(),
            other => anyhow::bail!("field 'preset' is '{other}', allowed values are 'desk' and 'full'"),
        };
        cfg.head = match self.head.as_str() {
            "pixel_shuffle" => HeadKind::PixelShuffle,
            "conv_upsample" => HeadKind::ConvUpsample,
            other => anyhow::bail!(
                "field 'head' is '{other}', allowed values are 'pixel_shuffle' and 'conv_upsample'"
            ),
        };
        Ok(cfg)
    }

    /// Encoder layers to freeze in phase 1: explicit value or half the stack.
    pub fn frozen_encoder_layers(&self) -> Result<usize> {
        Ok(self
            .train
            .freeze_encoder_layers
            .unwrap_or(self.model_config()?.encoder_layers / 2))
    }

    pub fn freeze_policy(&self) -> Result<FreezePolicy> {
        let n = self.frozen_encoder_layers()?;
        Ok(if n == 0 {
            FreezePolicy::Thaw
        } else {
            FreezePolicy::EncoderFirst(n)
        })
    }

    /// Writes the fully resolved config (defaults included) into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.resolved.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// On-disk pose: rotation as 9 row-major floats, translation as 3, pinhole
/// intrinsics alongside.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PoseJson {
    pub rotation: [f32; 9],
    pub translation: [f32; 3],
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub f: f32,
    pub cx: f32,
    pub cy: f32,
}

impl PoseJson {
    pub fn from_pose(p: &Pose) -> PoseJson {
        let r = &p.rotation;
        PoseJson {
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            translation: p.translation,
            intrinsics: Intrinsics {
                f: p.focal,
                cx: p.cx,
                cy: p.cy,
            },
        }
    }

    pub fn to_pose(&self, image_size: usize) -> Result<Pose> {
        let r = &self.rotation;
        let pose = Pose {
            rotation: [
                [r[0], r[1], r[2]],
                [r[3], r[4], r[5]],
                [r[6], r[7], r[8]],
            ],
            translation: self.translation,
            focal: self.intrinsics.f,
            cx: self.intrinsics.cx,
            cy: self.intrinsics.cy,
        };
        pose.validate(image_size, image_size)
            .map_err(|e| anyhow::anyhow!("pose fails validation: {e}"))?;
        Ok(pose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcgen_core::geometry::{look_at_pose, CameraConfig};

    fn minimal_json(dir: &Path) -> PathBuf {
        let path = dir.join("cfg.json");
        fs::write(
            &path,
            r#"{"data_root": "/tmp/data", "out_dir": "/tmp/out"}"#,
        )
        .unwrap();
        path
    }

    #[test]
    fn defaults_fill_and_echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::load(&minimal_json(dir.path())).unwrap();
        assert_eq!(cfg.preset, "desk");
        assert_eq!(cfg.train.phase1_epochs, 80);
        assert_eq!(cfg.train.encoder_lr_scale, 0.1);

        let echoed = cfg.echo_into(dir.path()).unwrap();
        let back: ExperimentConfig =
            serde_json::from_str(&fs::read_to_string(echoed).unwrap()).unwrap();
        assert_eq!(back.train.keep_checkpoints, cfg.train.keep_checkpoints);
        assert_eq!(back.seed, cfg.seed);
    }

    #[test]
    fn unknown_field_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(
            &path,
            r#"{"data_root": "/d", "out_dir": "/o", "learning_rate": 3}"#,
        )
        .unwrap();
        let err = format!("{:#}", ExperimentConfig::load(&path).unwrap_err());
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn validation_names_field_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(
            &path,
            r#"{"data_root": "/d", "out_dir": "/o", "train": {"encoder_lr_scale": 1.5}}"#,
        )
        .unwrap();
        let err = format!("{:#}", ExperimentConfig::load(&path).unwrap_err());
        assert!(
            err.contains("train.encoder_lr_scale") && err.contains("0.0..=1.0"),
            "{err}"
        );

        fs::write(
            &path,
            r#"{"data_root": "/d", "out_dir": "/o", "preset": "huge"}"#,
        )
        .unwrap();
        let err = format!("{:#}", ExperimentConfig::load(&path).unwrap_err());
        assert!(err.contains("preset") && err.contains("desk"), "{err}");

        fs::write(
            &path,
            r#"{"data_root": "/d", "out_dir": "/o", "train": {"freeze_encoder_layers": 9}}"#,
        )
        .unwrap();
        let err = format!("{:#}", ExperimentConfig::load(&path).unwrap_err());
        assert!(err.contains("freeze_encoder_layers") && err.contains("0..=2"), "{err}");
    }

    #[test]
    fn pose_json_round_trips_through_validation() {
        let cam = CameraConfig::new(32);
        let pose = look_at_pose(&cam, 135.0, 20.0).unwrap();
        let j = PoseJson::from_pose(&pose);
        let text = serde_json::to_string(&j).unwrap();
        let back: PoseJson = serde_json::from_str(&text).unwrap();
        let restored = back.to_pose(32).unwrap();
        assert_eq!(pose.rotation, restored.rotation);
        assert_eq!(pose.translation, restored.translation);
        assert_eq!(pose.focal, restored.focal);
    }

    #[test]
    fn default_freeze_is_half_the_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::load(&minimal_json(dir.path())).unwrap();
        assert_eq!(cfg.frozen_encoder_layers().unwrap(), 1);
        let mut full = cfg.clone();
        full.preset = "full".to_string();
        assert_eq!(full.frozen_encoder_layers().unwrap(), 6);
    }
}
