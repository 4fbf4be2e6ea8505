//! Two-phase training: direct fixed-view map supervision, then joint 2D
//! optimization of the fused cloud at sampled novel viewpoints.
//!
//! All randomness is derived statelessly from (seed, label, index), so
//! resuming from an epoch checkpoint reproduces the uninterrupted run
//! bitwise: batch order depends only on the epoch, novel poses only on the
//! global step, and optimizer state travels inside the checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pcgen_core::geometry::backproject_tape;
use pcgen_core::loss::{depth_l1, joint_2d_loss, mask_bce};
use pcgen_core::model::{Forward, StructureModel};
use pcgen_core::optim::{clip_global_norm, cosine_lr, Adam, AdamConfig, SlotDump};
use pcgen_core::render::RenderConfig;
use pcgen_core::rng::Rng;
use pcgen_core::{Tape, Tensor};

use crate::config::ExperimentConfig;
use crate::dataset::{epoch_batches, fixed_rig, Dataset, Sample, VIEW_COUNT};
use crate::evaluate::{evaluate_samples, EvalSummary};
use crate::tnsr_io::{read_tnsr_expect, write_tnsr};
use crate::NumericFailure;

/// True when PCGEN_DETERMINISTIC=1: wall times are zeroed in logs so two
/// seeded runs produce byte-identical output.
pub fn deterministic() -> bool {
    std::env::var("PCGEN_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

/// Pretrained vision-stack parameters get the scaled learning rate in
/// phase 1. The sequence reducer, decoder, and heads are trained from
/// scratch at the full rate.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("patch_embed.") || name.starts_with("encoder.")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        phase: u8,
        epoch: u64,
        step: u64,
        loss: f64,
        mask_bce: f64,
        depth_l1: f64,
        lr_head: f32,
        lr_encoder: f32,
        grad_norm: f32,
        wall_ms: u64,
    },
    Eval {
        phase: u8,
        epoch: u64,
        split: String,
        pred_to_gt_x100: f64,
        gt_to_pred_x100: f64,
        mean_points: f64,
        flagged: usize,
        included: usize,
    },
    Warn {
        phase: u8,
        step: u64,
        message: String,
    },
    Checkpoint {
        phase: u8,
        epoch: u64,
        step: u64,
        path: String,
        best: bool,
    },
}

/// JSON-lines sink for training events, optionally echoing progress lines.
pub struct TrainLogger {
    file: fs::File,
    path: PathBuf,
    echo: bool,
}

impl TrainLogger {
    pub fn append(path: &Path, echo: bool) -> Result<TrainLogger> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(TrainLogger {
            file,
            path: path.to_path_buf(),
            echo,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log(&mut self, ev: &LogEvent) -> Result<()> {
        let line = serde_json::to_string(ev)?;
        writeln!(self.file, "{line}")?;
        if self.echo {
            match ev {
                LogEvent::Step {
                    phase,
                    epoch,
                    step,
                    loss,
                    lr_head,
                    ..
                } => println!("phase {phase} epoch {epoch} step {step} loss {loss:.6} lr {lr_head:.3e}"),
                LogEvent::Eval {
                    phase,
                    epoch,
                    split,
                    pred_to_gt_x100,
                    gt_to_pred_x100,
                    ..
                } => println!(
                    "phase {phase} epoch {epoch} eval[{split}] pred_to_gt {pred_to_gt_x100:.4} gt_to_pred {gt_to_pred_x100:.4}"
                ),
                LogEvent::Warn { step, message, .. } => println!("warn step {step}: {message}"),
                LogEvent::Checkpoint { path, best, .. } => {
                    println!("checkpoint {path}{}", if *best { " (best)" } else { "" })
                }
            }
        }
        Ok(())
    }
}

/// Reads every event back from a JSONL log.
pub fn read_log(path: &Path) -> Result<Vec<LogEvent>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(line)
            .with_context(|| format!("{}:{} is not a log event", path.display(), i + 1))?;
        events.push(ev);
    }
    Ok(events)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamMeta {
    name: String,
    step: u64,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointJson {
    phase: u8,
    epoch: u64,
    global_step: u64,
    eval_pred_to_gt: Option<f64>,
    params: Vec<ParamMeta>,
    adam: Vec<AdamMeta>,
    config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct CheckpointInfo {
    pub phase: u8,
    pub epoch: u64,
    pub global_step: u64,
    pub eval_pred_to_gt: Option<f64>,
}

/// Writes model weights, optimizer moments, and run position under `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &StructureModel,
    adam: &Adam,
    info: &CheckpointInfo,
    config_echo: &serde_json::Value,
) -> Result<()> {
    let params_dir = dir.join("params");
    let adam_dir = dir.join("adam");
    fs::create_dir_all(&params_dir)?;
    fs::create_dir_all(&adam_dir)?;

    let mut params_meta = Vec::new();
    for (name, bytes) in model.export_weights() {
        fs::write(params_dir.join(format!("{name}.tnsr")), &bytes)?;
        let entry = model.params.get(&name).map_err(anyhow::Error::from)?;
        params_meta.push(ParamMeta {
            shape: entry.shape.clone(),
            frozen: entry.frozen,
            name,
        });
    }

    let mut adam_meta = Vec::new();
    for (name, dump) in adam.export_slots() {
        write_tnsr(&adam_dir.join(format!("{name}.m.tnsr")), &[dump.m.len()], &dump.m)?;
        write_tnsr(&adam_dir.join(format!("{name}.v.tnsr")), &[dump.v.len()], &dump.v)?;
        adam_meta.push(AdamMeta {
            name,
            step: dump.step,
            len: dump.m.len(),
        });
    }

    let meta = CheckpointJson {
        phase: info.phase,
        epoch: info.epoch,
        global_step: info.global_step,
        eval_pred_to_gt: info.eval_pred_to_gt,
        params: params_meta,
        adam: adam_meta,
        config: config_echo.clone(),
    };
    fs::write(
        dir.join("checkpoint.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

/// Restores weights (and optimizer state when given) from a checkpoint
/// directory; returns where the run stood.
pub fn load_checkpoint(
    dir: &Path,
    model: &mut StructureModel,
    adam: Option<&mut Adam>,
) -> Result<CheckpointInfo> {
    let meta_path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&meta_path)
        .with_context(|| format!("reading {}", meta_path.display()))?;
    let meta: CheckpointJson =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", meta_path.display()))?;

    let mut entries = Vec::with_capacity(meta.params.len());
    for pm in &meta.params {
        let path = dir.join("params").join(format!("{}.tnsr", pm.name));
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        entries.push((pm.name.clone(), bytes));
    }
    model.import_weights(&entries).map_err(anyhow::Error::from)?;
    for pm in &meta.params {
        model
            .params
            .set_frozen(&pm.name, pm.frozen)
            .map_err(anyhow::Error::from)?;
    }

    if let Some(adam) = adam {
        let mut slots = Vec::with_capacity(meta.adam.len());
        for am in &meta.adam {
            let m = read_tnsr_expect(&dir.join("adam").join(format!("{}.m.tnsr", am.name)), &[am.len])?;
            let v = read_tnsr_expect(&dir.join("adam").join(format!("{}.v.tnsr", am.name)), &[am.len])?;
            slots.push((am.name.clone(), SlotDump { step: am.step, m, v }));
        }
        adam.import_slots(slots).map_err(anyhow::Error::from)?;
    }

    Ok(CheckpointInfo {
        phase: meta.phase,
        epoch: meta.epoch,
        global_step: meta.global_step,
        eval_pred_to_gt: meta.eval_pred_to_gt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub phase: u8,
    pub steps: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

struct StepStats {
    loss: f64,
    mask_bce: f64,
    depth_l1: f64,
    /// (sample id, view, bce, l1) for NaN diagnostics.
    per_view: Vec<(String, usize, f32, f32)>,
}

fn scalar(t: &Tensor) -> f64 {
    t.data()[0] as f64
}

/// Mean over the batch of the per-sample map loss: for each of the eight
/// views, mask BCE plus lambda times masked depth L1 against the fixed-view
/// ground truth, averaged over views.
fn phase1_batch_loss(
    model: &StructureModel,
    fwd: &Forward,
    batch: &[&Sample],
    lambda: f32,
) -> Result<(Tensor, StepStats)> {
    let tape = fwd.tape();
    let out = model.cfg.out_size;
    let mut total: Option<Tensor> = None;
    let mut bce_sum = 0.0;
    let mut l1_sum = 0.0;
    let mut per_view = Vec::new();

    for sample in batch {
        let views = model.forward_views(fwd, &sample.rgb).map_err(anyhow::Error::from)?;
        for (v, (view_t, gt)) in views.iter().zip(&sample.gt_views_fixed).enumerate() {
            let depth = tape.slice(view_t, 0, 0, 1).map_err(anyhow::Error::from)?;
            let depth = tape.reshape(&depth, &[out, out]).map_err(anyhow::Error::from)?;
            let logits = tape.slice(view_t, 0, 1, 1).map_err(anyhow::Error::from)?;
            let logits = tape.reshape(&logits, &[out, out]).map_err(anyhow::Error::from)?;

            let bce = mask_bce(tape, &logits, &gt.mask).map_err(anyhow::Error::from)?;
            let l1 = depth_l1(tape, &depth, &gt.depth, &gt.mask).map_err(anyhow::Error::from)?;
            bce_sum += scalar(&bce);
            l1_sum += scalar(&l1);
            per_view.push((
                sample.object_id.clone(),
                v,
                bce.data()[0],
                l1.data()[0],
            ));

            let weighted = tape.scale(&l1, lambda).map_err(anyhow::Error::from)?;
            let term = tape.add(&bce, &weighted).map_err(anyhow::Error::from)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(&acc, &term).map_err(anyhow::Error::from)?,
            });
        }
    }
    let n = (batch.len() * VIEW_COUNT) as f64;
    let total = total.expect("nonempty batch");
    let total = tape
        .scale(&total, (1.0 / n) as f32)
        .map_err(anyhow::Error::from)?;
    Ok((
        total.clone(),
        StepStats {
            loss: scalar(&total),
            mask_bce: bce_sum / n,
            depth_l1: l1_sum / n,
            per_view,
        },
    ))
}

/// Mean over contributing samples of the joint 2D loss: forward to views,
/// threshold mask logits data-side, backproject lit pixels onto the tape,
/// fuse, then compare pseudo-renders at K novel poses against ground-truth
/// renders of the GT cloud. Returns None when no sample yields points.
#[allow(clippy::too_many_arguments)]
fn phase2_batch_loss(
    model: &StructureModel,
    fwd: &Forward,
    batch: &[&Sample],
    seed: u64,
    global_step: u64,
    novel_k: usize,
    lambda: f32,
    warnings: &mut Vec<String>,
) -> Result<(Option<Tensor>, StepStats)> {
    let tape = fwd.tape();
    let out = model.cfg.out_size;
    let rig = fixed_rig(out)?;
    let rcfg = RenderConfig::for_camera(out, rig.camera.radius).map_err(anyhow::Error::from)?;

    let mut nrng = Rng::derive(seed, "novel").with_index(global_step);
    let mut total: Option<Tensor> = None;
    let mut contributors = 0usize;
    let mut bce_sum = 0.0;
    let mut l1_sum = 0.0;
    let mut per_view = Vec::new();

    for sample in batch {
        let views = model.forward_views(fwd, &sample.rgb).map_err(anyhow::Error::from)?;
        let mut parts: Vec<Tensor> = Vec::new();
        for (v, view_t) in views.iter().enumerate() {
            let logits = tape.slice(view_t, 0, 1, 1).map_err(anyhow::Error::from)?;
            let selected: Vec<(usize, usize)> = logits
                .data()
                .iter()
                .enumerate()
                .filter(|(_, l)| **l >= 0.0)
                .map(|(i, _)| (i / out, i % out))
                .collect();
            if selected.is_empty() {
                continue;
            }
            let depth = tape.slice(view_t, 0, 0, 1).map_err(anyhow::Error::from)?;
            let depth = tape.reshape(&depth, &[out, out]).map_err(anyhow::Error::from)?;
            let pts = backproject_tape(tape, &depth, &selected, &rig.fixed_views[v])
                .map_err(anyhow::Error::from)?;
            parts.push(pts);
        }
        if parts.is_empty() {
            warnings.push(format!(
                "sample {} produced an empty cloud, skipped this step",
                sample.object_id
            ));
            continue;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let cloud = tape.concat(&refs, 0).map_err(anyhow::Error::from)?;

        let mut poses = Vec::with_capacity(novel_k);
        let mut gt_views = Vec::with_capacity(novel_k);
        for _ in 0..novel_k {
            let pose = rig.sample_novel(&mut nrng).map_err(anyhow::Error::from)?;
            let gt = pcgen_core::render::brute_force_render(&sample.gt_cloud, &pose, &rcfg)
                .map_err(anyhow::Error::from)?
                .view;
            poses.push(pose);
            gt_views.push(gt);
        }
        let lb = joint_2d_loss(tape, &cloud, &gt_views, &poses, &rcfg, lambda)
            .map_err(anyhow::Error::from)?;
        if lb.per_view.iter().all(|v| v.co_lit == 0) {
            warnings.push(format!(
                "sample {}: no pixel lit in both prediction and ground truth at step {global_step}",
                sample.object_id
            ));
        }
        bce_sum += lb.mask_bce as f64;
        l1_sum += lb.depth_l1 as f64;
        for (v, vl) in lb.per_view.iter().enumerate() {
            per_view.push((sample.object_id.clone(), v, vl.mask_bce, vl.depth_l1));
        }
        total = Some(match total {
            None => lb.total,
            Some(acc) => tape.add(&acc, &lb.total).map_err(anyhow::Error::from)?,
        });
        contributors += 1;
    }

    match total {
        None => Ok((
            None,
            StepStats {
                loss: 0.0,
                mask_bce: 0.0,
                depth_l1: 0.0,
                per_view,
            },
        )),
        Some(t) => {
            let scaled = tape
                .scale(&t, 1.0 / contributors as f32)
                .map_err(anyhow::Error::from)?;
            Ok((
                Some(scaled.clone()),
                StepStats {
                    loss: scalar(&scaled),
                    mask_bce: bce_sum / contributors as f64,
                    depth_l1: l1_sum / contributors as f64,
                    per_view,
                },
            ))
        }
    }
}

/// True for core errors of the numeric class (an op or gradient went
/// non-finite), which abort training with step diagnostics.
fn is_numeric_error(e: &anyhow::Error) -> bool {
    match e.downcast_ref::<pcgen_core::Error>() {
        Some(pcgen_core::Error::NonFinite { .. }) => true,
        Some(other) => other.to_string().contains("non-finite"),
        None => false,
    }
}

fn with_numeric_context(
    e: anyhow::Error,
    phase: u8,
    step: u64,
    lr_head: f32,
    lr_encoder: f32,
) -> anyhow::Error {
    if e.downcast_ref::<NumericFailure>().is_some() {
        return e;
    }
    if is_numeric_error(&e) {
        return NumericFailure(format!(
            "{e:#} at phase {phase} step {step} (lr_head {lr_head:e}, lr_encoder {lr_encoder:e})"
        ))
        .into();
    }
    e
}

/// Forward, loss, backward, clip, and parameter update for one batch.
#[allow(clippy::too_many_arguments)]
fn train_step(
    phase: Phase,
    model: &mut StructureModel,
    batch: &[&Sample],
    cfg: &ExperimentConfig,
    global_step: u64,
    lr_head: f32,
    lr_encoder: f32,
    adam: &mut Adam,
    warnings: &mut Vec<String>,
) -> Result<(StepStats, f32)> {
    let t = &cfg.train;
    let p = phase.number();
    let tape = Tape::new();
    let fwd = Forward::new(&tape, &model.params, true);
    let (loss_t, stats) = match phase {
        Phase::One => {
            let (l, s) = phase1_batch_loss(model, &fwd, batch, t.lambda_depth)?;
            (Some(l), s)
        }
        Phase::Two => phase2_batch_loss(
            model,
            &fwd,
            batch,
            cfg.seed,
            global_step,
            t.novel_views_k,
            t.lambda_depth,
            warnings,
        )?,
    };
    if !stats.loss.is_finite() {
        return Err(nan_diagnostics(p, global_step, lr_head, lr_encoder, &stats).into());
    }
    let mut grad_norm = 0.0f32;
    if let Some(loss_t) = &loss_t {
        tape.backward(loss_t).map_err(anyhow::Error::from)?;
        let mut grads: BTreeMap<String, Vec<f32>> = fwd.grads().map_err(anyhow::Error::from)?;
        grad_norm = clip_global_norm(&mut grads, t.clip_norm).map_err(anyhow::Error::from)?;
        for (name, grad) in &grads {
            let lr = if is_encoder_param(name) { lr_encoder } else { lr_head };
            let param = model.params.data_mut(name).map_err(anyhow::Error::from)?;
            adam.apply(name, param, grad, lr).map_err(anyhow::Error::from)?;
        }
    }
    Ok((stats, grad_norm))
}

fn nan_diagnostics(phase: u8, step: u64, lr_head: f32, lr_encoder: f32, stats: &StepStats) -> NumericFailure {
    let offender = stats
        .per_view
        .iter()
        .find(|(_, _, b, l)| !b.is_finite() || !l.is_finite());
    let detail = match offender {
        Some((id, v, b, l)) => format!("first offending view: sample {id} view {v} (bce {b}, depth_l1 {l})"),
        None => "no single view is non-finite; the sum overflowed".to_string(),
    };
    NumericFailure(format!(
        "loss is not finite at phase {phase} step {step} (lr_head {lr_head:e}, lr_encoder {lr_encoder:e}); {detail}"
    ))
}

/// Epoch indices never collide across phases in the shuffle stream.
fn epoch_stream_index(phase: Phase, epoch: u64) -> u64 {
    ((phase.number() as u64) << 32) | epoch
}

/// Runs one training phase over `train_indices`, evaluating on
/// `eval_indices` at the configured cadence. `start_epoch` > 0 resumes an
/// interrupted run whose state is already loaded.
#[allow(clippy::too_many_arguments)]
pub fn run_phase(
    phase: Phase,
    model: &mut StructureModel,
    samples: &[Sample],
    train_indices: &[usize],
    eval_indices: &[usize],
    cfg: &ExperimentConfig,
    out_dir: &Path,
    adam: &mut Adam,
    start_epoch: u64,
    logger: &mut TrainLogger,
) -> Result<PhaseOutcome> {
    if train_indices.is_empty() {
        anyhow::bail!("training split is empty");
    }
    for &i in train_indices.iter().chain(eval_indices) {
        if i >= samples.len() {
            anyhow::bail!("sample index {i} out of range 0..{}", samples.len());
        }
    }
    let t = &cfg.train;
    let epochs = match phase {
        Phase::One => t.phase1_epochs as u64,
        Phase::Two => t.phase2_epochs as u64,
    };
    if start_epoch > epochs {
        anyhow::bail!("resume epoch {start_epoch} is past the configured {epochs} epochs");
    }
    let p = phase.number();
    let batches_per_epoch = train_indices.len().div_ceil(t.batch_size) as u64;
    let total_steps = (epochs * batches_per_epoch).max(1);
    let ckpt_root = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_root)?;
    let config_echo = serde_json::to_value(cfg)?;
    let timing = !deterministic();

    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut steps_run = 0u64;
    let mut best: Option<(f64, PathBuf)> = None;
    let mut last_checkpoint = PathBuf::new();

    for epoch in start_epoch..epochs {
        let batches = epoch_batches(
            train_indices,
            t.batch_size,
            cfg.seed,
            epoch_stream_index(phase, epoch),
        )?;
        for (bi, batch_idx) in batches.iter().enumerate() {
            let global_step = epoch * batches_per_epoch + bi as u64;
            let started = Instant::now();

            let lr_head = cosine_lr(global_step, total_steps, t.head_lr_max, t.head_lr_min)
                .map_err(anyhow::Error::from)?;
            let lr_encoder = match phase {
                Phase::One => lr_head * t.encoder_lr_scale,
                Phase::Two => lr_head,
            };

            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| &samples[i]).collect();
            let mut warnings = Vec::new();
            let step_result = train_step(
                phase,
                model,
                &batch,
                cfg,
                global_step,
                lr_head,
                lr_encoder,
                adam,
                &mut warnings,
            );
            for w in warnings {
                logger.log(&LogEvent::Warn {
                    phase: p,
                    step: global_step,
                    message: w,
                })?;
            }
            let (stats, grad_norm) = step_result
                .map_err(|e| with_numeric_context(e, p, global_step, lr_head, lr_encoder))?;

            if first_loss.is_nan() {
                first_loss = stats.loss;
            }
            final_loss = stats.loss;
            steps_run += 1;
            logger.log(&LogEvent::Step {
                phase: p,
                epoch,
                step: global_step,
                loss: stats.loss,
                mask_bce: stats.mask_bce,
                depth_l1: stats.depth_l1,
                lr_head,
                lr_encoder,
                grad_norm,
                wall_ms: if timing { started.elapsed().as_millis() as u64 } else { 0 },
            })?;
        }

        let end_step = (epoch + 1) * batches_per_epoch;
        let mut eval_result: Option<f64> = None;
        let eval_due = !eval_indices.is_empty()
            && (epoch + 1 == epochs || (epoch + 1) % t.eval_every_epochs as u64 == 0);
        if eval_due {
            let eval_samples: Vec<&Sample> = eval_indices.iter().map(|&i| &samples[i]).collect();
            let summary: EvalSummary = evaluate_samples(model, &eval_samples)?;
            eval_result = summary.mean_pred_to_gt_x100;
            logger.log(&LogEvent::Eval {
                phase: p,
                epoch,
                split: "eval".to_string(),
                pred_to_gt_x100: summary.mean_pred_to_gt_x100.unwrap_or(f64::NAN),
                gt_to_pred_x100: summary.mean_gt_to_pred_x100.unwrap_or(f64::NAN),
                mean_points: summary.mean_points,
                flagged: summary.flagged,
                included: summary.included,
            })?;
        }

        let ckpt_dir = ckpt_root.join(format!("phase{p}-epoch{:04}", epoch));
        save_checkpoint(
            &ckpt_dir,
            model,
            adam,
            &CheckpointInfo {
                phase: p,
                epoch,
                global_step: end_step,
                eval_pred_to_gt: eval_result,
            },
            &config_echo,
        )?;
        last_checkpoint = ckpt_dir.clone();
        let is_best = match (eval_result, &best) {
            (Some(e), Some((b, _))) => e < *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if is_best {
            best = Some((eval_result.unwrap(), ckpt_dir.clone()));
        }
        logger.log(&LogEvent::Checkpoint {
            phase: p,
            epoch,
            step: end_step,
            path: ckpt_dir.display().to_string(),
            best: is_best,
        })?;
        prune_checkpoints(
            &ckpt_root,
            p,
            t.keep_checkpoints,
            best.as_ref().map(|(_, path)| path.as_path()),
        )?;
    }

    Ok(PhaseOutcome {
        phase: p,
        steps: steps_run,
        first_loss,
        final_loss,
        last_checkpoint,
        best_checkpoint: best.map(|(_, path)| path),
    })
}

/// Keeps the newest `keep` checkpoints of a phase plus the best one.
fn prune_checkpoints(root: &Path, phase: u8, keep: usize, best: Option<&Path>) -> Result<()> {
    let prefix = format!("phase{phase}-epoch");
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|path| {
            path.is_dir()
                && path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with(&prefix))
        })
        .collect();
    dirs.sort();
    let cut = dirs.len().saturating_sub(keep);
    for old in &dirs[..cut] {
        if best.is_some_and(|b| b == old.as_path()) {
            continue;
        }
        fs::remove_dir_all(old)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseSelect {
    One,
    Two,
    Both,
}

impl PhaseSelect {
    pub fn parse(name: &str) -> Result<PhaseSelect> {
        match name {
            "1" => Ok(PhaseSelect::One),
            "2" => Ok(PhaseSelect::Two),
            "both" => Ok(PhaseSelect::Both),
            other => anyhow::bail!("unknown phase '{other}', expected 1, 2, or both"),
        }
    }
}

/// Loads every sample of the dataset into memory, index-aligned.
pub fn load_all_samples(data: &Dataset) -> Result<Vec<Sample>> {
    (0..data.len()).map(|i| data.load_sample(i)).collect()
}

/// Reads the experiment config embedded in a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<ExperimentConfig> {
    let meta_path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&meta_path)
        .with_context(|| format!("reading {}", meta_path.display()))?;
    let meta: CheckpointJson =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", meta_path.display()))?;
    let cfg: ExperimentConfig = serde_json::from_value(meta.config)
        .with_context(|| format!("{} carries no usable config", meta_path.display()))?;
    Ok(cfg)
}

/// Full training entry point: applies the freezing policy, optionally
/// restores a checkpoint, and runs the selected phases in order. `jobs`
/// bounds data-loading threads only; the training loop itself is serial.
pub fn train_run(
    model: &mut StructureModel,
    data: &Dataset,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    select: PhaseSelect,
    resume: Option<&Path>,
    jobs: usize,
) -> Result<Vec<PhaseOutcome>> {
    fs::create_dir_all(out_dir)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let samples = data.load_samples(&all, jobs)?;
    let train_idx = data.indices(crate::dataset::Split::Train).to_vec();
    let eval_idx = data.indices(crate::dataset::Split::Val).to_vec();

    let policy = cfg.freeze_policy()?;
    model.set_freezing(policy).map_err(anyhow::Error::from)?;

    let mut adam = Adam::new(AdamConfig::default());
    let mut start = None;
    if let Some(ckpt) = resume {
        let info = load_checkpoint(ckpt, model, Some(&mut adam))?;
        start = Some(info);
    }
    if matches!(select, PhaseSelect::Two) && resume.is_none() {
        anyhow::bail!("phase 2 needs a phase-1 checkpoint: pass --resume <checkpoint dir>");
    }

    let mut logger = TrainLogger::append(&out_dir.join("train.jsonl"), true)?;
    let mut outcomes = Vec::new();
    let phases: Vec<Phase> = match select {
        PhaseSelect::One => vec![Phase::One],
        PhaseSelect::Two => vec![Phase::Two],
        PhaseSelect::Both => vec![Phase::One, Phase::Two],
    };
    for phase in phases {
        let start_epoch = match &start {
            Some(info) if info.phase == phase.number() => info.epoch + 1,
            Some(info) if info.phase > phase.number() => {
                anyhow::bail!(
                    "checkpoint is from phase {}, refusing to rerun phase {}",
                    info.phase,
                    phase.number()
                );
            }
            _ => 0,
        };
        let outcome = run_phase(
            phase,
            model,
            &samples,
            &train_idx,
            &eval_idx,
            cfg,
            out_dir,
            &mut adam,
            start_epoch,
            &mut logger,
        )?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
