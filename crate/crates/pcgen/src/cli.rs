//! Command-line surface: argument parsing, the five subcommands, and the
//! exit-code classes (0 ok, 1 usage, 2 data, 3 numeric).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use pcgen_core::error::Result as CoreResult;
use pcgen_core::geometry::{backproject, backproject_tape, PointCloud, Pose};
use pcgen_core::loss::{count_generated_points, depth_l1, joint_2d_loss, mask_bce};
use pcgen_core::model::{Forward, ModelConfig, StructureModel};
use pcgen_core::render::{brute_force_render, pseudo_render_tape, RenderConfig};
use pcgen_core::rng::Rng;
use pcgen_core::tensor::{
    finite_difference_check, finite_difference_check_masked, multi_head_attention,
    resample_away_from_zero, BatchNormState, Tape, Tensor,
};

use crate::config::ExperimentConfig;
use crate::dataset::{
    load_dataset, synth_dataset, DatasetGeometry, Split, SynthKind, DEFAULT_CLOUD_POINTS,
};
use crate::evaluate::{
    evaluate_gt_views, evaluate_samples, format_table, prediction_views, summary_row, write_report,
    MASK_THRESHOLD,
};
use crate::export::{write_depth_png, write_ply};
use crate::train::{
    checkpoint_config, deterministic, load_checkpoint, train_run, PhaseSelect,
};
use crate::{NumericFailure, UsageError};

#[derive(Debug, Parser)]
#[command(
    name = "pcgen",
    about = "Single-image point cloud reconstruction: synthetic data, training, evaluation, export",
    version
)]
pub struct Cli {
    /// Root seed for every random draw the subcommand makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Data-loading threads. Computation itself stays serial;
    /// PCGEN_DETERMINISTIC=1 forces 1.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of shaded shapes with ground-truth views
    /// and clouds.
    Synth {
        /// Objects to generate; 0 writes a valid empty manifest.
        #[arg(long)]
        count: usize,
        /// Comma-separated shape kinds, or "all".
        #[arg(long, default_value = "all")]
        kinds: String,
        /// Dataset root to create.
        #[arg(long)]
        out: PathBuf,
        /// Model preset whose image and view sizes the data must match.
        #[arg(long, value_parser = ["desk", "full"], default_value = "desk")]
        preset: String,
        /// Ground-truth cloud size per object.
        #[arg(long, default_value_t = DEFAULT_CLOUD_POINTS)]
        cloud_points: usize,
    },
    /// Train the structure generator on a dataset.
    Train {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Which phase to run; 2 requires --resume.
        #[arg(long, value_parser = ["1", "2", "both"], default_value = "both")]
        phase: String,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split and write the CSV report.
    Eval {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to score.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split to score.
        #[arg(long, value_parser = ["train", "val", "test"], default_value = "test")]
        split: String,
    },
    /// Reconstruct one object into a PLY cloud plus per-view depth PNGs.
    Render {
        /// Checkpoint directory holding the model.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input photo (PNG); resized to the model's input size.
        #[arg(long, conflicts_with = "object_id")]
        input_image: Option<PathBuf>,
        /// Dataset object to reconstruct instead of a photo.
        #[arg(long)]
        object_id: Option<String>,
        /// Dataset root for --object-id; defaults to the checkpoint's.
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks for every differentiable op and the
    /// end-to-end model.
    Gradcheck {
        /// Model preset for the end-to-end row.
        #[arg(long, value_parser = ["desk"], default_value = "desk")]
        preset: String,
        /// Comma-separated op names, or "all".
        #[arg(long, default_value = "all")]
        ops: String,
        /// Add a deliberately wrong gradient that must be caught.
        #[arg(long)]
        corrupt: bool,
        /// Directory for the result JSON; stdout only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Maps an error chain to the documented exit codes: numeric failures and
/// non-finite values 3, usage and config rejections 1, everything else 2.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<NumericFailure>().is_some() {
        return 3;
    }
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if let Some(core) = err.downcast_ref::<pcgen_core::Error>() {
        return match core {
            pcgen_core::Error::NonFinite { .. } => 3,
            pcgen_core::Error::Config { .. } => 1,
            _ => 2,
        };
    }
    2
}

fn usage(message: String) -> anyhow::Error {
    anyhow::Error::new(UsageError(message))
}

fn numeric(message: String) -> anyhow::Error {
    anyhow::Error::new(NumericFailure(message))
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(usage("--jobs must be at least 1".into()));
    }
    let jobs = if deterministic() { 1 } else { cli.jobs };
    match cli.command {
        Command::Synth {
            count,
            kinds,
            out,
            preset,
            cloud_points,
        } => cmd_synth(
            count,
            &kinds,
            cli.seed.unwrap_or(7),
            &out,
            &preset,
            cloud_points,
        ),
        Command::Train {
            config,
            phase,
            resume,
        } => cmd_train(&config, &phase, resume.as_deref(), cli.seed, jobs),
        Command::Eval {
            config,
            checkpoint,
            split,
        } => cmd_eval(&config, &checkpoint, &split, cli.seed, jobs),
        Command::Render {
            checkpoint,
            input_image,
            object_id,
            data_root,
            out,
        } => cmd_render(
            &checkpoint,
            input_image.as_deref(),
            object_id.as_deref(),
            data_root.as_deref(),
            &out,
        ),
        Command::Gradcheck {
            preset,
            ops,
            corrupt,
            out,
        } => cmd_gradcheck(&preset, &ops, corrupt, cli.seed.unwrap_or(7), out.as_deref()),
    }
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn check_image_sizes(data_image: usize, model: &ModelConfig) -> Result<()> {
    if data_image != model.image_in {
        anyhow::bail!(
            "dataset images are {data_image}x{data_image} but the preset expects {}x{}; \
             regenerate the data with the matching --preset",
            model.image_in,
            model.image_in
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- synth

pub fn parse_kinds(list: &str) -> Result<Vec<SynthKind>> {
    if list == "all" {
        return Ok(SynthKind::ALL.to_vec());
    }
    let mut kinds = Vec::new();
    for name in list.split(',') {
        let name = name.trim();
        let kind = SynthKind::parse(name).map_err(|_| {
            usage(format!(
                "unknown shape kind '{name}'; available: {}, or all",
                SynthKind::ALL.map(|k| k.name()).join(", ")
            ))
        })?;
        if !kinds.contains(&kind) {
            kinds.push(kind);
        }
    }
    Ok(kinds)
}

#[derive(Serialize)]
struct SynthEcho<'a> {
    command: &'a str,
    count: usize,
    kinds: Vec<&'static str>,
    seed: u64,
    preset: &'a str,
    image_size: usize,
    view_size: usize,
    cloud_points: usize,
}

fn cmd_synth(
    count: usize,
    kinds: &str,
    seed: u64,
    out: &Path,
    preset: &str,
    cloud_points: usize,
) -> Result<()> {
    let kinds = parse_kinds(kinds)?;
    if cloud_points == 0 {
        return Err(usage("--cloud-points must be at least 1".into()));
    }
    let model = match preset {
        "full" => ModelConfig::full(),
        _ => ModelConfig::desk(),
    };
    let mut geom = DatasetGeometry::from_model(&model);
    geom.cloud_points = cloud_points;
    if count == 0 {
        eprintln!("warning: --count 0 writes an empty dataset");
    }

    let manifest = synth_dataset(out, count, &kinds, seed, &geom)?;

    let echo = SynthEcho {
        command: "synth",
        count,
        kinds: kinds.iter().map(|k| k.name()).collect(),
        seed,
        preset,
        image_size: geom.image_size,
        view_size: geom.view_size,
        cloud_points: geom.cloud_points,
    };
    fs::write(
        out.join("synth.resolved.json"),
        serde_json::to_string_pretty(&echo)?,
    )?;

    let mut by_kind: Vec<(String, usize)> = Vec::new();
    for obj in &manifest.objects {
        match by_kind.iter_mut().find(|(k, _)| *k == obj.category) {
            Some((_, n)) => *n += 1,
            None => by_kind.push((obj.category.clone(), 1)),
        }
    }
    let breakdown = if by_kind.is_empty() {
        "empty".to_string()
    } else {
        by_kind
            .iter()
            .map(|(k, n)| format!("{k} x{n}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    println!(
        "dataset at {}: {} objects ({breakdown}), images {}x{}, 8 views of {}x{}, clouds of {} points",
        out.display(),
        manifest.objects.len(),
        geom.image_size,
        geom.image_size,
        geom.view_size,
        geom.view_size,
        geom.cloud_points,
    );
    Ok(())
}

// ---------------------------------------------------------------- train

fn cmd_train(
    config: &Path,
    phase: &str,
    resume: Option<&Path>,
    seed_override: Option<u64>,
    jobs: usize,
) -> Result<()> {
    let cfg = load_config(config, seed_override)?;
    let select = PhaseSelect::parse(phase).map_err(|e| usage(format!("{e:#}")))?;
    if matches!(select, PhaseSelect::Two) && resume.is_none() {
        return Err(usage(
            "--phase 2 needs a phase-1 checkpoint: pass --resume <checkpoint dir>".into(),
        ));
    }

    let data = load_dataset(&cfg.data_root, cfg.seed)?;
    let model_cfg = cfg.model_config().map_err(|e| usage(format!("{e:#}")))?;
    check_image_sizes(data.geometry().image_size, &model_cfg)?;

    fs::create_dir_all(&cfg.out_dir)?;
    cfg.echo_into(&cfg.out_dir)?;
    let mut model = StructureModel::new(model_cfg, cfg.seed).map_err(anyhow::Error::from)?;
    println!(
        "training {} parameters on {} objects (seed {})",
        model.count_params(false),
        data.len(),
        cfg.seed
    );

    let outcomes = train_run(&mut model, &data, &cfg, &cfg.out_dir, select, resume, jobs)?;
    for o in &outcomes {
        println!(
            "phase {}: {} steps, loss {:.6} -> {:.6}",
            o.phase, o.steps, o.first_loss, o.final_loss
        );
        println!("  last checkpoint: {}", o.last_checkpoint.display());
        if let Some(best) = &o.best_checkpoint {
            println!("  best checkpoint: {}", best.display());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    split: &str,
    seed_override: Option<u64>,
    jobs: usize,
) -> Result<()> {
    let cfg = load_config(config, seed_override)?;
    let split = Split::parse(split).map_err(|e| usage(format!("{e:#}")))?;

    let data = load_dataset(&cfg.data_root, cfg.seed)?;
    let model_cfg = cfg.model_config().map_err(|e| usage(format!("{e:#}")))?;
    check_image_sizes(data.geometry().image_size, &model_cfg)?;
    let mut model = StructureModel::new(model_cfg, cfg.seed).map_err(anyhow::Error::from)?;
    let info = load_checkpoint(checkpoint, &mut model, None)?;

    let indices = data.indices(split);
    if indices.is_empty() {
        anyhow::bail!("split '{}' is empty for this dataset", split.name());
    }
    let samples = data.load_samples(indices, jobs)?;
    let refs: Vec<&crate::dataset::Sample> = samples.iter().collect();

    let model_summary = evaluate_samples(&model, &refs)?;
    let gt_summary = evaluate_gt_views(&refs)?;

    println!(
        "== model (phase {} checkpoint, split {}) ==",
        info.phase,
        split.name()
    );
    print!("{}", format_table(&model_summary));
    println!("== gt-views fixture (quantization floor) ==");
    print!("{}", format_table(&gt_summary));

    fs::create_dir_all(&cfg.out_dir)?;
    cfg.echo_into(&cfg.out_dir)?;
    let phase = info.phase.to_string();
    let rows = vec![
        summary_row("model", &phase, &model_summary),
        summary_row("gt-views", &phase, &gt_summary),
    ];
    let csv_path = cfg.out_dir.join(format!("report-{}.csv", split.name()));
    write_report(&csv_path, &rows)?;
    crate::evaluate::parse_report(&fs::read_to_string(&csv_path)?)
        .context("emitted CSV failed to parse back")?;
    println!("report written to {}", csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------- render

#[derive(Serialize)]
struct RenderEcho<'a> {
    command: &'a str,
    checkpoint: String,
    input_image: Option<String>,
    object_id: Option<&'a str>,
    data_root: Option<String>,
    points: usize,
}

fn load_photo(path: &Path, image_in: usize) -> Result<Vec<f32>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let img = img.resize_exact(
        image_in as u32,
        image_in as u32,
        image::imageops::FilterType::Triangle,
    );
    let rgb = img.to_rgb32f();
    let plane = image_in * image_in;
    let mut chw = vec![0.0f32; 3 * plane];
    for (y, x_, pixel) in rgb
        .enumerate_pixels()
        .map(|(x, y, p)| (y as usize, x as usize, p))
    {
        for c in 0..3 {
            chw[c * plane + y * image_in + x_] = pixel.0[c].clamp(0.0, 1.0);
        }
    }
    Ok(chw)
}

fn cmd_render(
    checkpoint: &Path,
    input_image: Option<&Path>,
    object_id: Option<&str>,
    data_root: Option<&Path>,
    out: &Path,
) -> Result<()> {
    if input_image.is_none() && object_id.is_none() {
        return Err(usage(
            "pass exactly one of --input-image <png> or --object-id <id>".into(),
        ));
    }

    let cfg = checkpoint_config(checkpoint)?;
    let model_cfg = cfg.model_config().map_err(|e| usage(format!("{e:#}")))?;
    let mut model = StructureModel::new(model_cfg, cfg.seed).map_err(anyhow::Error::from)?;
    load_checkpoint(checkpoint, &mut model, None)?;

    let rgb = match (input_image, object_id) {
        (Some(path), None) => load_photo(path, model.cfg.image_in)?,
        (None, Some(id)) => {
            let root = data_root.unwrap_or(&cfg.data_root);
            let data = load_dataset(root, cfg.seed)?;
            check_image_sizes(data.geometry().image_size, &model.cfg)?;
            let index = data
                .find(id)
                .with_context(|| format!("object '{id}' is not in {}", root.display()))?;
            data.load_sample(index)?.rgb
        }
        _ => unreachable!("clap rejects the combination"),
    };

    let views = prediction_views(&model, &rgb)?;
    let rig = crate::dataset::fixed_rig(model.cfg.out_size)?;
    let cloud = backproject(&views, &rig.fixed_views, MASK_THRESHOLD).map_err(anyhow::Error::from)?;
    let counted =
        count_generated_points(&views, MASK_THRESHOLD).map_err(anyhow::Error::from)?;
    if counted != cloud.len() {
        anyhow::bail!(
            "internal mismatch: {} counted vs {} backprojected points",
            counted,
            cloud.len()
        );
    }

    fs::create_dir_all(out)?;
    let ply_path = out.join("cloud.ply");
    write_ply(&ply_path, &cloud)?;
    let z_bg = rig.camera.radius + 1.0;
    for (k, view) in views.iter().enumerate() {
        write_depth_png(
            &out.join(format!("view{k}.png")),
            &out.join(format!("view{k}.json")),
            view,
            z_bg,
        )?;
    }
    let echo = RenderEcho {
        command: "render",
        checkpoint: checkpoint.display().to_string(),
        input_image: input_image.map(|p| p.display().to_string()),
        object_id,
        data_root: data_root.map(|p| p.display().to_string()),
        points: cloud.len(),
    };
    fs::write(
        out.join("render.resolved.json"),
        serde_json::to_string_pretty(&echo)?,
    )?;

    println!(
        "wrote {} points to {} plus {} depth previews",
        cloud.len(),
        ply_path.display(),
        views.len()
    );
    if cloud.is_empty() {
        eprintln!("warning: the model lit no pixels; the PLY has 0 vertices");
        return Err(numeric("prediction produced an empty point cloud".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

/// One finite-difference row: its tolerance and a runner keyed on the seed.
pub struct OpCheck {
    pub name: &'static str,
    pub tol: f32,
    check: Box<dyn Fn(u64) -> CoreResult<f32>>,
}

impl OpCheck {
    pub fn run(&self, seed: u64) -> CoreResult<f32> {
        (self.check)(seed)
    }
}

fn op(name: &'static str, tol: f32, check: impl Fn(u64) -> CoreResult<f32> + 'static) -> OpCheck {
    OpCheck {
        name,
        tol,
        check: Box::new(check),
    }
}

fn rand_vec(rng: &mut Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

/// Slices `len(shape)` entries out of a flat leaf starting at `start` and
/// reshapes them, so one FD pass covers every differentiable input of an op.
fn part(tape: &Tape, leaf: &Tensor, start: usize, shape: &[usize]) -> CoreResult<Tensor> {
    let len: usize = shape.iter().product();
    tape.reshape(&tape.slice(leaf, 0, start, len)?, shape)
}

/// Weighted sum with fixed weights; keeps the scalar sensitive to element
/// order, which a plain sum would hide.
fn weigh(tape: &Tape, t: &Tensor, weights: &[f32]) -> CoreResult<Tensor> {
    let w = tape.leaf(t.shape(), weights.to_vec(), false)?;
    tape.sum_all(&tape.mul(t, &w)?)
}

const EPS: f32 = 1e-2;
const OP_TOL: f32 = 1e-3;
const E2E_TOL: f32 = 1e-2;

/// Identity-rotation camera 4 units out along +z with pixel-center-aligned
/// points on the z = -0.5 plane, so an FD step of 5e-3 moves no projection
/// across a pixel boundary and the rasterized winner set stays fixed.
fn render_fixture() -> (Pose, Vec<f32>, RenderConfig) {
    let pose = Pose {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0, 0.0, 4.0],
        focal: 64.0,
        cx: 16.0,
        cy: 16.0,
    };
    let pixels = [(4usize, 7usize), (10, 20), (16, 8), (25, 25), (7, 13), (20, 3)];
    let z = -0.5f32;
    let zc = 4.0 + z;
    let mut points = Vec::with_capacity(pixels.len() * 3);
    for (v, u) in pixels {
        points.push((u as f32 + 0.5 - 16.0) / 64.0 * zc);
        points.push((v as f32 + 0.5 - 16.0) / 64.0 * zc);
        points.push(z);
    }
    let cfg = RenderConfig::new(32, 32, 1, 5.0).expect("static fixture");
    (pose, points, cfg)
}

fn unary_op(
    name: &'static str,
    apply: impl Fn(&Tape, &Tensor) -> CoreResult<Tensor> + Copy + 'static,
    lo: f32,
    hi: f32,
    kink_margin: Option<f32>,
) -> OpCheck {
    op(name, OP_TOL, move |seed| {
        let mut rng = Rng::derive(seed, name);
        let mut data = rand_vec(&mut rng, 12, lo, hi);
        if let Some(margin) = kink_margin {
            resample_away_from_zero(&mut rng, &mut data, lo, hi, margin);
        }
        let w = rand_vec(&mut rng, 12, 0.5, 1.5);
        let x = Tensor::from_vec(&[12], data)?;
        finite_difference_check(
            &|tape: &Tape, leaf: &Tensor| weigh(tape, &apply(tape, leaf)?, &w),
            &x,
            EPS,
        )
    })
}

fn binary_op(
    name: &'static str,
    apply: impl Fn(&Tape, &Tensor, &Tensor) -> CoreResult<Tensor> + Copy + 'static,
) -> OpCheck {
    op(name, OP_TOL, move |seed| {
        let mut rng = Rng::derive(seed, name);
        let data = rand_vec(&mut rng, 24, -1.0, 1.0);
        let w = rand_vec(&mut rng, 12, 0.5, 1.5);
        let x = Tensor::from_vec(&[24], data)?;
        finite_difference_check(
            &|tape: &Tape, leaf: &Tensor| {
                let a = part(tape, leaf, 0, &[3, 4])?;
                let b = part(tape, leaf, 12, &[3, 4])?;
                weigh(tape, &apply(tape, &a, &b)?, &w)
            },
            &x,
            EPS,
        )
    })
}

/// Every differentiable operation plus the end-to-end model, each checked
/// against central differences.
pub fn op_registry() -> Vec<OpCheck> {
    let mut ops = vec![
        binary_op("add", |t, a, b| t.add(a, b)),
        binary_op("sub", |t, a, b| t.sub(a, b)),
        binary_op("mul", |t, a, b| t.mul(a, b)),
        unary_op("neg", |t, x| t.neg(x), -1.0, 1.0, None),
        unary_op("scale", |t, x| t.scale(x, 1.7), -1.0, 1.0, None),
        unary_op("add_scalar", |t, x| t.add_scalar(x, 0.3), -1.0, 1.0, None),
        unary_op("abs", |t, x| t.abs(x), -1.0, 1.0, Some(2.5e-2)),
        unary_op("relu", |t, x| t.relu(x), -1.0, 1.0, Some(2.5e-2)),
        unary_op("gelu", |t, x| t.gelu(x), -2.0, 2.0, None),
        unary_op("sigmoid", |t, x| t.sigmoid(x), -2.0, 2.0, None),
        unary_op("softplus", |t, x| t.softplus(x), -2.0, 2.0, None),
        op("sum_all", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "sum_all");
            let x = Tensor::from_vec(&[9], rand_vec(&mut rng, 9, -1.0, 1.0))?;
            finite_difference_check(&|tape: &Tape, leaf: &Tensor| tape.sum_all(leaf), &x, EPS)
        }),
        op("mean_all", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "mean_all");
            let x = Tensor::from_vec(&[9], rand_vec(&mut rng, 9, -1.0, 1.0))?;
            finite_difference_check(&|tape: &Tape, leaf: &Tensor| tape.mean_all(leaf), &x, EPS)
        }),
        op("add_bias", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "add_bias");
            let data = rand_vec(&mut rng, 16, -1.0, 1.0);
            let w = rand_vec(&mut rng, 12, 0.5, 1.5);
            let x = Tensor::from_vec(&[16], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| {
                    let a = part(tape, leaf, 0, &[3, 4])?;
                    let b = part(tape, leaf, 12, &[4])?;
                    weigh(tape, &tape.add_bias(&a, &b)?, &w)
                },
                &x,
                EPS,
            )
        }),
        unary_op(
            "reshape",
            |t, x| {
                let m = t.reshape(x, &[3, 4])?;
                t.reshape(&m, &[12])
            },
            -1.0,
            1.0,
            None,
        ),
        op("permute", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "permute");
            let data = rand_vec(&mut rng, 12, -1.0, 1.0);
            let w = rand_vec(&mut rng, 12, 0.5, 1.5);
            let x = Tensor::from_vec(&[3, 4], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| weigh(tape, &tape.permute(leaf, &[1, 0])?, &w),
                &x,
                EPS,
            )
        }),
        op("slice", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "slice");
            let data = rand_vec(&mut rng, 12, -1.0, 1.0);
            let w = rand_vec(&mut rng, 6, 0.5, 1.5);
            let x = Tensor::from_vec(&[4, 3], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| weigh(tape, &tape.slice(leaf, 0, 1, 2)?, &w),
                &x,
                EPS,
            )
        }),
        op("concat", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "concat");
            let data = rand_vec(&mut rng, 18, -1.0, 1.0);
            let w = rand_vec(&mut rng, 18, 0.5, 1.5);
            let x = Tensor::from_vec(&[18], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| {
                    let a = part(tape, leaf, 0, &[2, 3])?;
                    let b = part(tape, leaf, 6, &[4, 3])?;
                    weigh(tape, &tape.concat(&[&a, &b], 0)?, &w)
                },
                &x,
                EPS,
            )
        }),
        op("matmul", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "matmul");
            let data = rand_vec(&mut rng, 20, -1.0, 1.0);
            let w = rand_vec(&mut rng, 6, 0.5, 1.5);
            let x = Tensor::from_vec(&[20], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| {
                    let a = part(tape, leaf, 0, &[3, 4])?;
                    let b = part(tape, leaf, 12, &[4, 2])?;
                    weigh(tape, &tape.matmul(&a, &b)?, &w)
                },
                &x,
                EPS,
            )
        }),
        op("linear", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "linear");
            let data = rand_vec(&mut rng, 22, -1.0, 1.0);
            let w = rand_vec(&mut rng, 8, 0.5, 1.5);
            let x = Tensor::from_vec(&[22], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| {
                    let xin = part(tape, leaf, 0, &[2, 3])?;
                    let wt = part(tape, leaf, 6, &[3, 4])?;
                    let b = part(tape, leaf, 18, &[4])?;
                    weigh(tape, &tape.linear(&xin, &wt, &b)?, &w)
                },
                &x,
                EPS,
            )
        }),
        op("conv2d", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "conv2d");
            let data = rand_vec(&mut rng, 89, -1.0, 1.0);
            let w = rand_vec(&mut rng, 48, 0.5, 1.5);
            let x = Tensor::from_vec(&[89], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| {
                    let xin = part(tape, leaf, 0, &[1, 2, 4, 4])?;
                    let kernel = part(tape, leaf, 32, &[3, 2, 3, 3])?;
                    let bias = part(tape, leaf, 86, &[3])?;
                    weigh(tape, &tape.conv2d(&xin, &kernel, Some(&bias), 1, 1)?, &w)
                },
                &x,
                // linear per coordinate, so a big step has zero truncation
                // error and drowns out the f32 output rounding
                2.5e-1,
            )
        }),
        op("conv_transpose2d", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "conv_transpose2d");
            let data = rand_vec(&mut rng, 83, -1.0, 1.0);
            let w = rand_vec(&mut rng, 50, 0.5, 1.5);
            let x = Tensor::from_vec(&[83], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| {
                    let xin = part(tape, leaf, 0, &[1, 3, 3, 3])?;
                    let kernel = part(tape, leaf, 27, &[3, 2, 3, 3])?;
                    let bias = part(tape, leaf, 81, &[2])?;
                    weigh(
                        tape,
                        &tape.conv_transpose2d(&xin, &kernel, Some(&bias), 2, 1)?,
                        &w,
                    )
                },
                &x,
                2.5e-1,
            )
        }),
        op("pixel_shuffle", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "pixel_shuffle");
            let data = rand_vec(&mut rng, 32, -1.0, 1.0);
            let w = rand_vec(&mut rng, 32, 0.5, 1.5);
            let x = Tensor::from_vec(&[1, 8, 2, 2], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| weigh(tape, &tape.pixel_shuffle(leaf, 2)?, &w),
                &x,
                EPS,
            )
        }),
        op("pixel_unshuffle", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "pixel_unshuffle");
            let data = rand_vec(&mut rng, 32, -1.0, 1.0);
            let w = rand_vec(&mut rng, 32, 0.5, 1.5);
            let x = Tensor::from_vec(&[1, 2, 4, 4], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| weigh(tape, &tape.pixel_unshuffle(leaf, 2)?, &w),
                &x,
                EPS,
            )
        }),
        // softmax gradients span orders of magnitude, so some coordinates sit
        // at the rel floor where f32 noise dominates; the steps are sized so
        // that noise clears the floor with margin
        op("softmax", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "softmax");
            let data = rand_vec(&mut rng, 15, -2.0, 2.0);
            let w = rand_vec(&mut rng, 15, 0.5, 1.5);
            let x = Tensor::from_vec(&[3, 5], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| weigh(tape, &tape.softmax(leaf, 1)?, &w),
                &x,
                3e-2,
            )
        }),
        op("softmax_causal", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "softmax_causal");
            let data = rand_vec(&mut rng, 16, -2.0, 2.0);
            let w = rand_vec(&mut rng, 16, 0.5, 1.5);
            let x = Tensor::from_vec(&[4, 4], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| weigh(tape, &tape.softmax_causal(leaf)?, &w),
                &x,
                5e-2,
            )
        }),
        op("layer_norm", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "layer_norm");
            // a ramp keeps every row's variance away from zero; a clustered
            // draw would shrink the row std and blow up the curvature
            let mut data = rand_vec(&mut rng, 18, -1.0, 1.0);
            for (i, v) in data.iter_mut().enumerate() {
                *v += (i % 6) as f32 - 2.5;
            }
            data.extend(rand_vec(&mut rng, 6, 0.5, 1.5));
            data.extend(rand_vec(&mut rng, 6, -0.5, 0.5));
            let w = rand_vec(&mut rng, 18, 0.5, 1.5);
            let x = Tensor::from_vec(&[30], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| {
                    let xin = part(tape, leaf, 0, &[3, 6])?;
                    let gamma = part(tape, leaf, 18, &[6])?;
                    let beta = part(tape, leaf, 24, &[6])?;
                    weigh(tape, &tape.layer_norm(&xin, &gamma, &beta, 1, 1e-5)?, &w)
                },
                &x,
                2e-2,
            )
        }),
        op("batch_norm", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "batch_norm");
            let mut data = rand_vec(&mut rng, 18, -2.0, 2.0);
            data.extend(rand_vec(&mut rng, 2, 0.5, 1.5));
            data.extend(rand_vec(&mut rng, 2, -0.5, 0.5));
            let w = rand_vec(&mut rng, 18, 0.5, 1.5);
            let x = Tensor::from_vec(&[22], data)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| {
                    let xin = part(tape, leaf, 0, &[2, 3, 3])?;
                    let gamma = part(tape, leaf, 18, &[2])?;
                    let beta = part(tape, leaf, 20, &[2])?;
                    let mut state = BatchNormState::new(2);
                    weigh(
                        tape,
                        &tape.batch_norm(&xin, &gamma, &beta, &mut state, true, 0.1, 1e-5)?,
                        &w,
                    )
                },
                &x,
                // the x spread sets the batch std, and curvature scales with step/std;
                // a wide spread plus a mid-size step beats both truncation and f32 noise
                3e-2,
            )
        }),
        op("attention", OP_TOL, |seed| check_attention(seed, false)),
        op("attention_causal", OP_TOL, |seed| check_attention(seed, true)),
        op("pseudo_render", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "pseudo_render");
            let (pose, points, cfg) = render_fixture();
            let w = rand_vec(&mut rng, cfg.height * cfg.width, 0.5, 1.5);
            let x = Tensor::from_vec(&[points.len() / 3, 3], points)?;
            finite_difference_check(
                &|tape: &Tape, leaf: &Tensor| {
                    let rendered = pseudo_render_tape(tape, leaf, &pose, &cfg)?;
                    // the unlit background is a large constant; left in, it
                    // costs the f32 loss scalar the mantissa bits the FD
                    // signal lives in
                    let centered = tape.add_scalar(&rendered.depth, -cfg.z_bg)?;
                    weigh(tape, &centered, &w)
                },
                &x,
                5e-3,
            )
        }),
        op("backproject", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "backproject");
            let pose = Pose {
                rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                translation: [0.0, 0.0, 4.0],
                focal: 8.0,
                cx: 2.0,
                cy: 2.0,
            };
            let selected: Vec<(usize, usize)> =
                (0..4).flat_map(|r| (0..4).map(move |c| (r, c))).collect();
            let data = rand_vec(&mut rng, 16, 3.2, 3.8);
            let w = rand_vec(&mut rng, 48, 0.5, 1.5);
            let x = Tensor::from_vec(&[4, 4], data)?;
            finite_difference_check(
                &move |tape: &Tape, leaf: &Tensor| {
                    weigh(tape, &backproject_tape(tape, leaf, &selected, &pose)?, &w)
                },
                &x,
                5e-3,
            )
        }),
        op("mask_bce", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "mask_bce");
            let data = rand_vec(&mut rng, 10, -2.0, 2.0);
            let gt: Vec<f32> = (0..10)
                .map(|_| if rng.uniform(0.0, 1.0) < 0.5 { 0.0 } else { 1.0 })
                .collect();
            let x = Tensor::from_vec(&[10], data)?;
            finite_difference_check(
                &move |tape: &Tape, leaf: &Tensor| mask_bce(tape, leaf, &gt),
                &x,
                EPS,
            )
        }),
        op("depth_l1", OP_TOL, |seed| {
            let mut rng = Rng::derive(seed, "depth_l1");
            let gt = rand_vec(&mut rng, 9, 3.0, 4.0);
            // residuals at least 0.1 so the |.| kink stays out of FD reach
            let pred: Vec<f32> = gt
                .iter()
                .map(|&g| {
                    let delta = rng.uniform(0.1, 0.3);
                    if rng.uniform(0.0, 1.0) < 0.5 {
                        g - delta
                    } else {
                        g + delta
                    }
                })
                .collect();
            let mask = vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
            let x = Tensor::from_vec(&[3, 3], pred)?;
            finite_difference_check(
                &move |tape: &Tape, leaf: &Tensor| depth_l1(tape, leaf, &gt, &mask),
                &x,
                EPS,
            )
        }),
        op("joint_2d_loss", OP_TOL, |seed| {
            let _ = seed;
            let (pose, points, cfg) = render_fixture();
            // ground truth sits 0.05 closer so depth residuals keep their sign
            let gt_points: Vec<[f32; 3]> = points
                .chunks_exact(3)
                .map(|p| [p[0], p[1], p[2] - 0.05])
                .collect();
            let gt_cloud = PointCloud { points: gt_points };
            let gt_views = [brute_force_render(&gt_cloud, &pose, &cfg)?.view];
            let poses = [pose];
            let x = Tensor::from_vec(&[points.len() / 3, 3], points)?;
            finite_difference_check(
                &move |tape: &Tape, leaf: &Tensor| {
                    let breakdown = joint_2d_loss(tape, leaf, &gt_views, &poses, &cfg, 1.0)?;
                    Ok(breakdown.total)
                },
                &x,
                5e-3,
            )
        }),
    ];
    ops.push(op("e2e", E2E_TOL, check_e2e));
    ops
}

fn check_attention(seed: u64, causal: bool) -> CoreResult<f32> {
    let mut rng = Rng::derive(seed, if causal { "attention_causal" } else { "attention" });
    let mut data = rand_vec(&mut rng, 32, -1.0, 1.0);
    data.extend(rand_vec(&mut rng, 16, -1.5, 1.5));
    data.extend(rand_vec(&mut rng, 72, -1.0, 1.0));
    let w = rand_vec(&mut rng, 16, 1.0, 2.0);
    let x = Tensor::from_vec(&[120], data)?;
    finite_difference_check_masked(
        &move |tape: &Tape, leaf: &Tensor| {
            let q = part(tape, leaf, 0, &[2, 8])?;
            let k = part(tape, leaf, 16, &[2, 8])?;
            let v = part(tape, leaf, 32, &[2, 8])?;
            let w_o = part(tape, leaf, 48, &[8, 8])?;
            let b_o = part(tape, leaf, 112, &[8])?;
            weigh(
                tape,
                &multi_head_attention(tape, &q, &k, &v, &w_o, &b_o, 2, causal)?,
                &w,
            )
        },
        &x,
        // noise-limited composite, so the step is large; a causal first row
        // attends through a one-entry softmax whose gradient is exactly zero,
        // and probing it would only read f32 noise against the rel floor
        5e-2,
        &|i| !(causal && i < 8),
    )
}

/// Central differences through the whole desk model, sampled at three
/// coordinates of one parameter per stage (patch embed, encoder, reducer,
/// decoder, head).
fn check_e2e(seed: u64) -> CoreResult<f32> {
    let cfg = ModelConfig::desk();
    let model = StructureModel::new(cfg, seed)?;
    let mut rng = Rng::derive(seed, "gradcheck-e2e");
    let image = rand_vec(&mut rng, 3 * cfg.image_in * cfg.image_in, 0.0, 1.0);

    let mut worst = 0.0f32;
    for prefix in ["patch_embed.", "encoder.0.", "reduce.", "decoder.", "head."] {
        let name = model
            .params
            .names()
            .find(|n| n.starts_with(prefix))
            .cloned()
            .ok_or_else(|| {
                pcgen_core::Error::invalid("gradcheck", "a model stage has no parameters")
            })?;
        let entry = model.params.get(&name)?;
        let x = Tensor::from_vec(&entry.shape.clone(), entry.data.clone())?;
        let picks = [0usize, x.numel() / 2, x.numel() - 1];
        let f = |tape: &Tape, leaf: &Tensor| -> CoreResult<Tensor> {
            let fwd = Forward::new(tape, &model.params, false);
            fwd.bind(&name, leaf.clone());
            let views = model.forward_views(&fwd, &image)?;
            // per-view means keep the scalar small; a plain sum over all
            // pixels is so large that its f32 ulp swamps the FD signal
            let mut total: Option<Tensor> = None;
            for view in &views {
                let s = tape.mean_all(view)?;
                total = Some(match total {
                    None => s,
                    Some(acc) => tape.add(&acc, &s)?,
                });
            }
            Ok(total.expect("the model emits at least one view"))
        };
        let rel = finite_difference_check_masked(&f, &x, 2e-2, &|i| picks.contains(&i))?;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// The corrupt probe: forward x^2 with a backward that deliberately reports
/// dy/dx = 1. The checker must flag it.
pub fn corrupt_check(seed: u64) -> CoreResult<f32> {
    let mut rng = Rng::derive(seed, "gradcheck-corrupt");
    let x = Tensor::from_vec(&[6], rand_vec(&mut rng, 6, 0.5, 1.5))?;
    finite_difference_check(
        &|tape: &Tape, leaf: &Tensor| {
            let y = tape.push_op(
                "corrupt_probe",
                &[leaf],
                leaf.shape().to_vec(),
                leaf.data().iter().map(|&v| v * v).collect(),
                Box::new(|g, want| vec![want[0].then(|| g.to_vec())]),
            )?;
            tape.sum_all(&y)
        },
        &x,
        EPS,
    )
}

#[derive(Serialize)]
struct GradcheckRow {
    op: String,
    rel_err: f32,
    tol: f32,
    pass: bool,
}

#[derive(Serialize)]
struct GradcheckEcho<'a> {
    command: &'a str,
    preset: &'a str,
    ops: &'a str,
    corrupt: bool,
    seed: u64,
    rows: Vec<GradcheckRow>,
}

fn cmd_gradcheck(
    preset: &str,
    ops: &str,
    corrupt: bool,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let registry = op_registry();
    let selected: Vec<&OpCheck> = if ops == "all" {
        registry.iter().collect()
    } else {
        let mut picked = Vec::new();
        for name in ops.split(',') {
            let name = name.trim();
            let check = registry.iter().find(|c| c.name == name).ok_or_else(|| {
                usage(format!(
                    "unknown op '{name}'; available: {}",
                    registry
                        .iter()
                        .map(|c| c.name)
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })?;
            picked.push(check);
        }
        picked
    };

    let mut rows = Vec::new();
    println!("{:<20} {:>12} {:>10}  status", "op", "rel_err", "tol");
    for check in &selected {
        let rel = check.run(seed).map_err(anyhow::Error::from)?;
        let pass = rel < check.tol;
        println!(
            "{:<20} {:>12.3e} {:>10.0e}  {}",
            check.name,
            rel,
            check.tol,
            if pass { "pass" } else { "FAIL" }
        );
        rows.push(GradcheckRow {
            op: check.name.to_string(),
            rel_err: rel,
            tol: check.tol,
            pass,
        });
    }
    if corrupt {
        let rel = corrupt_check(seed).map_err(anyhow::Error::from)?;
        let pass = rel < OP_TOL;
        println!(
            "{:<20} {:>12.3e} {:>10.0e}  {}",
            "corrupt-probe",
            rel,
            OP_TOL,
            if pass { "pass" } else { "FAIL" }
        );
        rows.push(GradcheckRow {
            op: "corrupt-probe".to_string(),
            rel_err: rel,
            tol: OP_TOL,
            pass,
        });
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let echo = GradcheckEcho {
            command: "gradcheck",
            preset,
            ops,
            corrupt,
            seed,
            rows,
        };
        fs::write(
            dir.join("gradcheck.resolved.json"),
            serde_json::to_string_pretty(&echo)?,
        )?;
        return finish_gradcheck(&echo.rows);
    }
    finish_gradcheck(&rows)
}

fn finish_gradcheck(rows: &[GradcheckRow]) -> Result<()> {
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.op.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(numeric(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_its_finite_difference_tolerance() {
        for check in op_registry() {
            if check.name == "e2e" {
                continue; // exercised by the acceptance suite
            }
            let rel = check.run(11).unwrap();
            assert!(
                rel < check.tol,
                "{}: rel err {rel} over tol {}",
                check.name,
                check.tol
            );
        }
    }

    #[test]
    fn corrupt_probe_is_flagged() {
        let rel = corrupt_check(11).unwrap();
        assert!(rel > 0.1, "the lying backward must show up, got {rel}");
    }

    #[test]
    fn exit_codes_follow_the_error_class() {
        let numeric_err = anyhow::Error::new(NumericFailure("x".into()));
        assert_eq!(exit_code(&numeric_err), 3);
        let usage_err = usage("bad flag".into());
        assert_eq!(exit_code(&usage_err), 1);
        let nonfinite = anyhow::Error::new(pcgen_core::Error::non_finite("op"));
        assert_eq!(exit_code(&nonfinite), 3);
        let config = anyhow::Error::new(pcgen_core::Error::config("f", "bad".to_string()));
        assert_eq!(exit_code(&config), 1);
        let data = anyhow::anyhow!("missing manifest");
        assert_eq!(exit_code(&data), 2);
        let wrapped = numeric_err.context("while training");
        assert_eq!(exit_code(&wrapped), 3);
    }

    #[test]
    fn kind_lists_parse_and_reject() {
        assert_eq!(parse_kinds("all").unwrap().len(), 4);
        let two = parse_kinds("cube,sphere").unwrap();
        assert_eq!(two.len(), 2);
        let dup = parse_kinds("cube,cube").unwrap();
        assert_eq!(dup.len(), 1);
        let err = parse_kinds("cube,teapot").unwrap_err();
        assert_eq!(exit_code(&err), 1);
        assert!(err.to_string().contains("teapot"));
    }
}
