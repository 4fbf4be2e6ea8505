//! Synthetic object generation, on-disk dataset layout, and loading.
//!
//! Layout: `root/manifest.json` plus `root/<id>/{rgb,depth,mask,cloud}.tnsr`.
//! rgb is [3,I,I] in [0,1], depth and mask are [8,V,V], cloud is [N,3] with
//! every object normalized to a tight fit inside the unit cube at the origin.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pcgen_core::geometry::{
    make_fixed_views, CameraConfig, DepthMaskView, PointCloud, Pose, ViewpointSet,
};
use pcgen_core::model::ModelConfig;
use pcgen_core::render::{brute_force_render, RenderConfig};
use pcgen_core::rng::Rng;

use crate::config::PoseJson;
use crate::tnsr_io::{read_tnsr, read_tnsr_expect, write_tnsr};

pub const VIEW_COUNT: usize = 8;
pub const DEFAULT_CLOUD_POINTS: usize = 10_000;

/// Resolutions and cloud density used when generating or validating a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetGeometry {
    /// Side of the RGB input image.
    pub image_size: usize,
    /// Side of each ground-truth depth/mask view.
    pub view_size: usize,
    /// Surface samples per ground-truth cloud.
    pub cloud_points: usize,
}

impl DatasetGeometry {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        DatasetGeometry {
            image_size: cfg.image_in,
            view_size: cfg.out_size,
            cloud_points: DEFAULT_CLOUD_POINTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Cube,
    BoxStack,
    ChairProxy,
    Sphere,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::Cube,
        SynthKind::BoxStack,
        SynthKind::ChairProxy,
        SynthKind::Sphere,
    ];

    pub fn parse(name: &str) -> Result<SynthKind> {
        match name {
            "cube" => Ok(SynthKind::Cube),
            "box_stack" => Ok(SynthKind::BoxStack),
            "chair_proxy" => Ok(SynthKind::ChairProxy),
            "sphere" => Ok(SynthKind::Sphere),
            other => anyhow::bail!(
                "unknown shape kind '{other}', expected one of cube, box_stack, chair_proxy, sphere"
            ),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Cube => "cube",
            SynthKind::BoxStack => "box_stack",
            SynthKind::ChairProxy => "chair_proxy",
            SynthKind::Sphere => "sphere",
        }
    }
}

/// One training example: input image, fixed-view ground truth, dense cloud.
#[derive(Debug, Clone)]
pub struct Sample {
    pub object_id: String,
    pub category: String,
    /// [3, image_size, image_size], channel-major, values in [0,1].
    pub rgb: Vec<f32>,
    /// Eight views at the fixed poses, binary masks.
    pub gt_views_fixed: Vec<DepthMaskView>,
    pub gt_cloud: PointCloud,
}

fn box_area(half: &[f32; 3]) -> f32 {
    8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2])
}

/// Area-weighted uniform point on the surface of an axis-aligned box. The
/// coordinate along the chosen face's axis is exact, so a unit box yields
/// points with one coordinate at exactly ±half.
fn sample_box_point(rng: &mut Rng, center: &[f32; 3], half: &[f32; 3]) -> [f32; 3] {
    let w = [
        half[1] * half[2],
        half[1] * half[2],
        half[0] * half[2],
        half[0] * half[2],
        half[0] * half[1],
        half[0] * half[1],
    ];
    let total: f32 = w.iter().sum();
    let mut u = rng.uniform(0.0, total);
    let mut face = 5;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            face = i;
            break;
        }
        u -= *wi;
    }
    let axis = face / 2;
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    let mut p = [0.0f32; 3];
    for a in 0..3 {
        p[a] = if a == axis {
            sign * half[a] + center[a]
        } else {
            rng.uniform(-half[a], half[a]) + center[a]
        };
    }
    p
}

fn sample_sphere_point(rng: &mut Rng) -> [f32; 3] {
    let u = rng.uniform(-1.0, 1.0);
    let phi = rng.uniform(0.0, core::f32::consts::TAU);
    let s = (1.0 - u * u).max(0.0).sqrt();
    [0.5 * s * phi.cos(), 0.5 * u, 0.5 * s * phi.sin()]
}

/// Boxes (center, half extents) making up each parametric shape, y up.
fn shape_boxes(kind: SynthKind) -> Vec<([f32; 3], [f32; 3])> {
    match kind {
        SynthKind::Cube => vec![([0.0, 0.0, 0.0], [0.5, 0.5, 0.5])],
        SynthKind::BoxStack => vec![
            ([0.0, -0.25, 0.0], [0.5, 0.25, 0.5]),
            ([0.0, 0.25, 0.0], [0.25, 0.25, 0.25]),
        ],
        SynthKind::ChairProxy => vec![
            ([0.0, 0.0, 0.0], [0.35, 0.05, 0.35]),
            ([0.0, 0.35, -0.30], [0.35, 0.30, 0.05]),
            ([0.28, -0.35, 0.28], [0.05, 0.30, 0.05]),
            ([0.28, -0.35, -0.28], [0.05, 0.30, 0.05]),
            ([-0.28, -0.35, 0.28], [0.05, 0.30, 0.05]),
            ([-0.28, -0.35, -0.28], [0.05, 0.30, 0.05]),
        ],
        SynthKind::Sphere => Vec::new(),
    }
}

fn sample_surface(kind: SynthKind, count: usize, rng: &mut Rng) -> Vec<[f32; 3]> {
    if kind == SynthKind::Sphere {
        return (0..count).map(|_| sample_sphere_point(rng)).collect();
    }
    let boxes = shape_boxes(kind);
    let areas: Vec<f32> = boxes.iter().map(|(_, h)| box_area(h)).collect();
    let total: f32 = areas.iter().sum();
    (0..count)
        .map(|_| {
            let mut u = rng.uniform(0.0, total);
            let mut pick = boxes.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if u < *a {
                    pick = i;
                    break;
                }
                u -= *a;
            }
            let (c, h) = &boxes[pick];
            sample_box_point(rng, c, h)
        })
        .collect()
}

/// Centers the bounding box at the origin and scales so the largest extent is
/// exactly 1, a tight fit in [-0.5,0.5]^3. A cloud already in that position
/// passes through bitwise unchanged.
pub fn normalize_cloud(points: &mut [[f32; 3]]) -> Result<()> {
    if points.is_empty() {
        anyhow::bail!("cannot normalize an empty cloud");
    }
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for p in points.iter() {
        for a in 0..3 {
            if !p[a].is_finite() {
                anyhow::bail!("cloud contains a non-finite coordinate");
            }
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let max_extent = extent[0].max(extent[1]).max(extent[2]);
    if !(max_extent > 0.0) {
        anyhow::bail!("cannot normalize a degenerate cloud with zero extent");
    }
    let scale = 1.0 / max_extent;
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    for p in points.iter_mut() {
        for a in 0..3 {
            p[a] = (p[a] - center[a]) * scale;
        }
    }
    Ok(())
}

/// Fixed eight-camera rig for ground-truth views at the given resolution.
pub fn fixed_rig(view_size: usize) -> Result<ViewpointSet> {
    Ok(make_fixed_views(&CameraConfig::new(view_size))?)
}

/// Shaded-depth proxy image: lit pixels get (z_far - z)/(z_far - z_near) from
/// the first fixed view, background stays 0, replicated to three channels.
fn shaded_rgb(cloud: &PointCloud, image_size: usize) -> Result<Vec<f32>> {
    let cam = CameraConfig::new(image_size);
    let rig = make_fixed_views(&cam)?;
    let cfg = RenderConfig::for_camera(image_size, cam.radius)?;
    let r = brute_force_render(cloud, &rig.fixed_views[0], &cfg)?;
    let z_near = cam.radius - 1.0;
    let z_far = cam.radius + 1.0;
    let n = image_size * image_size;
    let mut chan = vec![0.0f32; n];
    for i in 0..n {
        if r.view.mask[i] >= 0.5 {
            chan[i] = ((z_far - r.view.depth[i]) / (z_far - z_near)).clamp(0.0, 1.0);
        }
    }
    let mut rgb = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        rgb.extend_from_slice(&chan);
    }
    Ok(rgb)
}

/// Builds one synthetic object: parametric surface cloud, eight rendered
/// ground-truth views, and a shaded-depth input image.
pub fn synth_object(
    kind: SynthKind,
    object_id: &str,
    seed: u64,
    geom: &DatasetGeometry,
) -> Result<Sample> {
    check_object_id(object_id)?;
    if geom.cloud_points == 0 {
        anyhow::bail!("cloud_points must be >= 1");
    }
    let mut rng = Rng::derive(seed, kind.name());
    let mut points = sample_surface(kind, geom.cloud_points, &mut rng);
    normalize_cloud(&mut points)?;
    let cloud = PointCloud { points };

    let rig = fixed_rig(geom.view_size)?;
    let cfg = RenderConfig::for_camera(geom.view_size, rig.camera.radius)?;
    let mut gt_views_fixed = Vec::with_capacity(VIEW_COUNT);
    for pose in &rig.fixed_views {
        gt_views_fixed.push(brute_force_render(&cloud, pose, &cfg)?.view);
    }
    let rgb = shaded_rgb(&cloud, geom.image_size)?;
    Ok(Sample {
        object_id: object_id.to_string(),
        category: kind.name().to_string(),
        rgb,
        gt_views_fixed,
        gt_cloud: cloud,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: String,
    pub category: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiskManifest {
    pub image_size: usize,
    pub view_size: usize,
    pub cloud_points: usize,
    pub camera_radius: f32,
    pub objects: Vec<ObjectEntry>,
    /// Echo of the eight fixed poses at view resolution.
    pub poses: Vec<PoseJson>,
}

/// Ids become directory names, so restrict them to a safe alphabet.
fn check_object_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_');
    if !ok {
        anyhow::bail!("object id '{id}' must be nonempty [a-z0-9_-]");
    }
    Ok(())
}

pub fn save_sample(root: &Path, sample: &Sample, geom: &DatasetGeometry) -> Result<()> {
    check_object_id(&sample.object_id)?;
    let i = geom.image_size;
    let v = geom.view_size;
    if sample.rgb.len() != 3 * i * i {
        anyhow::bail!(
            "sample {} rgb has {} values, expected {}",
            sample.object_id,
            sample.rgb.len(),
            3 * i * i
        );
    }
    if sample.gt_views_fixed.len() != VIEW_COUNT {
        anyhow::bail!(
            "sample {} has {} views, expected {VIEW_COUNT}",
            sample.object_id,
            sample.gt_views_fixed.len()
        );
    }
    let dir = root.join(&sample.object_id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    write_tnsr(&dir.join("rgb.tnsr"), &[3, i, i], &sample.rgb)?;
    let mut depth = Vec::with_capacity(VIEW_COUNT * v * v);
    let mut mask = Vec::with_capacity(VIEW_COUNT * v * v);
    for view in &sample.gt_views_fixed {
        if view.height != v || view.width != v {
            anyhow::bail!(
                "sample {} view is {}x{}, expected {v}x{v}",
                sample.object_id,
                view.height,
                view.width
            );
        }
        depth.extend_from_slice(&view.depth);
        mask.extend_from_slice(&view.mask);
    }
    write_tnsr(&dir.join("depth.tnsr"), &[VIEW_COUNT, v, v], &depth)?;
    write_tnsr(&dir.join("mask.tnsr"), &[VIEW_COUNT, v, v], &mask)?;
    write_tnsr(
        &dir.join("cloud.tnsr"),
        &[sample.gt_cloud.len(), 3],
        &sample.gt_cloud.to_flat(),
    )?;
    Ok(())
}

/// Generates `count` objects cycling through `kinds`, writes them plus the
/// manifest under `root`, and returns the manifest.
pub fn synth_dataset(
    root: &Path,
    count: usize,
    kinds: &[SynthKind],
    seed: u64,
    geom: &DatasetGeometry,
) -> Result<DiskManifest> {
    if kinds.is_empty() {
        anyhow::bail!("at least one shape kind is required");
    }
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let mut objects = Vec::with_capacity(count);
    for idx in 0..count {
        let kind = kinds[idx % kinds.len()];
        let id = format!("{}-{idx:06}", kind.name());
        let object_seed = Rng::derive(seed, "object").with_index(idx as u64).next_u64();
        let sample = synth_object(kind, &id, object_seed, geom)?;
        save_sample(root, &sample, geom)?;
        objects.push(ObjectEntry {
            id,
            category: kind.name().to_string(),
        });
    }
    let rig = fixed_rig(geom.view_size)?;
    let manifest = DiskManifest {
        image_size: geom.image_size,
        view_size: geom.view_size,
        cloud_points: geom.cloud_points,
        camera_radius: rig.camera.radius,
        objects,
        poses: rig.fixed_views.iter().map(PoseJson::from_pose).collect(),
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(root: &Path, manifest: &DiskManifest) -> Result<()> {
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(name: &str) -> Result<Split> {
        match name {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => anyhow::bail!("unknown split '{other}', expected train, val, or test"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Disjoint 80/10/10 object split; the union covers every index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn compute_split(n: usize, seed: u64) -> SplitAssignment {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::derive(seed, "split");
    rng.shuffle(&mut order);
    let n_train = n * 80 / 100;
    let n_val = n * 10 / 100;
    SplitAssignment {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    }
}

/// A validated on-disk dataset plus its seeded split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DiskManifest,
    pub split: SplitAssignment,
}

const LAYOUT_HINT: &str =
    "expected <root>/manifest.json plus <root>/<id>/{rgb,depth,mask,cloud}.tnsr per object";

/// Loads and fully validates a dataset. Every corrupt object is listed in the
/// error rather than skipped.
pub fn load_dataset(root: &Path, split_seed: u64) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    if !manifest_path.is_file() {
        anyhow::bail!(
            "no dataset at {}: missing manifest.json ({LAYOUT_HINT})",
            root.display()
        );
    }
    let text = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest: DiskManifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;

    if manifest.image_size == 0 || manifest.view_size == 0 {
        anyhow::bail!("manifest image_size and view_size must be >= 1");
    }
    if manifest.poses.len() != VIEW_COUNT {
        anyhow::bail!(
            "manifest echoes {} poses, expected {VIEW_COUNT}",
            manifest.poses.len()
        );
    }
    let rig = fixed_rig(manifest.view_size)?;
    for (k, pj) in manifest.poses.iter().enumerate() {
        let loaded = pj.to_pose(manifest.view_size)?;
        if !poses_close(&loaded, &rig.fixed_views[k], 1e-4) {
            anyhow::bail!("manifest pose {k} does not match the fixed rig at view size {}", manifest.view_size);
        }
    }
    let mut seen = BTreeSet::new();
    for entry in &manifest.objects {
        check_object_id(&entry.id)?;
        if !seen.insert(entry.id.clone()) {
            anyhow::bail!("duplicate object id '{}' in manifest", entry.id);
        }
    }

    let mut problems = Vec::new();
    for entry in &manifest.objects {
        if let Err(e) = check_object_files(root, entry, &manifest) {
            problems.push(format!("{}: {e:#}", entry.id));
        }
    }
    if !problems.is_empty() {
        anyhow::bail!(
            "dataset at {} has {} corrupt object(s):\n  {}",
            root.display(),
            problems.len(),
            problems.join("\n  ")
        );
    }

    let split = compute_split(manifest.objects.len(), split_seed);
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        split,
    })
}

fn poses_close(a: &Pose, b: &Pose, tol: f32) -> bool {
    let mut ok = (a.focal - b.focal).abs() <= tol
        && (a.cx - b.cx).abs() <= tol
        && (a.cy - b.cy).abs() <= tol;
    for r in 0..3 {
        ok &= (a.translation[r] - b.translation[r]).abs() <= tol;
        for c in 0..3 {
            ok &= (a.rotation[r][c] - b.rotation[r][c]).abs() <= tol;
        }
    }
    ok
}

fn check_object_files(root: &Path, entry: &ObjectEntry, manifest: &DiskManifest) -> Result<()> {
    let dir = root.join(&entry.id);
    let i = manifest.image_size;
    let v = manifest.view_size;

    let rgb = read_tnsr_expect(&dir.join("rgb.tnsr"), &[3, i, i])?;
    if rgb.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
        anyhow::bail!("rgb values must lie in [0,1]");
    }
    let depth = read_tnsr_expect(&dir.join("depth.tnsr"), &[VIEW_COUNT, v, v])?;
    if depth.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        anyhow::bail!("depth values must be finite and positive");
    }
    let mask = read_tnsr_expect(&dir.join("mask.tnsr"), &[VIEW_COUNT, v, v])?;
    if mask.iter().any(|x| *x != 0.0 && *x != 1.0) {
        anyhow::bail!("mask values must be exactly 0 or 1");
    }

    let cloud_path = dir.join("cloud.tnsr");
    let (cshape, cdata) = read_tnsr(&cloud_path)?;
    if cshape.len() != 2 || cshape[1] != 3 || cshape[0] == 0 {
        anyhow::bail!(
            "cloud.tnsr has shape {cshape:?}, expected [N,3] with N >= 1"
        );
    }
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for p in cdata.chunks_exact(3) {
        for a in 0..3 {
            if !p[a].is_finite() {
                anyhow::bail!("cloud contains a non-finite coordinate");
            }
            if p[a].abs() > 0.5 + 1e-3 {
                anyhow::bail!(
                    "cloud is not normalized: coordinate {} outside [-0.5,0.5]",
                    p[a]
                );
            }
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let max_extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]);
    if max_extent < 1.0 - 1e-2 {
        anyhow::bail!(
            "cloud is not normalized tight: max extent {max_extent}, expected 1.0"
        );
    }
    Ok(())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.objects.is_empty()
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.split.train,
            Split::Val => &self.split.val,
            Split::Test => &self.split.test,
        }
    }

    pub fn geometry(&self) -> DatasetGeometry {
        DatasetGeometry {
            image_size: self.manifest.image_size,
            view_size: self.manifest.view_size,
            cloud_points: self.manifest.cloud_points,
        }
    }

    pub fn rig(&self) -> Result<ViewpointSet> {
        fixed_rig(self.manifest.view_size)
    }

    pub fn find(&self, object_id: &str) -> Option<usize> {
        self.manifest.objects.iter().position(|e| e.id == object_id)
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let entry = self
            .manifest
            .objects
            .get(index)
            .with_context(|| format!("object index {index} out of range 0..{}", self.len()))?;
        let dir = self.root.join(&entry.id);
        let i = self.manifest.image_size;
        let v = self.manifest.view_size;

        let rgb = read_tnsr_expect(&dir.join("rgb.tnsr"), &[3, i, i])?;
        let depth = read_tnsr_expect(&dir.join("depth.tnsr"), &[VIEW_COUNT, v, v])?;
        let mask = read_tnsr_expect(&dir.join("mask.tnsr"), &[VIEW_COUNT, v, v])?;
        let (cshape, cdata) = read_tnsr(&dir.join("cloud.tnsr"))?;
        if cshape.len() != 2 || cshape[1] != 3 {
            anyhow::bail!(
                "{}: cloud.tnsr has shape {cshape:?}, expected [N,3]",
                entry.id
            );
        }
        let gt_cloud = PointCloud::from_flat(&cdata)?;

        let plane = v * v;
        let mut gt_views_fixed = Vec::with_capacity(VIEW_COUNT);
        for k in 0..VIEW_COUNT {
            gt_views_fixed.push(DepthMaskView::new(
                v,
                v,
                depth[k * plane..(k + 1) * plane].to_vec(),
                mask[k * plane..(k + 1) * plane].to_vec(),
                true,
            )?);
        }
        Ok(Sample {
            object_id: entry.id.clone(),
            category: entry.category.clone(),
            rgb,
            gt_views_fixed,
            gt_cloud,
        })
    }

    /// Loads the given objects, result order matching `indices`. `jobs` > 1
    /// splits the reads across that many threads; the output is identical
    /// either way.
    pub fn load_samples(&self, indices: &[usize], jobs: usize) -> Result<Vec<Sample>> {
        if jobs == 0 {
            anyhow::bail!("jobs must be at least 1");
        }
        if jobs == 1 || indices.len() < 2 {
            return indices.iter().map(|&i| self.load_sample(i)).collect();
        }
        let chunk = indices.len().div_ceil(jobs.min(indices.len()));
        std::thread::scope(|scope| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&i| self.load_sample(i))
                            .collect::<Result<Vec<Sample>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(indices.len());
            for handle in handles {
                let part = handle
                    .join()
                    .map_err(|_| anyhow::anyhow!("a data-loading thread panicked"))?;
                out.extend(part?);
            }
            Ok(out)
        })
    }
}

/// Index batches for one epoch: seeded shuffle, final partial batch included.
pub fn epoch_batches(
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        anyhow::bail!("batch_size must be >= 1");
    }
    let mut order = indices.to_vec();
    let mut rng = Rng::derive(seed, "epoch-order").with_index(epoch);
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcgen_core::geometry::backproject;
    use pcgen_core::loss::chamfer_bidirectional_grid;

    fn desk_geom() -> DatasetGeometry {
        DatasetGeometry {
            image_size: 64,
            view_size: 32,
            cloud_points: DEFAULT_CLOUD_POINTS,
        }
    }

    #[test]
    fn cube_points_lie_on_the_surface() {
        let s = synth_object(SynthKind::Cube, "cube-000000", 11, &desk_geom()).unwrap();
        assert_eq!(s.gt_cloud.len(), DEFAULT_CLOUD_POINTS);
        for p in &s.gt_cloud.points {
            let m = p[0].abs().max(p[1].abs()).max(p[2].abs());
            assert!((m - 0.5).abs() <= 1e-6, "point off the cube surface: {p:?}");
        }
    }

    #[test]
    fn flat_plate_renders_constant_depth() {
        let mut rng = Rng::derive(3, "plate");
        let points: Vec<[f32; 3]> = (0..4000)
            .map(|_| [rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), -0.5])
            .collect();
        let cloud = PointCloud { points };
        let pose = Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 4.0],
            focal: 64.0,
            cx: 16.0,
            cy: 16.0,
        };
        pose.validate(32, 32).unwrap();
        let cfg = RenderConfig::for_camera(32, 4.0).unwrap();
        let r = brute_force_render(&cloud, &pose, &cfg).unwrap();
        let lit: Vec<f32> = r
            .view
            .depth
            .iter()
            .zip(&r.view.mask)
            .filter(|(_, m)| **m == 1.0)
            .map(|(d, _)| *d)
            .collect();
        assert!(lit.len() > 50, "plate barely visible: {} lit", lit.len());
        for d in &lit {
            assert!((d - 3.5).abs() <= 1e-6, "depth {d} off the plane");
        }
    }

    #[test]
    fn sphere_views_backproject_close_to_the_cloud() {
        let geom = desk_geom();
        let s = synth_object(SynthKind::Sphere, "sphere-000000", 5, &geom).unwrap();
        let rig = fixed_rig(geom.view_size).unwrap();
        let back = backproject(&s.gt_views_fixed, &rig.fixed_views, 0.5).unwrap();
        assert!(back.len() > 500);
        let (p2g, g2p) = chamfer_bidirectional_grid(&back, &s.gt_cloud).unwrap();
        let z_max = rig.camera.radius as f64 + 0.9;
        let bound = 0.5 * core::f64::consts::SQRT_2 * z_max / (2.0 * geom.view_size as f64);
        assert!(p2g < bound, "backprojected-to-cloud {p2g} >= {bound}");
        assert!(g2p < bound, "cloud-to-backprojected {g2p} >= {bound}");
    }

    #[test]
    fn rgb_proxy_shades_the_object() {
        let geom = desk_geom();
        let s = synth_object(SynthKind::Cube, "cube-000000", 11, &geom).unwrap();
        let n = geom.image_size * geom.image_size;
        assert_eq!(s.rgb.len(), 3 * n);
        assert!(s.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.rgb[..n], s.rgb[n..2 * n], "channels must replicate");
        assert_eq!(s.rgb[..n], s.rgb[2 * n..], "channels must replicate");
        let lit = s.rgb[..n].iter().filter(|v| **v > 0.0).count();
        assert!(lit > 100, "object barely shaded: {lit} lit pixels");
        assert!(lit < n, "background must stay black");
    }

    #[test]
    fn every_kind_produces_eight_nonempty_views() {
        let geom = desk_geom();
        for (i, kind) in SynthKind::ALL.iter().enumerate() {
            let s = synth_object(*kind, "probe-000000", 40 + i as u64, &geom).unwrap();
            for (k, view) in s.gt_views_fixed.iter().enumerate() {
                let lit = view.mask.iter().filter(|m| **m == 1.0).count();
                assert!(lit > 0, "{} view {k} is empty", kind.name());
            }
            let mut lo = [f32::INFINITY; 3];
            let mut hi = [f32::NEG_INFINITY; 3];
            for p in &s.gt_cloud.points {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            let ext = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]);
            assert!((ext - 1.0).abs() <= 1e-4, "{} extent {ext}", kind.name());
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let geom = desk_geom();
        let manifest = synth_dataset(dir.path(), 12, &SynthKind::ALL, 7, &geom).unwrap();
        assert_eq!(manifest.objects.len(), 12);

        let ds = load_dataset(dir.path(), 11).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.split.train.len(), 9);
        assert_eq!(ds.split.val.len(), 1);
        assert_eq!(ds.split.test.len(), 2);
        let mut all: Vec<usize> = ds
            .split
            .train
            .iter()
            .chain(&ds.split.val)
            .chain(&ds.split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>(), "splits must partition");

        let again = load_dataset(dir.path(), 11).unwrap();
        assert_eq!(ds.split, again.split, "same seed, same split");

        let loaded = ds.load_sample(0).unwrap();
        let object_seed = Rng::derive(7, "object").with_index(0).next_u64();
        let fresh = synth_object(SynthKind::Cube, "cube-000000", object_seed, &geom).unwrap();
        assert_eq!(loaded.object_id, fresh.object_id);
        assert_eq!(loaded.rgb, fresh.rgb);
        assert_eq!(loaded.gt_cloud, fresh.gt_cloud);
        for (a, b) in loaded.gt_views_fixed.iter().zip(&fresh.gt_views_fixed) {
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn corrupt_objects_are_all_listed() {
        let dir = tempfile::tempdir().unwrap();
        let geom = desk_geom();
        synth_dataset(dir.path(), 6, &SynthKind::ALL, 7, &geom).unwrap();

        let victim_a = dir.path().join("cube-000000/depth.tnsr");
        let bytes = fs::read(&victim_a).unwrap();
        fs::write(&victim_a, &bytes[..bytes.len() / 2]).unwrap();
        let victim_b = dir.path().join("box_stack-000001/cloud.tnsr");
        fs::remove_file(&victim_b).unwrap();

        let err = format!("{:#}", load_dataset(dir.path(), 1).unwrap_err());
        assert!(err.contains("cube-000000"), "missing first victim: {err}");
        assert!(err.contains("box_stack-000001"), "missing second victim: {err}");
        assert!(err.contains("2 corrupt"), "wrong count: {err}");
    }

    #[test]
    fn missing_manifest_error_names_the_layout() {
        let dir = tempfile::tempdir().unwrap();
        let err = format!("{:#}", load_dataset(dir.path(), 1).unwrap_err());
        assert!(err.contains("manifest.json"), "{err}");
        assert!(err.contains("{rgb,depth,mask,cloud}.tnsr"), "{err}");
    }

    #[test]
    fn non_normalized_cloud_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let geom = desk_geom();
        synth_dataset(dir.path(), 4, &SynthKind::ALL, 7, &geom).unwrap();

        let path = dir.path().join("sphere-000003/cloud.tnsr");
        let (shape, mut data) = read_tnsr(&path).unwrap();
        for v in &mut data {
            *v *= 2.0;
        }
        write_tnsr(&path, &shape, &data).unwrap();

        let err = format!("{:#}", load_dataset(dir.path(), 1).unwrap_err());
        assert!(err.contains("sphere-000003"), "{err}");
        assert!(err.contains("not normalized"), "{err}");
    }

    #[test]
    fn epoch_batches_cover_every_index_once() {
        let indices: Vec<usize> = (0..12).collect();
        let batches = epoch_batches(&indices, 5, 9, 0).unwrap();
        assert_eq!(
            batches.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![5, 5, 2]
        );
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, indices, "every object exactly once");

        assert_eq!(batches, epoch_batches(&indices, 5, 9, 0).unwrap());
        assert_ne!(batches, epoch_batches(&indices, 5, 9, 1).unwrap());
        assert!(epoch_batches(&indices, 0, 9, 0).is_err());
    }
}
