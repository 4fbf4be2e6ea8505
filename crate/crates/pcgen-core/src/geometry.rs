//! Camera poses, rigid transforms, and back-projection of depth/mask views
//! into a canonical-frame point cloud.
//!
//! Conventions: world is y-up, cameras look at the origin. Camera axes are
//! x=right, y=down (image v grows downward), z=forward, so a visible point
//! has z > 0 and projects to u = f·x/z + cx, v = f·y/z + cy. Pixel (i, j)
//! covers the unit square with center (j + 0.5, i + 0.5).

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = math::sqrt64(dot(a, a));
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Rigid canonical→camera transform plus pinhole intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    /// Row-major 3×3 rotation, rows are the camera axes in canonical coords.
    pub rotation: [[f32; 3]; 3],
    /// Translation so that p_cam = R·p + t.
    pub translation: [f32; 3],
    /// Focal length in pixels.
    pub focal: f32,
    /// Principal point in pixels.
    pub cx: f32,
    pub cy: f32,
}

impl Pose {
    pub fn identity(focal: f32, cx: f32, cy: f32) -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            focal,
            cx,
            cy,
        }
    }

    /// Checks orthonormality (RᵀR = I and det = +1 within 1e-6), a positive
    /// focal length, and the principal point inside a w×h image.
    pub fn validate(&self, image_w: usize, image_h: usize) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for row in r {
                    acc += row[i] as f64 * row[j] as f64;
                }
                let want = if i == j { 1.0 } else { 0.0 };
                if (acc - want).abs() > 1e-6 {
                    return Err(Error::invalid("pose.rotation", "rows are not orthonormal"));
                }
            }
        }
        let det = {
            let m = |i: usize, j: usize| r[i][j] as f64;
            m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
        };
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("pose.rotation", "determinant is not +1"));
        }
        if !(self.focal > 0.0) {
            return Err(Error::invalid("pose.focal", "must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < image_w as f32) || !(self.cy >= 0.0 && self.cy < image_h as f32) {
            return Err(Error::invalid("pose.principal_point", "outside the image"));
        }
        Ok(())
    }

    /// Applies the transform to one point: R·p + t.
    pub fn apply(&self, p: [f32; 3]) -> [f32; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        let mut out = [0.0f32; 3];
        for i in 0..3 {
            out[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
        }
        out
    }

    /// Inverse transform: camera→canonical, same intrinsics.
    pub fn invert(&self) -> Pose {
        let r = &self.rotation;
        let mut rt = [[0.0f32; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let t = &self.translation;
        let mut nt = [0.0f32; 3];
        for i in 0..3 {
            nt[i] = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Pose {
            rotation: rt,
            translation: nt,
            focal: self.focal,
            cx: self.cx,
            cy: self.cy,
        }
    }

    /// compose(p2, p1) applies p1 first: result·p = p2(p1(p)). Intrinsics are
    /// taken from p2 (the final camera).
    pub fn compose(p2: &Pose, p1: &Pose) -> Pose {
        let mut r = [[0.0f32; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for k in 0..3 {
                    acc += p2.rotation[i][k] as f64 * p1.rotation[k][j] as f64;
                }
                r[i][j] = acc as f32;
            }
        }
        let mut t = [0.0f32; 3];
        for i in 0..3 {
            let mut acc = p2.translation[i] as f64;
            for k in 0..3 {
                acc += p2.rotation[i][k] as f64 * p1.translation[k] as f64;
            }
            t[i] = acc as f32;
        }
        Pose {
            rotation: r,
            translation: t,
            focal: p2.focal,
            cx: p2.cx,
            cy: p2.cy,
        }
    }

    /// Camera center in canonical coordinates: C = −Rᵀ·t.
    pub fn center(&self) -> [f32; 3] {
        let inv = self.invert();
        inv.translation
    }
}

/// Camera ring parameters shared by the fixed views and the novel sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraConfig {
    pub image_size: usize,
    pub radius: f32,
    pub elevation_deg: f32,
    pub focal: f32,
}

impl CameraConfig {
    /// radius 4.0, elevation 20°, focal 2×image size, principal point at the
    /// image center; objects are expected normalized to the unit cube.
    pub fn new(image_size: usize) -> Self {
        CameraConfig {
            image_size,
            radius: 4.0,
            elevation_deg: 20.0,
            focal: 2.0 * image_size as f32,
        }
    }

    pub fn principal(&self) -> (f32, f32) {
        let c = self.image_size as f32 / 2.0;
        (c, c)
    }
}

/// Builds the pose of a camera at spherical (azimuth, elevation, radius)
/// looking at the origin in a y-up world.
pub fn look_at_pose(config: &CameraConfig, azimuth_deg: f64, elevation_deg: f64) -> Result<Pose> {
    if !(config.radius > 0.0) {
        return Err(Error::invalid("camera.radius", "must be positive"));
    }
    if !(config.focal > 0.0) {
        return Err(Error::invalid("camera.focal", "must be positive"));
    }
    let az = azimuth_deg * core::f64::consts::PI / 180.0;
    let el = elevation_deg * core::f64::consts::PI / 180.0;
    let r = config.radius as f64;
    let center = [
        r * math::cos64(el) * math::cos64(az),
        r * math::sin64(el),
        r * math::cos64(el) * math::sin64(az),
    ];
    let forward = normalize([-center[0], -center[1], -center[2]]);
    let up = [0.0, 1.0, 0.0];
    let mut right = cross(forward, up);
    if dot(right, right) < 1e-12 {
        right = cross(forward, [0.0, 0.0, 1.0]);
    }
    let right = normalize(right);
    let down = cross(forward, right);

    let rows = [right, down, forward];
    let mut rotation = [[0.0f32; 3]; 3];
    let mut translation = [0.0f32; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = rows[i][j] as f32;
        }
        translation[i] = -dot(rows[i], center) as f32;
    }
    let (cx, cy) = config.principal();
    Ok(Pose {
        rotation,
        translation,
        focal: config.focal,
        cx,
        cy,
    })
}

/// The eight fixed generation viewpoints plus the novel-view sampler.
#[derive(Debug, Clone)]
pub struct ViewpointSet {
    pub fixed_views: Vec<Pose>,
    pub camera: CameraConfig,
}

/// Eight cameras at azimuths {0°,45°,...,315°} on the configured elevation
/// ring, all looking at the origin.
pub fn make_fixed_views(config: &CameraConfig) -> Result<ViewpointSet> {
    let mut fixed_views = Vec::with_capacity(8);
    for k in 0..8 {
        fixed_views.push(look_at_pose(config, 45.0 * k as f64, config.elevation_deg as f64)?);
    }
    Ok(ViewpointSet {
        fixed_views,
        camera: config.clone(),
    })
}

impl ViewpointSet {
    /// Draws a pose with uniform azimuth in [0°,360°) and elevation in
    /// [−10°,45°] at the configured radius. Deterministic per rng state.
    pub fn sample_novel(&self, rng: &mut Rng) -> Result<Pose> {
        let az = rng.uniform(0.0, 360.0) as f64;
        let el = rng.uniform(-10.0, 45.0) as f64;
        look_at_pose(&self.camera, az, el)
    }
}

/// One predicted or ground-truth view: depth and mask maps over the same grid.
#[derive(Debug, Clone)]
pub struct DepthMaskView {
    pub depth: Vec<f32>,
    pub mask: Vec<f32>,
    /// True when `mask` holds probabilities in [0,1]; false when logits.
    pub mask_is_probability: bool,
    pub height: usize,
    pub width: usize,
}

impl DepthMaskView {
    pub fn new(height: usize, width: usize, depth: Vec<f32>, mask: Vec<f32>, mask_is_probability: bool) -> Result<Self> {
        if depth.len() != height * width || mask.len() != height * width {
            return Err(Error::shape(
                "depth_mask_view",
                alloc::format!(
                    "maps must have {}x{} = {} entries, got depth {} mask {}",
                    height,
                    width,
                    height * width,
                    depth.len(),
                    mask.len()
                ),
            ));
        }
        if depth.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("depth_mask_view"));
        }
        if mask_is_probability && mask.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("mask", "probabilities must lie in [0,1]"));
        }
        Ok(DepthMaskView {
            depth,
            mask,
            mask_is_probability,
            height,
            width,
        })
    }
}

/// Canonical-frame point cloud. Empty is legal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn from_flat(flat: &[f32]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::shape(
                "point_cloud",
                alloc::format!("flat length {} is not a multiple of 3", flat.len()),
            ));
        }
        Ok(PointCloud {
            points: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn to_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.points.len() * 3);
        for p in &self.points {
            out.extend_from_slice(p);
        }
        out
    }
}

/// Applies pose to every point (canonical→camera). Preserves pairwise
/// distances.
pub fn transform_points(pc: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud {
        points: pc.points.iter().map(|&p| pose.apply(p)).collect(),
    }
}

/// The camera-frame ray direction through the center of pixel (row v, col u),
/// scaled so depth z gives the point z·ray.
fn pixel_ray(pose: &Pose, v: usize, u: usize) -> [f32; 3] {
    [
        (u as f32 + 0.5 - pose.cx) / pose.focal,
        (v as f32 + 0.5 - pose.cy) / pose.focal,
        1.0,
    ]
}

/// Lifts every pixel with mask ≥ threshold to a canonical-frame point:
/// camera point z·((u−cx)/f, (v−cy)/f, 1) at the pixel center, then the
/// inverse pose. Views concatenate in order.
pub fn backproject(views: &[DepthMaskView], poses: &[Pose], mask_threshold: f32) -> Result<PointCloud> {
    if views.len() != poses.len() {
        return Err(Error::shape(
            "backproject",
            alloc::format!("{} views but {} poses", views.len(), poses.len()),
        ));
    }
    let mut points = Vec::new();
    for (view, pose) in views.iter().zip(poses) {
        if !view.mask_is_probability {
            return Err(Error::invalid("mask", "backproject needs probability-form masks"));
        }
        let inv = pose.invert();
        for v in 0..view.height {
            for u in 0..view.width {
                let idx = v * view.width + u;
                if view.mask[idx] < mask_threshold {
                    continue;
                }
                let z = view.depth[idx];
                let ray = pixel_ray(pose, v, u);
                points.push(inv.apply([z * ray[0], z * ray[1], z]));
            }
        }
    }
    Ok(PointCloud { points })
}

/// Differentiable backprojection of one depth map. `selected` lists the
/// (row, col) pixels to lift (the mask decision is made outside and does not
/// carry gradient); the output is [N, 3] canonical-frame points whose
/// gradient flows back into the selected depth entries.
pub fn backproject_tape(
    tape: &Tape,
    depth: &Tensor,
    selected: &[(usize, usize)],
    pose: &Pose,
) -> Result<Tensor> {
    let sh = depth.shape();
    if sh.len() != 2 {
        return Err(Error::shape(
            "backproject",
            alloc::format!("depth must be [H, W], got {}", crate::error::fmt_shape(sh)),
        ));
    }
    let (h, w) = (sh[0], sh[1]);
    let inv = pose.invert();
    let mut out = Vec::with_capacity(selected.len() * 3);
    // dp_canonical/dz for each pixel: Rᵀ · ray
    let mut dirs = Vec::with_capacity(selected.len());
    for &(v, u) in selected {
        if v >= h || u >= w {
            return Err(Error::shape(
                "backproject",
                alloc::format!("pixel ({v},{u}) outside {h}x{w} depth map"),
            ));
        }
        let z = depth.data()[v * w + u];
        let ray = pixel_ray(pose, v, u);
        let p = inv.apply([z * ray[0], z * ray[1], z]);
        out.extend_from_slice(&p);
        let rt = &inv.rotation;
        let mut dir = [0.0f32; 3];
        for i in 0..3 {
            dir[i] = rt[i][0] * ray[0] + rt[i][1] * ray[1] + rt[i][2] * ray[2];
        }
        dirs.push(dir);
    }
    let pixels: Vec<(usize, usize)> = selected.to_vec();
    let n = pixels.len();
    tape.push_op(
        "backproject",
        &[depth],
        vec![n, 3],
        out,
        Box::new(move |g, want| {
            if !want[0] {
                return vec![None];
            }
            let mut gd = vec![0.0f32; h * w];
            for (k, &(v, u)) in pixels.iter().enumerate() {
                let dir = dirs[k];
                let gp = &g[k * 3..k * 3 + 3];
                gd[v * w + u] += gp[0] * dir[0] + gp[1] * dir[1] + gp[2] * dir[2];
            }
            vec![Some(gd)]
        }),
    )
}
