//! Point cloud to depth/mask projection.
//!
//! `pseudo_render` follows the upsample + inverse-depth max-pool scheme: points
//! rasterize onto a U·H × U·W grid, each fine cell keeps the largest inverse
//! depth, and U×U max-pooling reduces back to H×W. `brute_force_render` is the
//! non-differentiable oracle: a direct per-pixel z-buffer over the same
//! projected points. Both share one projection routine (same drop policy, same
//! float ops), so their outputs must agree exactly; only the collision
//! resolution differs.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{DepthMaskView, PointCloud, Pose};
use crate::math;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Fine-grid factor U. 1 renders directly at output resolution.
    pub upsample: usize,
    /// Depth written where no point lands. Must exceed any real object depth
    /// so the background loses every inverse-depth comparison.
    pub z_bg: f32,
}

impl RenderConfig {
    pub fn new(height: usize, width: usize, upsample: usize, z_bg: f32) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("render.size", "image must be at least 1x1"));
        }
        if upsample == 0 {
            return Err(Error::invalid("render.upsample", "factor must be at least 1"));
        }
        if !(z_bg > 0.0) || !z_bg.is_finite() {
            return Err(Error::invalid("render.z_bg", "background depth must be positive and finite"));
        }
        Ok(RenderConfig { height, width, upsample, z_bg })
    }

    /// Square target with U=5 and z_bg = 10×camera radius.
    pub fn for_camera(size: usize, radius: f32) -> Result<Self> {
        RenderConfig::new(size, size, 5, 10.0 * radius)
    }
}

/// Side information from a render pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderMeta {
    pub dropped_behind: usize,
    pub dropped_out_of_frame: usize,
    /// True when the input cloud was nonempty but nothing landed in frame.
    pub all_dropped: bool,
    /// Winning point index per output pixel, row-major; usize::MAX when unlit.
    pub winners: Vec<usize>,
}

pub struct RenderResult {
    pub view: DepthMaskView,
    pub meta: RenderMeta,
}

const UNLIT: usize = usize::MAX;

/// One point after projection: either dropped or landed on a fine cell.
enum Projected {
    Behind,
    OutOfFrame,
    Landed {
        /// Low-res pixel, row-major.
        pixel: usize,
        /// Fine cell inside the U·H × U·W grid, row-major.
        cell: usize,
        /// Inverse camera depth 1/z; larger is nearer.
        inv_z: f32,
    },
}

/// Shared projection: camera transform, pinhole projection, fine-grid floor
/// quantization. Both renderers consume exactly this, which pins their drop
/// policy and float rounding to a single code path.
fn project(points: &[[f32; 3]], pose: &Pose, cfg: &RenderConfig) -> Vec<Projected> {
    let u_factor = cfg.upsample as f32;
    let fine_w = (cfg.width * cfg.upsample) as i64;
    let fine_h = (cfg.height * cfg.upsample) as i64;
    points
        .iter()
        .map(|&p| {
            let cam = pose.apply(p);
            let z = cam[2];
            if z <= 0.0 {
                return Projected::Behind;
            }
            let u = pose.focal * cam[0] / z + pose.cx;
            let v = pose.focal * cam[1] / z + pose.cy;
            let uf = math::floorf(u_factor * u) as i64;
            let vf = math::floorf(u_factor * v) as i64;
            if uf < 0 || uf >= fine_w || vf < 0 || vf >= fine_h {
                return Projected::OutOfFrame;
            }
            let (ufi, vfi) = (uf as usize, vf as usize);
            Projected::Landed {
                pixel: (vfi / cfg.upsample) * cfg.width + ufi / cfg.upsample,
                cell: vfi * cfg.width * cfg.upsample + ufi,
                inv_z: 1.0 / z,
            }
        })
        .collect()
}

/// (inv_z, index) ordering shared by every buffer: larger inverse depth wins,
/// equal inverse depths go to the lower point index.
fn beats(inv_z: f32, idx: usize, best_inv: f32, best_idx: usize) -> bool {
    inv_z > best_inv || (inv_z == best_inv && idx < best_idx)
}

fn finish(
    best_inv: Vec<f32>,
    best_idx: Vec<usize>,
    n_points: usize,
    dropped_behind: usize,
    dropped_out_of_frame: usize,
    cfg: &RenderConfig,
) -> RenderResult {
    let mut depth = vec![cfg.z_bg; cfg.height * cfg.width];
    let mut mask = vec![0.0f32; cfg.height * cfg.width];
    let mut lit = 0usize;
    for (i, (&w, &k)) in best_inv.iter().zip(&best_idx).enumerate() {
        if k != UNLIT {
            depth[i] = 1.0 / w;
            mask[i] = 1.0;
            lit += 1;
        }
    }
    let view = DepthMaskView {
        depth,
        mask,
        mask_is_probability: true,
        height: cfg.height,
        width: cfg.width,
    };
    RenderResult {
        view,
        meta: RenderMeta {
            dropped_behind,
            dropped_out_of_frame,
            all_dropped: n_points > 0 && lit == 0,
            winners: best_idx,
        },
    }
}

/// Upsample + inverse-depth max-pool renderer (the differentiable scheme;
/// this entry point is the pure forward pass).
pub fn pseudo_render(pc: &PointCloud, pose: &Pose, cfg: &RenderConfig) -> Result<RenderResult> {
    cfg_check(cfg)?;
    let projected = project(&pc.points, pose, cfg);
    let fine_len = cfg.height * cfg.width * cfg.upsample * cfg.upsample;
    let mut fine_inv = vec![f32::NEG_INFINITY; fine_len];
    let mut fine_idx = vec![UNLIT; fine_len];
    let mut behind = 0;
    let mut off = 0;
    for (i, p) in projected.iter().enumerate() {
        match p {
            Projected::Behind => behind += 1,
            Projected::OutOfFrame => off += 1,
            Projected::Landed { cell, inv_z, .. } => {
                if beats(*inv_z, i, fine_inv[*cell], fine_idx[*cell]) {
                    fine_inv[*cell] = *inv_z;
                    fine_idx[*cell] = i;
                }
            }
        }
    }
    // U×U max-pool down to the output grid
    let u = cfg.upsample;
    let mut best_inv = vec![f32::NEG_INFINITY; cfg.height * cfg.width];
    let mut best_idx = vec![UNLIT; cfg.height * cfg.width];
    for row in 0..cfg.height * u {
        for col in 0..cfg.width * u {
            let cell = row * cfg.width * u + col;
            let k = fine_idx[cell];
            if k == UNLIT {
                continue;
            }
            let pixel = (row / u) * cfg.width + col / u;
            if beats(fine_inv[cell], k, best_inv[pixel], best_idx[pixel]) {
                best_inv[pixel] = fine_inv[cell];
                best_idx[pixel] = k;
            }
        }
    }
    Ok(finish(best_inv, best_idx, pc.len(), behind, off, cfg))
}

/// Direct z-buffer oracle: same projection, per-pixel max without the fine
/// grid. Not differentiable.
pub fn brute_force_render(pc: &PointCloud, pose: &Pose, cfg: &RenderConfig) -> Result<RenderResult> {
    cfg_check(cfg)?;
    let projected = project(&pc.points, pose, cfg);
    let mut best_inv = vec![f32::NEG_INFINITY; cfg.height * cfg.width];
    let mut best_idx = vec![UNLIT; cfg.height * cfg.width];
    let mut behind = 0;
    let mut off = 0;
    for (i, p) in projected.iter().enumerate() {
        match p {
            Projected::Behind => behind += 1,
            Projected::OutOfFrame => off += 1,
            Projected::Landed { pixel, inv_z, .. } => {
                if beats(*inv_z, i, best_inv[*pixel], best_idx[*pixel]) {
                    best_inv[*pixel] = *inv_z;
                    best_idx[*pixel] = i;
                }
            }
        }
    }
    Ok(finish(best_inv, best_idx, pc.len(), behind, off, cfg))
}

fn cfg_check(cfg: &RenderConfig) -> Result<()> {
    RenderConfig::new(cfg.height, cfg.width, cfg.upsample, cfg.z_bg).map(|_| ())
}

/// Differentiable render of a [N,3] canonical-frame point tensor. The depth
/// image carries gradient back to the winning point of each lit pixel through
/// its camera depth (subgradient through the max, exactly like max-pool): for
/// a lit pixel won by point k, d depth/d pₖ = third row of the pose rotation.
/// The mask and drop counts ride along in the returned metadata.
pub struct TapeRender {
    pub depth: Tensor,
    /// 0/1 lit mask, probability form.
    pub mask: Vec<f32>,
    pub meta: RenderMeta,
}

pub fn pseudo_render_tape(
    tape: &Tape,
    points: &Tensor,
    pose: &Pose,
    cfg: &RenderConfig,
) -> Result<TapeRender> {
    let sh = points.shape();
    if sh.len() != 2 || sh[1] != 3 {
        return Err(Error::shape(
            "pseudo_render",
            alloc::format!("points must be [N, 3], got {}", crate::error::fmt_shape(sh)),
        ));
    }
    let pc = PointCloud::from_flat(points.data())?;
    let result = pseudo_render(&pc, pose, cfg)?;
    let winners = result.meta.winners.clone();
    let z_row = pose.rotation[2];
    let n = pc.len();
    let depth = tape.push_op(
        "pseudo_render",
        &[points],
        vec![cfg.height, cfg.width],
        result.view.depth.clone(),
        Box::new(move |g, want| {
            if !want[0] {
                return vec![None];
            }
            let mut gp = vec![0.0f32; n * 3];
            for (pixel, &k) in winners.iter().enumerate() {
                if k == UNLIT {
                    continue;
                }
                let gv = g[pixel];
                gp[k * 3] += gv * z_row[0];
                gp[k * 3 + 1] += gv * z_row[1];
                gp[k * 3 + 2] += gv * z_row[2];
            }
            vec![Some(gp)]
        }),
    )?;
    Ok(TapeRender {
        depth,
        mask: result.view.mask,
        meta: result.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_fixed_views, CameraConfig};
    use crate::rng::Rng;

    fn small_cfg(size: usize, upsample: usize) -> RenderConfig {
        RenderConfig::new(size, size, upsample, 40.0).unwrap()
    }

    fn axis_pose() -> Pose {
        // identity orientation, camera at origin looking down +z
        Pose::identity(16.0, 8.0, 8.0)
    }

    type RenderFn = fn(&PointCloud, &Pose, &RenderConfig) -> Result<RenderResult>;
    const BOTH: [RenderFn; 2] = [pseudo_render, brute_force_render];

    #[test]
    fn empty_cloud_renders_background() {
        let cfg = small_cfg(16, 5);
        let pc = PointCloud::default();
        for render in BOTH {
            let out = render(&pc, &axis_pose(), &cfg).unwrap();
            assert!(out.view.mask.iter().all(|&m| m == 0.0));
            assert!(out.view.depth.iter().all(|&d| d == 40.0));
            assert!(!out.meta.all_dropped);
        }
    }

    #[test]
    fn nearer_point_wins_collision() {
        let cfg = small_cfg(16, 5);
        let pc = PointCloud {
            points: vec![[0.0, 0.0, 3.0], [0.0, 0.0, 2.0]],
        };
        for render in BOTH {
            let out = render(&pc, &axis_pose(), &cfg).unwrap();
            let lit: Vec<usize> = out
                .view
                .mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m == 1.0)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(lit.len(), 1);
            assert_eq!(out.view.depth[lit[0]], 2.0);
            assert_eq!(out.meta.winners[lit[0]], 1);
        }
    }

    #[test]
    fn single_axis_point_lands_at_principal_point() {
        let cfg = small_cfg(16, 1);
        let pc = PointCloud {
            points: vec![[0.0, 0.0, 5.0]],
        };
        let out = brute_force_render(&pc, &axis_pose(), &cfg).unwrap();
        let lit: Vec<usize> = out
            .view
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1.0)
            .map(|(i, _)| i)
            .collect();
        // principal point (8,8) lands in pixel (8,8)
        assert_eq!(lit, vec![8 * 16 + 8]);
        assert_eq!(out.view.depth[lit[0]], 5.0);
    }

    #[test]
    fn behind_camera_points_are_counted_not_rendered() {
        let cfg = small_cfg(16, 2);
        let pc = PointCloud {
            points: vec![[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 2.0]],
        };
        let out = pseudo_render(&pc, &axis_pose(), &cfg).unwrap();
        assert_eq!(out.meta.dropped_behind, 2);
        assert_eq!(out.view.mask.iter().filter(|&&m| m == 1.0).count(), 1);
        assert!(!out.meta.all_dropped);

        let all_behind = PointCloud {
            points: vec![[0.0, 0.0, -1.0]],
        };
        let out = pseudo_render(&all_behind, &axis_pose(), &cfg).unwrap();
        assert!(out.meta.all_dropped);
    }

    #[test]
    fn permuting_points_leaves_images_unchanged() {
        let mut rng = Rng::new(40);
        let cfg = small_cfg(16, 3);
        let vs = make_fixed_views(&CameraConfig::new(16)).unwrap();
        let pose = &vs.fixed_views[2];
        let mut points: Vec<[f32; 3]> = (0..120)
            .map(|_| {
                [
                    rng.uniform(-0.5, 0.5),
                    rng.uniform(-0.5, 0.5),
                    rng.uniform(-0.5, 0.5),
                ]
            })
            .collect();
        let a = brute_force_render(&PointCloud { points: points.clone() }, pose, &cfg).unwrap();
        points.reverse();
        let b = brute_force_render(&PointCloud { points }, pose, &cfg).unwrap();
        assert_eq!(a.view.depth, b.view.depth);
        assert_eq!(a.view.mask, b.view.mask);
    }

    #[test]
    fn renderers_agree_exactly_on_random_clouds() {
        let mut rng = Rng::new(71);
        let vs = make_fixed_views(&CameraConfig::new(32)).unwrap();
        for case in 0..1000 {
            let n = 1 + rng.below(500) as usize;
            let points: Vec<[f32; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.uniform(-0.8, 0.8),
                        rng.uniform(-0.8, 0.8),
                        rng.uniform(-0.8, 0.8),
                    ]
                })
                .collect();
            let pc = PointCloud { points };
            let upsample = [1usize, 3, 5][case % 3];
            let cfg = small_cfg(32, upsample);
            let pose = &vs.fixed_views[case % 8];
            let a = pseudo_render(&pc, pose, &cfg).unwrap();
            let b = brute_force_render(&pc, pose, &cfg).unwrap();
            assert_eq!(a.view.depth, b.view.depth, "depth diverged in case {case}");
            assert_eq!(a.view.mask, b.view.mask, "mask diverged in case {case}");
            assert_eq!(a.meta, b.meta, "metadata diverged in case {case}");
        }
    }

    #[test]
    fn more_upsampling_never_loses_lit_pixels() {
        let mut rng = Rng::new(90);
        let vs = make_fixed_views(&CameraConfig::new(24)).unwrap();
        let points: Vec<[f32; 3]> = (0..300)
            .map(|_| {
                [
                    rng.uniform(-0.7, 0.7),
                    rng.uniform(-0.7, 0.7),
                    rng.uniform(-0.7, 0.7),
                ]
            })
            .collect();
        let pc = PointCloud { points };
        let mut last = 0usize;
        for u in 1..=6 {
            let cfg = small_cfg(24, u);
            let out = pseudo_render(&pc, &vs.fixed_views[0], &cfg).unwrap();
            let lit = out.view.mask.iter().filter(|&&m| m == 1.0).count();
            assert!(lit >= last, "lit pixels dropped from {last} to {lit} at U={u}");
            assert!(lit <= pc.len().min(24 * 24));
            last = lit;
        }
    }

    #[test]
    fn winning_point_gets_unit_depth_gradient() {
        let vs = make_fixed_views(&CameraConfig::new(16)).unwrap();
        let pose = vs.fixed_views[3].clone();
        let cfg = small_cfg(16, 5);
        // two points in distinct pixels plus one occluded duplicate
        let pts = vec![
            [0.3, 0.1, 0.2],
            [-0.25, -0.2, 0.1],
            [0.3 + 0.001, 0.1, 0.2 + 0.4], // same ray region, farther along view 3? close enough to collide after quantization is not required
        ];
        let tape = Tape::new();
        let flat: Vec<f32> = pts.iter().flatten().copied().collect();
        let points = tape.leaf(&[3, 3], flat, true).unwrap();
        let out = pseudo_render_tape(&tape, &points, &pose, &cfg).unwrap();
        let loss = tape.sum_all(&out.depth).unwrap();
        tape.backward(&loss).unwrap();
        let grad = tape.grad(&points).unwrap();
        // each winning point's gradient is exactly the pose's z row; losers zero
        let z_row = pose.rotation[2];
        let mut winners = out.meta.winners.clone();
        winners.retain(|&k| k != usize::MAX);
        winners.sort_unstable();
        winners.dedup();
        for k in 0..3 {
            let g = &grad.data()[k * 3..k * 3 + 3];
            if winners.contains(&k) {
                // may win several pixels; gradient is (count × z_row)
                let scale = g[2] / z_row[2];
                assert!(scale >= 1.0 - 1e-6, "winner {k} scale {scale}");
                for i in 0..3 {
                    assert!((g[i] - scale * z_row[i]).abs() < 1e-5);
                }
            } else {
                assert_eq!(g, &[0.0, 0.0, 0.0], "loser {k} must get zero grad");
            }
        }
    }

    #[test]
    fn depth_gradient_matches_finite_differences_away_from_boundaries() {
        let vs = make_fixed_views(&CameraConfig::new(16)).unwrap();
        let pose = vs.fixed_views[5].clone();
        let cfg = small_cfg(16, 5);
        let mut rng = Rng::new(55);
        // sample points whose fine-grid coordinates stay far from cell edges
        let mut flat = Vec::new();
        let pc_probe = |p: [f32; 3]| -> Option<(f32, f32)> {
            let cam = pose.apply(p);
            if cam[2] <= 0.05 {
                return None;
            }
            let u = pose.focal * cam[0] / cam[2] + pose.cx;
            let v = pose.focal * cam[1] / cam[2] + pose.cy;
            Some((u * 5.0, v * 5.0))
        };
        while flat.len() < 5 * 3 {
            let p = [
                rng.uniform(-0.5, 0.5),
                rng.uniform(-0.5, 0.5),
                rng.uniform(-0.5, 0.5),
            ];
            if let Some((uf, vf)) = pc_probe(p) {
                let fu = uf - math::floorf(uf);
                let fv = vf - math::floorf(vf);
                if fu > 0.15 && fu < 0.85 && fv > 0.15 && fv < 0.85 {
                    flat.extend_from_slice(&p);
                }
            }
        }
        let x = Tensor::from_vec(&[5, 3], flat).unwrap();
        let pose_c = pose.clone();
        let cfg_c = cfg.clone();
        let err = crate::tensor::finite_difference_check(
            &move |t: &Tape, pts: &Tensor| {
                let out = pseudo_render_tape(t, pts, &pose_c, &cfg_c)?;
                // restrict the loss to lit pixels so z_bg does not dilute it
                let mask = t.leaf(&[cfg_c.height, cfg_c.width], out.mask.clone(), false)?;
                t.sum_all(&t.mul(&out.depth, &mask)?)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "render fd err {err}");
    }
}
