//! Training losses and evaluation metrics.
//!
//! The 2D losses are differentiable tape expressions; the 3D error metrics
//! are pure f64 evaluations. Chamfer distances carry two implementations, a
//! brute-force O(N·M) scan and a uniform-grid accelerated search, which must
//! agree exactly (distances are f64 values of identical float expressions and
//! min/mean are order-independent over them).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{DepthMaskView, PointCloud, Pose};
use crate::math;
use crate::render::{pseudo_render_tape, RenderConfig};
use crate::tensor::{Tape, Tensor};

/// Logit magnitude standing in for a binary rendered mask inside BCE: the
/// renderer outputs hard 0/1 masks, and BCE needs logits, so lit pixels enter
/// as +12 and background as −12 (sigmoid(±12) is within 7e-6 of the binary
/// value). The mask term therefore carries no gradient; only depth does.
pub const MASK_LOGIT_SCALE: f32 = 12.0;

fn require_binary(name: &'static str, values: &[f32]) -> Result<()> {
    if values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(name, "entries must be exactly 0 or 1"));
    }
    Ok(())
}

/// Mean binary cross-entropy between logits and a binary target, in the
/// stable form softplus(l) − l·y.
pub fn mask_bce(tape: &Tape, logits: &Tensor, gt_mask: &[f32]) -> Result<Tensor> {
    if gt_mask.len() != logits.numel() {
        return Err(Error::shape(
            "mask_bce",
            alloc::format!("{} logits vs {} targets", logits.numel(), gt_mask.len()),
        ));
    }
    require_binary("gt_mask", gt_mask)?;
    let y = tape.leaf(logits.shape(), gt_mask.to_vec(), false)?;
    let sp = tape.softplus(logits)?;
    let ly = tape.mul(logits, &y)?;
    tape.mean_all(&tape.sub(&sp, &ly)?)
}

/// Mean |pred − gt| over pixels where `mask` is 1; exactly zero (constant)
/// when the mask selects nothing.
pub fn depth_l1(tape: &Tape, pred: &Tensor, gt_depth: &[f32], mask: &[f32]) -> Result<Tensor> {
    if gt_depth.len() != pred.numel() || mask.len() != pred.numel() {
        return Err(Error::shape(
            "depth_l1",
            alloc::format!(
                "{} predictions vs {} depths / {} mask entries",
                pred.numel(),
                gt_depth.len(),
                mask.len()
            ),
        ));
    }
    require_binary("mask", mask)?;
    let count = mask.iter().filter(|&&m| m == 1.0).count();
    if count == 0 {
        return tape.leaf(&[], vec![0.0], false);
    }
    let gt = tape.leaf(pred.shape(), gt_depth.to_vec(), false)?;
    let m = tape.leaf(pred.shape(), mask.to_vec(), false)?;
    let diff = tape.abs(&tape.sub(pred, &gt)?)?;
    let masked = tape.mul(&diff, &m)?;
    tape.scale(&tape.sum_all(&masked)?, 1.0 / count as f32)
}

/// Per-view components of a joint projection loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewLoss {
    pub mask_bce: f32,
    pub depth_l1: f32,
    /// Pixels lit in both the rendering and the ground truth (the depth
    /// term's support).
    pub co_lit: usize,
}

/// Joint 2D loss over K views: differentiable total plus reported components.
pub struct LossBreakdown {
    /// Scalar tape expression: Σ_views (bce + λ·depth_l1). Gradients flow to
    /// the point tensor through the depth terms.
    pub total: Tensor,
    pub mask_bce: f32,
    pub depth_l1: f32,
    pub lambda_depth: f32,
    pub per_view: Vec<ViewLoss>,
}

/// Renders `points` at each ground-truth pose and sums mask BCE plus
/// λ·masked depth L1 per view. The depth term is restricted to pixels lit in
/// both images; the rendered mask enters BCE as ±MASK_LOGIT_SCALE logits.
pub fn joint_2d_loss(
    tape: &Tape,
    points: &Tensor,
    gt_views: &[DepthMaskView],
    poses: &[Pose],
    cfg: &RenderConfig,
    lambda_depth: f32,
) -> Result<LossBreakdown> {
    if gt_views.is_empty() || gt_views.len() != poses.len() {
        return Err(Error::shape(
            "joint_2d_loss",
            alloc::format!("{} views vs {} poses (need K >= 1)", gt_views.len(), poses.len()),
        ));
    }
    let mut total: Option<Tensor> = None;
    let mut per_view = Vec::with_capacity(gt_views.len());
    let mut bce_sum = 0.0f32;
    let mut l1_sum = 0.0f32;
    for (gt, pose) in gt_views.iter().zip(poses) {
        if gt.height != cfg.height || gt.width != cfg.width {
            return Err(Error::shape(
                "joint_2d_loss",
                alloc::format!(
                    "ground truth {}x{} does not match render target {}x{}",
                    gt.height,
                    gt.width,
                    cfg.height,
                    cfg.width
                ),
            ));
        }
        if !gt.mask_is_probability {
            return Err(Error::invalid("gt_mask", "joint loss needs probability-form masks"));
        }
        require_binary("gt_mask", &gt.mask)?;

        let rendered = pseudo_render_tape(tape, points, pose, cfg)?;
        let logits: Vec<f32> = rendered
            .mask
            .iter()
            .map(|&m| if m == 1.0 { MASK_LOGIT_SCALE } else { -MASK_LOGIT_SCALE })
            .collect();
        let logits_t = tape.leaf(&[cfg.height, cfg.width], logits, false)?;
        let bce = mask_bce(tape, &logits_t, &gt.mask)?;

        let co_mask: Vec<f32> = rendered
            .mask
            .iter()
            .zip(&gt.mask)
            .map(|(&r, &g)| if r == 1.0 && g == 1.0 { 1.0 } else { 0.0 })
            .collect();
        let co_lit = co_mask.iter().filter(|&&m| m == 1.0).count();
        let l1 = depth_l1(tape, &rendered.depth, &gt.depth, &co_mask)?;

        bce_sum += bce.scalar()?;
        l1_sum += l1.scalar()?;
        per_view.push(ViewLoss {
            mask_bce: bce.scalar()?,
            depth_l1: l1.scalar()?,
            co_lit,
        });

        let view_total = tape.add(&bce, &tape.scale(&l1, lambda_depth)?)?;
        total = Some(match total {
            None => view_total,
            Some(acc) => tape.add(&acc, &view_total)?,
        });
    }
    Ok(LossBreakdown {
        total: total.expect("K >= 1 checked above"),
        mask_bce: bce_sum,
        depth_l1: l1_sum,
        lambda_depth,
        per_view,
    })
}

/// Squared distance in f64. Both chamfer implementations call exactly this,
/// which makes their outputs bit-identical.
fn dist2(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

fn mean_nearest_brute(from: &[[f32; 3]], to: &[[f32; 3]]) -> f64 {
    let mut sum = 0.0f64;
    for &p in from {
        let mut best = f64::INFINITY;
        for &q in to {
            let d = dist2(p, q);
            if d < best {
                best = d;
            }
        }
        sum += math::sqrt64(best);
    }
    sum / from.len() as f64
}

/// Mean Euclidean distance from each cloud to its nearest neighbor in the
/// other, O(N·M): (pred→gt, gt→pred). Errors on empty clouds.
pub fn chamfer_bidirectional(pred: &PointCloud, gt: &PointCloud) -> Result<(f64, f64)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::data("chamfer distance needs two nonempty clouds"));
    }
    Ok((
        mean_nearest_brute(&pred.points, &gt.points),
        mean_nearest_brute(&gt.points, &pred.points),
    ))
}

/// Uniform grid over one cloud for exact nearest-neighbor queries.
struct Grid {
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    /// Point indices per cell, row-major over dims.
    cells: Vec<Vec<u32>>,
    points: Vec<[f32; 3]>,
}

impl Grid {
    fn build(points: &[[f32; 3]]) -> Grid {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i] as f64);
                hi[i] = hi[i].max(p[i] as f64);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]);
        // aim for a few points per cell; degenerate clouds get one cell
        let target = math::cbrt64(points.len() as f64).max(1.0);
        let cell = (extent / target).max(1e-6);
        let mut dims = [0i64; 3];
        for i in 0..3 {
            dims[i] = (((hi[i] - lo[i]) / cell) as i64 + 1).max(1);
        }
        let mut cells = vec![Vec::new(); (dims[0] * dims[1] * dims[2]) as usize];
        for (k, p) in points.iter().enumerate() {
            let mut c = [0i64; 3];
            for i in 0..3 {
                c[i] = (math::floor64((p[i] as f64 - lo[i]) / cell) as i64).clamp(0, dims[i] - 1);
            }
            cells[((c[0] * dims[1] + c[1]) * dims[2] + c[2]) as usize].push(k as u32);
        }
        Grid {
            origin: lo,
            cell,
            dims,
            cells,
            points: points.to_vec(),
        }
    }

    /// Exact nearest squared distance via expanding Chebyshev rings around the
    /// query's (possibly out-of-grid) virtual home cell. A point in a cell at
    /// ring c is at least (c−1)·cell away from anywhere in the home cell, so
    /// once the best distance is within r·cell after finishing ring r, no
    /// farther ring can improve it.
    fn nearest_dist2(&self, p: [f32; 3]) -> f64 {
        let mut home = [0i64; 3];
        for i in 0..3 {
            home[i] = math::floor64((p[i] as f64 - self.origin[i]) / self.cell) as i64;
        }
        // rings must be able to reach every cell of the grid from home
        let mut max_ring = 0i64;
        for i in 0..3 {
            max_ring = max_ring.max(home[i].abs()).max((self.dims[i] - 1 - home[i]).abs());
        }
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            for x in home[0] - r..=home[0] + r {
                if x < 0 || x >= self.dims[0] {
                    continue;
                }
                for y in home[1] - r..=home[1] + r {
                    if y < 0 || y >= self.dims[1] {
                        continue;
                    }
                    for z in home[2] - r..=home[2] + r {
                        if z < 0 || z >= self.dims[2] {
                            continue;
                        }
                        // only the shell of the ring is new at radius r
                        let cheb = (x - home[0]).abs().max((y - home[1]).abs()).max((z - home[2]).abs());
                        if cheb != r {
                            continue;
                        }
                        let cell = &self.cells[((x * self.dims[1] + y) * self.dims[2] + z) as usize];
                        for &k in cell {
                            let d = dist2(p, self.points[k as usize]);
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
            if best.is_finite() {
                let safe = r as f64 * self.cell;
                if best <= safe * safe {
                    break;
                }
            }
        }
        best
    }
}

fn mean_nearest_grid(from: &[[f32; 3]], grid: &Grid) -> f64 {
    let mut sum = 0.0f64;
    for &p in from {
        sum += math::sqrt64(grid.nearest_dist2(p));
    }
    sum / from.len() as f64
}

/// Grid-accelerated chamfer; must agree exactly with `chamfer_bidirectional`.
pub fn chamfer_bidirectional_grid(pred: &PointCloud, gt: &PointCloud) -> Result<(f64, f64)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::data("chamfer distance needs two nonempty clouds"));
    }
    let gt_grid = Grid::build(&gt.points);
    let pred_grid = Grid::build(&pred.points);
    Ok((
        mean_nearest_grid(&pred.points, &gt_grid),
        mean_nearest_grid(&gt.points, &pred_grid),
    ))
}

/// Evaluation row: bidirectional error ×100 plus generated point count.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub pred_to_gt_x100: f64,
    pub gt_to_pred_x100: f64,
    pub generated_points: usize,
}

pub fn error_report(pred: &PointCloud, gt: &PointCloud) -> Result<ErrorReport> {
    let (p2g, g2p) = chamfer_bidirectional_grid(pred, gt)?;
    Ok(ErrorReport {
        pred_to_gt_x100: p2g * 100.0,
        gt_to_pred_x100: g2p * 100.0,
        generated_points: pred.len(),
    })
}

/// Total pixels with mask probability ≥ threshold across all views.
pub fn count_generated_points(views: &[DepthMaskView], threshold: f32) -> Result<usize> {
    let mut count = 0;
    for view in views {
        if !view.mask_is_probability {
            return Err(Error::invalid("mask", "point counting needs probability-form masks"));
        }
        count += view.mask.iter().filter(|&&m| m >= threshold).count();
    }
    Ok(count)
}
