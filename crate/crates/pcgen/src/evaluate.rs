//! Evaluation: generate views, backproject at threshold 0.5, score the fused
//! cloud against ground truth, and emit the fixed-column CSV report.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use pcgen_core::geometry::{backproject, DepthMaskView};
use pcgen_core::loss::error_report;
use pcgen_core::model::StructureModel;

use crate::dataset::{fixed_rig, Sample, VIEW_COUNT};

pub const MASK_THRESHOLD: f32 = 0.5;

/// One evaluated object. Errors are None when the predicted cloud was empty;
/// such objects are flagged, never dropped.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub object_id: String,
    pub category: String,
    pub pred_to_gt_x100: Option<f64>,
    pub gt_to_pred_x100: Option<f64>,
    pub points: usize,
}

impl EvalRow {
    pub fn flagged(&self) -> bool {
        self.pred_to_gt_x100.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    /// Means over included objects; None when every object was flagged.
    pub mean_pred_to_gt_x100: Option<f64>,
    pub mean_gt_to_pred_x100: Option<f64>,
    pub mean_points: f64,
    pub flagged: usize,
    pub included: usize,
}

fn summarize(rows: Vec<EvalRow>) -> EvalSummary {
    let included = rows.iter().filter(|r| !r.flagged()).count();
    let flagged = rows.len() - included;
    let (mut p2g, mut g2p, mut pts) = (0.0, 0.0, 0.0);
    for r in rows.iter().filter(|r| !r.flagged()) {
        p2g += r.pred_to_gt_x100.unwrap();
        g2p += r.gt_to_pred_x100.unwrap();
        pts += r.points as f64;
    }
    let n = included as f64;
    EvalSummary {
        rows,
        mean_pred_to_gt_x100: (included > 0).then(|| p2g / n),
        mean_gt_to_pred_x100: (included > 0).then(|| g2p / n),
        mean_points: if included > 0 { pts / n } else { 0.0 },
        flagged,
        included,
    }
}

/// Scores one set of eight views against a ground-truth cloud.
fn row_from_views(sample: &Sample, views: &[DepthMaskView]) -> Result<EvalRow> {
    let rig = fixed_rig(views[0].height)?;
    let pred = backproject(views, &rig.fixed_views, MASK_THRESHOLD).map_err(anyhow::Error::from)?;
    if pred.is_empty() {
        return Ok(EvalRow {
            object_id: sample.object_id.clone(),
            category: sample.category.clone(),
            pred_to_gt_x100: None,
            gt_to_pred_x100: None,
            points: 0,
        });
    }
    let report = error_report(&pred, &sample.gt_cloud).map_err(anyhow::Error::from)?;
    Ok(EvalRow {
        object_id: sample.object_id.clone(),
        category: sample.category.clone(),
        pred_to_gt_x100: Some(report.pred_to_gt_x100),
        gt_to_pred_x100: Some(report.gt_to_pred_x100),
        points: report.generated_points,
    })
}

/// Runs the model on one image and sigmoids the mask logits into probability
/// views ready for backprojection. Deterministic; no randomness involved.
pub fn prediction_views(model: &StructureModel, rgb: &[f32]) -> Result<Vec<DepthMaskView>> {
    let out = model.cfg.out_size;
    let gen = model.generate(rgb).map_err(anyhow::Error::from)?;
    let mut views = Vec::with_capacity(VIEW_COUNT);
    for v in 0..VIEW_COUNT {
        let depth = gen.depth(v).map_err(anyhow::Error::from)?;
        let prob: Vec<f32> = gen
            .mask_logits(v)
            .map_err(anyhow::Error::from)?
            .iter()
            .map(|l| 1.0 / (1.0 + (-l).exp()))
            .collect();
        views.push(DepthMaskView::new(out, out, depth, prob, true).map_err(anyhow::Error::from)?);
    }
    Ok(views)
}

/// Evaluates the model per object: generate, backproject, score.
pub fn evaluate_samples(model: &StructureModel, samples: &[&Sample]) -> Result<EvalSummary> {
    let mut rows = Vec::with_capacity(samples.len());
    for sample in samples {
        let views = prediction_views(model, &sample.rgb)?;
        rows.push(row_from_views(sample, &views)?);
    }
    Ok(summarize(rows))
}

/// Upper-bound fixture: scores the ground-truth views as if the model had
/// predicted them. Errors stay inside the quantization bound.
pub fn evaluate_gt_views(samples: &[&Sample]) -> Result<EvalSummary> {
    let mut rows = Vec::with_capacity(samples.len());
    for sample in samples {
        rows.push(row_from_views(sample, &sample.gt_views_fixed)?);
    }
    Ok(summarize(rows))
}

pub const CSV_HEADER: &str = "method,phase,pred_to_gt_x100,gt_to_pred_x100,points";

/// Aggregate report line in the fixed table layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub method: String,
    pub phase: String,
    pub pred_to_gt_x100: f64,
    pub gt_to_pred_x100: f64,
    pub points: f64,
}

pub fn summary_row(method: &str, phase: &str, summary: &EvalSummary) -> CsvRow {
    CsvRow {
        method: method.to_string(),
        phase: phase.to_string(),
        pred_to_gt_x100: summary.mean_pred_to_gt_x100.unwrap_or(f64::NAN),
        gt_to_pred_x100: summary.mean_gt_to_pred_x100.unwrap_or(f64::NAN),
        points: summary.mean_points,
    }
}

pub fn csv_text(rows: &[CsvRow]) -> String {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.phase, r.pred_to_gt_x100, r.gt_to_pred_x100, r.points
        ));
    }
    text
}

pub fn write_report(path: &Path, rows: &[CsvRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, csv_text(rows)).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn parse_report(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    let header = lines.next().context("report is empty")?;
    if header != CSV_HEADER {
        anyhow::bail!("report header '{header}' does not match '{CSV_HEADER}'");
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            anyhow::bail!("report line {} has {} cells, expected 5", i + 2, cells.len());
        }
        rows.push(CsvRow {
            method: cells[0].to_string(),
            phase: cells[1].to_string(),
            pred_to_gt_x100: cells[2]
                .parse()
                .with_context(|| format!("line {}: bad pred_to_gt_x100", i + 2))?,
            gt_to_pred_x100: cells[3]
                .parse()
                .with_context(|| format!("line {}: bad gt_to_pred_x100", i + 2))?,
            points: cells[4]
                .parse()
                .with_context(|| format!("line {}: bad points", i + 2))?,
        });
    }
    Ok(rows)
}

/// Console table mirroring the CSV columns plus per-object detail.
pub fn format_table(summary: &EvalSummary) -> String {
    let mut out = String::new();
    out.push_str("object                      pred_to_gt_x100  gt_to_pred_x100   points\n");
    for r in &summary.rows {
        if r.flagged() {
            out.push_str(&format!("{:<28}{:>17}{:>17}{:>9}\n", r.object_id, "-", "-", "empty"));
        } else {
            out.push_str(&format!(
                "{:<28}{:>17.4}{:>17.4}{:>9}\n",
                r.object_id,
                r.pred_to_gt_x100.unwrap(),
                r.gt_to_pred_x100.unwrap(),
                r.points
            ));
        }
    }
    out.push_str(&format!(
        "mean over {} included ({} flagged): pred_to_gt {:.4}, gt_to_pred {:.4}, points {:.1}\n",
        summary.included,
        summary.flagged,
        summary.mean_pred_to_gt_x100.unwrap_or(f64::NAN),
        summary.mean_gt_to_pred_x100.unwrap_or(f64::NAN),
        summary.mean_points
    ));
    out
}
