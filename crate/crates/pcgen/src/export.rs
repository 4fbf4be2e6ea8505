//! File exports: ASCII PLY point clouds and 16-bit PNG depth previews with
//! JSON sidecars that invert the quantization.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pcgen_core::geometry::{DepthMaskView, PointCloud};

/// ASCII PLY with float x/y/z properties. Coordinates use the shortest
/// round-trip decimal form, so parsing the text restores them bitwise.
pub fn ply_text(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(64 + cloud.len() * 24);
    out.push_str("ply\n");
    out.push_str("format ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    out.push_str("property float x\n");
    out.push_str("property float y\n");
    out.push_str("property float z\n");
    out.push_str("end_header\n");
    for p in &cloud.points {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    out
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, ply_text(cloud)).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines();
    fn expect<'a>(lines: &mut impl Iterator<Item = &'a str>, want: &str) -> Result<()> {
        let got = lines.next().context("truncated PLY header")?;
        if got != want {
            anyhow::bail!("PLY header line '{got}', expected '{want}'");
        }
        Ok(())
    }
    expect(&mut lines, "ply")?;
    expect(&mut lines, "format ascii 1.0")?;
    let count_line = lines.next().context("truncated PLY header")?;
    let count: usize = count_line
        .strip_prefix("element vertex ")
        .with_context(|| format!("PLY header line '{count_line}', expected 'element vertex N'"))?
        .parse()
        .context("bad vertex count")?;
    expect(&mut lines, "property float x")?;
    expect(&mut lines, "property float y")?;
    expect(&mut lines, "property float z")?;
    expect(&mut lines, "end_header")?;

    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let line = lines
            .next()
            .with_context(|| format!("PLY body ends at vertex {i} of {count}"))?;
        let mut cells = line.split_ascii_whitespace();
        let mut coord = |axis: &str| -> Result<f32> {
            cells
                .next()
                .with_context(|| format!("vertex {i} is missing {axis}"))?
                .parse()
                .with_context(|| format!("vertex {i} has a bad {axis}"))
        };
        points.push([coord("x")?, coord("y")?, coord("z")?]);
    }
    Ok(PointCloud { points })
}

/// Inversion key for a 16-bit depth preview: depth = offset + (value-1)·scale
/// for lit pixels (value ≥ 1); value 0 is background at depth z_bg.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DepthPngMeta {
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    pub offset: f64,
    pub z_bg: f32,
}

const LIT_LEVELS: f64 = 65534.0;

/// Writes a 16-bit grayscale PNG of the view's depth (lit pixels spread over
/// 1..=65535, background 0) plus a JSON sidecar with the inversion key.
pub fn write_depth_png(
    png_path: &Path,
    meta_path: &Path,
    view: &DepthMaskView,
    z_bg: f32,
) -> Result<DepthPngMeta> {
    let lit: Vec<f32> = view
        .depth
        .iter()
        .zip(&view.mask)
        .filter(|(_, m)| **m >= 0.5)
        .map(|(d, _)| *d)
        .collect();
    let (lo, hi) = lit
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &d| {
            (lo.min(d), hi.max(d))
        });
    let scale = if lit.is_empty() || hi == lo {
        0.0
    } else {
        (hi - lo) as f64 / LIT_LEVELS
    };
    let offset = if lit.is_empty() { 0.0 } else { lo as f64 };

    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        view.width as u32,
        view.height as u32,
    );
    for (i, pixel) in img.pixels_mut().enumerate() {
        let value = if view.mask[i] >= 0.5 {
            if scale == 0.0 {
                1u16
            } else {
                let level = ((view.depth[i] as f64 - offset) / scale).round();
                1 + (level.clamp(0.0, LIT_LEVELS) as u16)
            }
        } else {
            0
        };
        *pixel = image::Luma([value]);
    }
    if let Some(parent) = png_path.parent() {
        fs::create_dir_all(parent)?;
    }
    img.save(png_path)
        .with_context(|| format!("writing {}", png_path.display()))?;

    let meta = DepthPngMeta {
        width: view.width,
        height: view.height,
        scale,
        offset,
        z_bg,
    };
    fs::write(meta_path, serde_json::to_string_pretty(&meta)?)
        .with_context(|| format!("writing {}", meta_path.display()))?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_header_is_golden() {
        let cloud = PointCloud {
            points: vec![[0.5, -0.25, 1.0], [0.0, 0.0, -0.0]],
        };
        let text = ply_text(&cloud);
        let want = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        assert!(text.starts_with(want), "{text}");
        assert_eq!(text.lines().count(), 7 + 2);
    }

    #[test]
    fn ply_round_trips_bitwise() {
        let cloud = PointCloud {
            points: vec![
                [0.1, -0.2, 0.30000001],
                [f32::MIN_POSITIVE, -0.0, 123456.78],
                [-0.5, 0.5, 1e-20],
            ],
        };
        let parsed = parse_ply(&ply_text(&cloud)).unwrap();
        assert_eq!(parsed.points.len(), 3);
        for (a, b) in cloud.points.iter().zip(&parsed.points) {
            for axis in 0..3 {
                assert_eq!(a[axis].to_bits(), b[axis].to_bits());
            }
        }

        let empty = parse_ply(&ply_text(&PointCloud::default())).unwrap();
        assert!(empty.is_empty());

        assert!(parse_ply("ply\nformat binary 1.0\n").is_err());
        assert!(parse_ply("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n").is_err());
    }

    #[test]
    fn depth_png_inverts_through_the_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let mut depth = vec![9.0f32; 16];
        let mut mask = vec![0.0f32; 16];
        let values = [3.0f32, 3.5, 4.0, 4.9];
        for (k, v) in values.iter().enumerate() {
            depth[k * 4 + 1] = *v;
            mask[k * 4 + 1] = 1.0;
        }
        let view = DepthMaskView::new(4, 4, depth.clone(), mask.clone(), true).unwrap();
        let png = dir.path().join("view0.png");
        let meta_path = dir.path().join("view0.json");
        let meta = write_depth_png(&png, &meta_path, &view, 9.0).unwrap();

        let loaded = image::open(&png).unwrap().into_luma16();
        assert_eq!(loaded.width(), 4);
        let sidecar: DepthPngMeta =
            serde_json::from_str(&fs::read_to_string(&meta_path).unwrap()).unwrap();
        assert_eq!(sidecar, meta);

        for (i, pixel) in loaded.pixels().enumerate() {
            let value = pixel.0[0];
            if mask[i] == 0.0 {
                assert_eq!(value, 0, "background must be 0");
            } else {
                assert!(value >= 1);
                let recovered = meta.offset + (value - 1) as f64 * meta.scale;
                assert!(
                    (recovered - depth[i] as f64).abs() <= meta.scale / 2.0 + 1e-9,
                    "pixel {i}: {recovered} vs {}",
                    depth[i]
                );
            }
        }
    }

    #[test]
    fn constant_depth_png_is_flat_but_lit() {
        let dir = tempfile::tempdir().unwrap();
        let view = DepthMaskView::new(2, 2, vec![3.5; 4], vec![1.0; 4], true).unwrap();
        let png = dir.path().join("flat.png");
        let meta = write_depth_png(&png, &dir.path().join("flat.json"), &view, 9.0).unwrap();
        assert_eq!(meta.scale, 0.0);
        let loaded = image::open(&png).unwrap().into_luma16();
        assert!(loaded.pixels().all(|p| p.0[0] == 1));
    }
}
