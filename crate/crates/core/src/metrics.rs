//! Geometry and image-quality evaluation: semantically filtered point-cloud
//! extraction, Chamfer distance, plane standard deviation over ground cells,
//! PSNR, and sliding-window SSIM. Also writes the evaluation report rows.
//!
//! Chamfer uses squared distances in both directions, halved. The plane
//! metric bins both clouds into square (x, y) cells on the world ground
//! plane, estimates each cell's normal from the ground-truth points, and
//! averages the spread of predicted points along that normal.

use crate::error::{Error, Result};
use crate::field::VoxelField;
use crate::geometry::{self, RansacParams};
use crate::imageio::ImageRgbF;
use crate::losses::{SSIM_C1, SSIM_C2};
use crate::math::{mix_seed, Vec3};
use crate::render::{self, Ray};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const DEFAULT_SSIM_WINDOW: usize = 11;

/// Evaluation settings for the geometric metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeoEvalConfig {
    /// Class ids whose surfaces are expected to be flat.
    pub eval_classes: Vec<u8>,
    /// Side length of one ground cell in meters.
    pub patch_extent: f64,
    pub ransac: RansacParams,
    /// A cell is evaluated only if both clouds put at least this many points
    /// in it.
    pub min_points_per_patch: usize,
}

impl Default for GeoEvalConfig {
    fn default() -> Self {
        GeoEvalConfig {
            eval_classes: vec![1, 2, 3],
            patch_extent: 3.0,
            ransac: RansacParams::default(),
            min_points_per_patch: 20,
        }
    }
}

/// One evaluated ground cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellDiagnostic {
    /// Grid key: floor(x / extent), floor(y / extent).
    pub key: (i64, i64),
    pub n_pred: usize,
    pub n_gt: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaneSigma {
    pub mean: f64,
    pub cells: Vec<CellDiagnostic>,
}

/// Full evaluation result. Distances are in meters (chamfer in m²); the CSV
/// writer scales CD and P_sigma by 100.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeoEvalReport {
    pub chamfer: f64,
    pub p_sigma: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_points: usize,
    pub n_cells: usize,
    pub cells: Vec<CellDiagnostic>,
}

/// A ray with its reference depth and semantic label.
#[derive(Debug, Clone)]
pub struct LabeledRay {
    pub ray: Ray,
    pub gt_depth: f64,
    pub class: u8,
}

/// Renders depth along every ray whose label is in `classes` and returns the
/// predicted and reference point clouds in matching order.
pub fn filtered_point_pair(
    field: &VoxelField,
    rays: &[LabeledRay],
    classes: &[u8],
    n_samples: usize,
    t_near: f64,
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let kept: Vec<&LabeledRay> = rays
        .iter()
        .filter(|r| classes.contains(&r.class))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let pred: Vec<Vec3> = kept
        .par_iter()
        .map(|lr| {
            let t_far = render::far_bound(&field.bbox, lr.ray.origin);
            let ts = render::sample_ray(n_samples, t_near, t_far, false, 0);
            let out = render::render_ray(field, &lr.ray, &ts, t_far);
            lr.ray.at(out.depth)
        })
        .collect();
    let gt = kept.iter().map(|lr| lr.ray.at(lr.gt_depth)).collect();
    Ok((pred, gt))
}

/// Axis-aligned binary tree over points for nearest-neighbor queries. Leaves
/// agree with the quadratic reference path to floating-point exactness.
struct KdTree<'a> {
    pts: &'a [Vec3],
    /// Point indices arranged so each segment's midpoint splits it.
    order: Vec<u32>,
    /// Split axis per segment midpoint.
    axis: Vec<u8>,
}

fn coord(p: &Vec3, axis: u8) -> f64 {
    match axis {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    }
}

impl<'a> KdTree<'a> {
    fn build(pts: &'a [Vec3]) -> KdTree<'a> {
        let mut order: Vec<u32> = (0..pts.len() as u32).collect();
        let mut axis = vec![0u8; pts.len()];
        let mut stack = vec![(0usize, pts.len())];
        while let Some((lo, hi)) = stack.pop() {
            if hi - lo <= 1 {
                continue;
            }
            let seg = &mut order[lo..hi];
            let mut min = pts[seg[0] as usize];
            let mut max = min;
            for &i in seg.iter() {
                let p = pts[i as usize];
                min = min.min_elem(p);
                max = max.max_elem(p);
            }
            let ext = max - min;
            let ax = if ext.x >= ext.y && ext.x >= ext.z {
                0u8
            } else if ext.y >= ext.z {
                1
            } else {
                2
            };
            let mid = (hi - lo) / 2;
            seg.select_nth_unstable_by(mid, |&a, &b| {
                coord(&pts[a as usize], ax)
                    .partial_cmp(&coord(&pts[b as usize], ax))
                    .unwrap()
            });
            axis[lo + mid] = ax;
            stack.push((lo, lo + mid));
            stack.push((lo + mid + 1, hi));
        }
        KdTree { pts, order, axis }
    }

    /// Squared distance to the nearest stored point.
    fn nearest_sq(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.order.len(), &mut best);
        best
    }

    fn search(&self, q: Vec3, lo: usize, hi: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.pts[self.order[mid] as usize];
        let d = q - p;
        let dist = d.dot(d);
        if dist < *best {
            *best = dist;
        }
        if hi - lo == 1 {
            return;
        }
        let ax = self.axis[mid];
        let delta = coord(&q, ax) - coord(&p, ax);
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if delta * delta < *best {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn half_chamfer(from: &[Vec3], to: &KdTree) -> f64 {
    let mins: Vec<f64> = from.par_iter().map(|&p| to.nearest_sq(p)).collect();
    mins.iter().sum::<f64>() / (2.0 * from.len() as f64)
}

/// Symmetric mean of squared nearest-neighbor distances, each direction
/// halved.
pub fn chamfer(x: &[Vec3], y: &[Vec3]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let tx = KdTree::build(x);
    let ty = KdTree::build(y);
    Ok(half_chamfer(x, &ty) + half_chamfer(y, &tx))
}

/// Quadratic reference evaluation of the same distance, kept for
/// cross-checking the tree-accelerated path.
pub fn chamfer_brute_force(x: &[Vec3], y: &[Vec3]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let half = |from: &[Vec3], to: &[Vec3]| {
        from.iter()
            .map(|&p| {
                to.iter()
                    .map(|&q| {
                        let d = p - q;
                        d.dot(d)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / (2.0 * from.len() as f64)
    };
    Ok(half(x, y) + half(y, x))
}

fn cell_key(p: &Vec3, extent: f64) -> (i64, i64) {
    ((p.x / extent).floor() as i64, (p.y / extent).floor() as i64)
}

/// Mean spread of predicted points along per-cell reference normals; see the
/// module doc. Cells are evaluated in sorted key order with a cell-derived
/// RANSAC seed, so the result does not depend on map iteration order.
pub fn plane_sigma_detailed(
    x_pred: &[Vec3],
    y_gt: &[Vec3],
    cfg: &GeoEvalConfig,
) -> Result<PlaneSigma> {
    if cfg.patch_extent <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "patch extent must be positive, got {}",
            cfg.patch_extent
        )));
    }
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(i64, i64), (Vec<Vec3>, Vec<Vec3>)> = BTreeMap::new();
    for &p in x_pred {
        cells.entry(cell_key(&p, cfg.patch_extent)).or_default().0.push(p);
    }
    for &p in y_gt {
        cells.entry(cell_key(&p, cfg.patch_extent)).or_default().1.push(p);
    }
    let mut out = Vec::new();
    for (key, (pred, gt)) in &cells {
        if pred.len() < cfg.min_points_per_patch || gt.len() < cfg.min_points_per_patch {
            continue;
        }
        let mut params = cfg.ransac.clone();
        params.seed = mix_seed(mix_seed(cfg.ransac.seed, key.0 as u64), key.1 as u64);
        let plane = geometry::ransac_plane(gt, &params)?;
        let n = plane.fit.normal;
        let mean = pred.iter().map(|p| p.dot(n)).sum::<f64>() / pred.len() as f64;
        let var = pred
            .iter()
            .map(|p| {
                let d = p.dot(n) - mean;
                d * d
            })
            .sum::<f64>()
            / pred.len() as f64;
        out.push(CellDiagnostic {
            key: *key,
            n_pred: pred.len(),
            n_gt: gt.len(),
            sigma: var.sqrt(),
        });
    }
    if out.is_empty() {
        return Err(Error::NoEvaluablePatches);
    }
    let mean = out.iter().map(|c| c.sigma).sum::<f64>() / out.len() as f64;
    Ok(PlaneSigma { mean, cells: out })
}

pub fn plane_sigma(x_pred: &[Vec3], y_gt: &[Vec3], cfg: &GeoEvalConfig) -> Result<f64> {
    Ok(plane_sigma_detailed(x_pred, y_gt, cfg)?.mean)
}

/// Mean squared error over pixels and channels of two same-shaped images.
pub fn mse_images(a: &ImageRgbF, b: &ImageRgbF) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "images are {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut sum = 0.0;
    for (p, q) in a.pixels.iter().zip(&b.pixels) {
        let d = *p - *q;
        sum += d.dot(d);
    }
    Ok(sum / (3.0 * a.pixels.len() as f64))
}

/// 10 log10(1 / mse) for unit dynamic range, capped at 99 dB.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr_images(a: &ImageRgbF, b: &ImageRgbF) -> Result<f64> {
    Ok(psnr_from_mse(mse_images(a, b)?))
}

/// Per-channel summed-area tables over an image pair.
struct Sat {
    w: usize,
    sx: Vec<f64>,
    sy: Vec<f64>,
    sxx: Vec<f64>,
    syy: Vec<f64>,
    sxy: Vec<f64>,
}

impl Sat {
    fn build(a: &ImageRgbF, b: &ImageRgbF, ch: usize) -> Sat {
        let (w, h) = (a.width as usize, a.height as usize);
        let pick = |v: &Vec3| match ch {
            0 => v.x,
            1 => v.y,
            _ => v.z,
        };
        let n = (w + 1) * (h + 1);
        let mut sat = Sat {
            w: w + 1,
            sx: vec![0.0; n],
            sy: vec![0.0; n],
            sxx: vec![0.0; n],
            syy: vec![0.0; n],
            sxy: vec![0.0; n],
        };
        for r in 0..h {
            for c in 0..w {
                let x = pick(&a.pixels[r * w + c]);
                let y = pick(&b.pixels[r * w + c]);
                let i = (r + 1) * (w + 1) + (c + 1);
                let up = i - (w + 1);
                let left = i - 1;
                let diag = up - 1;
                sat.sx[i] = x + sat.sx[up] + sat.sx[left] - sat.sx[diag];
                sat.sy[i] = y + sat.sy[up] + sat.sy[left] - sat.sy[diag];
                sat.sxx[i] = x * x + sat.sxx[up] + sat.sxx[left] - sat.sxx[diag];
                sat.syy[i] = y * y + sat.syy[up] + sat.syy[left] - sat.syy[diag];
                sat.sxy[i] = x * y + sat.sxy[up] + sat.sxy[left] - sat.sxy[diag];
            }
        }
        sat
    }

    /// Sum of one table over rows r0..r0+k, cols c0..c0+k.
    fn window(&self, t: &[f64], r0: usize, c0: usize, k: usize) -> f64 {
        let (r1, c1) = (r0 + k, c0 + k);
        t[r1 * self.w + c1] - t[r0 * self.w + c1] - t[r1 * self.w + c0] + t[r0 * self.w + c0]
    }
}

/// Mean SSIM over all stride-1 square windows fully inside the image pair,
/// channels averaged per window.
pub fn ssim_image(a: &ImageRgbF, b: &ImageRgbF, window: usize) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "images are {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width as usize, a.height as usize);
    if window == 0 || w < window || h < window {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the {window}x{window} ssim window",
            a.width, a.height
        )));
    }
    let sats: Vec<Sat> = (0..3).map(|ch| Sat::build(a, b, ch)).collect();
    let k = window;
    let count = (k * k) as f64;
    let mut acc = 0.0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let mut s_win = 0.0;
            for sat in &sats {
                let mx = sat.window(&sat.sx, r, c, k) / count;
                let my = sat.window(&sat.sy, r, c, k) / count;
                let vx = (sat.window(&sat.sxx, r, c, k) / count - mx * mx).max(0.0);
                let vy = (sat.window(&sat.syy, r, c, k) / count - my * my).max(0.0);
                let cov = sat.window(&sat.sxy, r, c, k) / count - mx * my;
                let a1 = 2.0 * mx * my + SSIM_C1;
                let a2 = 2.0 * cov + SSIM_C2;
                let b1 = mx * mx + my * my + SSIM_C1;
                let b2 = vx + vy + SSIM_C2;
                s_win += (a1 * a2) / (b1 * b2);
            }
            acc += s_win / 3.0;
        }
    }
    Ok(acc / ((h - k + 1) * (w - k + 1)) as f64)
}

/// One line of the evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub scene: String,
    pub variant: String,
    pub report: GeoEvalReport,
}

pub const REPORT_HEADER: &str = "scene,variant,CD,P_sigma,PSNR,SSIM,LPIPS,n_points,n_cells";

/// One CSV line for a report row, without trailing newline. CD and P_sigma
/// are scaled by 100 (m²·10⁻² and cm); LPIPS is not computed and stays
/// "n/a".
pub fn csv_line(r: &ReportRow) -> String {
    format!(
        "{},{},{:.6},{:.6},{:.4},{:.6},n/a,{},{}",
        r.scene,
        r.variant,
        r.report.chamfer * 100.0,
        r.report.p_sigma * 100.0,
        r.report.psnr,
        r.report.ssim,
        r.report.n_points,
        r.report.n_cells,
    )
}

/// Appends rows to a CSV report, writing the header only when the file does
/// not exist yet.
pub fn append_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(REPORT_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&csv_line(r));
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
