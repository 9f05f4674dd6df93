//! Training losses over rendered pixel patches: photometric MSE, structural
//! dissimilarity with its exact gradient, and two geometry regularizers that
//! act on rendered depth. The plane loss lifts a patch's rays to 3D points
//! and penalizes the smallest singular value of the centered point matrix;
//! the depth-smoothness baseline penalizes squared neighbor differences of
//! raw depth instead. Regularizers only apply to patches whose semantic
//! classes all fall in one configured group.

use crate::error::{Error, Result};
use crate::geometry;
use crate::math::Vec3;
use crate::render::Ray;
use serde::{Deserialize, Serialize};

/// SSIM stabilizers for unit dynamic range: (0.01 L)^2 and (0.03 L)^2.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

pub const DEFAULT_LAMBDA0: f64 = 0.1;
pub const DEFAULT_LAMBDA1: f64 = 0.01;
pub const DEFAULT_SVD_DELAY_EPOCHS: usize = 1;

/// Mean squared error over all pixels and channels, with its gradient with
/// respect to the prediction.
pub fn mse_loss(pred: &[Vec3], gt: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "mse: prediction has {} pixels, reference {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = (3 * pred.len()) as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let d = *p - *g;
        sum += d.dot(d);
        grad.push(d * (2.0 / n));
    }
    Ok((sum / n, grad))
}

/// Per-channel moments of one patch pair under a single uniform window.
struct ChannelStats {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn channel_stats(x: &[Vec3], y: &[Vec3], ch: usize) -> ChannelStats {
    let pick = |v: &Vec3| match ch {
        0 => v.x,
        1 => v.y,
        _ => v.z,
    };
    let n = x.len() as f64;
    let mean_x = x.iter().map(|v| pick(v)).sum::<f64>() / n;
    let mean_y = y.iter().map(|v| pick(v)).sum::<f64>() / n;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = pick(a) - mean_x;
        let dy = pick(b) - mean_y;
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    ChannelStats {
        mean_x,
        mean_y,
        var_x: var_x / n,
        var_y: var_y / n,
        cov: cov / n,
    }
}

fn ssim_channel(s: &ChannelStats) -> f64 {
    let a1 = 2.0 * s.mean_x * s.mean_y + SSIM_C1;
    let a2 = 2.0 * s.cov + SSIM_C2;
    let b1 = s.mean_x * s.mean_x + s.mean_y * s.mean_y + SSIM_C1;
    let b2 = s.var_x + s.var_y + SSIM_C2;
    (a1 * a2) / (b1 * b2)
}

/// Structural similarity of two patches under one uniform window spanning the
/// whole patch: population moments per channel, channel scores averaged.
pub fn ssim(x: &[Vec3], y: &[Vec3]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "ssim: patches have {} and {} pixels",
            x.len(),
            y.len()
        )));
    }
    let mut acc = 0.0;
    for ch in 0..3 {
        acc += ssim_channel(&channel_stats(x, y, ch));
    }
    Ok(acc / 3.0)
}

/// Structural dissimilarity (1 - ssim) / 2 and its exact gradient with
/// respect to the prediction `x`.
pub fn dssim_with_gradient(x: &[Vec3], y: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "dssim: patches have {} and {} pixels",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mut ssim_sum = 0.0;
    let mut grad = vec![Vec3::ZERO; x.len()];
    for ch in 0..3 {
        let st = channel_stats(x, y, ch);
        let a1 = 2.0 * st.mean_x * st.mean_y + SSIM_C1;
        let a2 = 2.0 * st.cov + SSIM_C2;
        let b1 = st.mean_x * st.mean_x + st.mean_y * st.mean_y + SSIM_C1;
        let b2 = st.var_x + st.var_y + SSIM_C2;
        let s = (a1 * a2) / (b1 * b2);
        ssim_sum += s;
        let pick = |v: &Vec3| match ch {
            0 => v.x,
            1 => v.y,
            _ => v.z,
        };
        // dS/dx_i, then the -1/6 factor for mean-of-channels and (1-S)/2.
        let c_common = 2.0 / (n * b1 * b2);
        for (i, g) in grad.iter_mut().enumerate() {
            let xi = pick(&x[i]) - st.mean_x;
            let yi = pick(&y[i]) - st.mean_y;
            let ds = c_common * (st.mean_y * a2 + a1 * yi)
                - s * (2.0 * st.mean_x) / (n * b1)
                - s * (2.0 * xi) / (n * b2);
            let gd = -ds / 6.0;
            match ch {
                0 => g.x += gd,
                1 => g.y += gd,
                _ => g.z += gd,
            }
        }
    }
    Ok(((1.0 - ssim_sum / 3.0) / 2.0, grad))
}

/// Squared forward-difference penalty on a square depth patch: for every
/// (r, c) in the top-left (S-1) x (S-1) block, the squared difference to the
/// neighbor below and to the right. Returns the loss and its gradient.
pub fn depth_smoothness_loss(depths: &[f64], patch_size: usize) -> Result<(f64, Vec<f64>)> {
    if depths.len() != patch_size * patch_size {
        return Err(Error::ShapeMismatch(format!(
            "depth patch has {} values, expected {}^2",
            depths.len(),
            patch_size
        )));
    }
    let s = patch_size;
    let mut loss = 0.0;
    let mut grad = vec![0.0; depths.len()];
    for r in 0..s.saturating_sub(1) {
        for c in 0..s - 1 {
            let here = r * s + c;
            for other in [here + s, here + 1] {
                let d = depths[here] - depths[other];
                loss += d * d;
                grad[here] += 2.0 * d;
                grad[other] -= 2.0 * d;
            }
        }
    }
    Ok((loss, grad))
}

/// Plane loss on one patch: rays lifted to points origin + depth * dir, loss
/// is the smallest singular value of the centered point matrix.
#[derive(Debug, Clone)]
pub struct SvdLoss {
    pub sigma3: f64,
    /// d sigma3 / d depth per ray.
    pub d_depth: Vec<f64>,
    /// Smallest singular direction was nearly tied; gradient unreliable.
    pub ill_conditioned: bool,
}

pub fn svd_plane_loss(rays: &[Ray], depths: &[f64]) -> Result<SvdLoss> {
    if rays.len() != depths.len() {
        return Err(Error::ShapeMismatch(format!(
            "plane loss: {} rays vs {} depths",
            rays.len(),
            depths.len()
        )));
    }
    let points: Vec<Vec3> = rays
        .iter()
        .zip(depths)
        .map(|(r, &d)| r.at(d))
        .collect();
    let g = geometry::sigma3_with_gradient(&points)?;
    let d_depth = g
        .grad
        .iter()
        .zip(rays)
        .map(|(gp, r)| gp.dot(r.dir))
        .collect();
    Ok(SvdLoss {
        sigma3: g.sigma3,
        d_depth,
        ill_conditioned: g.ill_conditioned,
    })
}

/// Named class groups that may share one regularization plane. A class id
/// belongs to at most one group.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SemanticGroup {
    pub name: String,
    pub classes: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(try_from = "Vec<SemanticGroup>", into = "Vec<SemanticGroup>")]
pub struct SemanticGroups {
    groups: Vec<SemanticGroup>,
}

impl TryFrom<Vec<SemanticGroup>> for SemanticGroups {
    type Error = Error;
    fn try_from(groups: Vec<SemanticGroup>) -> Result<SemanticGroups> {
        SemanticGroups::new(groups)
    }
}

impl From<SemanticGroups> for Vec<SemanticGroup> {
    fn from(g: SemanticGroups) -> Vec<SemanticGroup> {
        g.groups
    }
}

impl SemanticGroups {
    pub fn new(groups: Vec<SemanticGroup>) -> Result<SemanticGroups> {
        let mut seen = [false; 256];
        for g in &groups {
            for &c in &g.classes {
                if seen[c as usize] {
                    return Err(Error::InvalidArgument(format!(
                        "class id {c} appears in more than one semantic group"
                    )));
                }
                seen[c as usize] = true;
            }
        }
        Ok(SemanticGroups { groups })
    }

    /// The default street grouping: road, lane markings, and sidewalk share
    /// the ground group.
    pub fn ground_default() -> SemanticGroups {
        SemanticGroups::new(vec![SemanticGroup {
            name: "ground".into(),
            classes: vec![1, 2, 3],
        }])
        .expect("static group table")
    }

    pub fn groups(&self) -> &[SemanticGroup] {
        &self.groups
    }

    pub fn group_of(&self, class: u8) -> Option<usize> {
        self.groups
            .iter()
            .position(|g| g.classes.contains(&class))
    }
}

/// Group index if every pixel class in the patch belongs to that same group,
/// None otherwise (including classes outside every group).
pub fn patch_eligible(classes: &[u8], groups: &SemanticGroups) -> Option<usize> {
    let first = classes.first()?;
    let g = groups.group_of(*first)?;
    for &c in &classes[1..] {
        if groups.group_of(c) != Some(g) {
            return None;
        }
    }
    Some(g)
}

/// Which geometry regularizer the total loss applies to eligible patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    SvdPlane,
    DepthSmoothness,
}

#[derive(Debug, Clone)]
pub struct LossWeights {
    /// Structural dissimilarity weight. Zero skips the SSIM pass entirely.
    pub lambda0: f64,
    /// Geometry regularizer weight. Zero skips it entirely.
    pub lambda1: f64,
    /// Epochs to wait before the regularizer switches on.
    pub svd_delay_epochs: usize,
    pub regularizer: Regularizer,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: DEFAULT_LAMBDA0,
            lambda1: DEFAULT_LAMBDA1,
            svd_delay_epochs: DEFAULT_SVD_DELAY_EPOCHS,
            regularizer: Regularizer::SvdPlane,
        }
    }
}

/// Loss of one rendered patch, with the gradients the trainer needs.
#[derive(Debug, Clone)]
pub struct PatchLoss {
    pub mse: f64,
    pub dssim: f64,
    /// Regularizer value, present only when it was applied to this patch.
    pub reg: Option<f64>,
    /// mse + lambda0 * dssim + lambda1 * reg (when applied).
    pub total: f64,
    pub eligible: bool,
    pub ill_conditioned: bool,
    /// Gradient of mse + lambda0 * dssim with respect to predicted rgb.
    pub d_rgb: Vec<Vec3>,
    /// Gradient of lambda1 * reg with respect to rendered depth; zeros when
    /// the regularizer was not applied.
    pub d_depth: Vec<f64>,
}

/// Assembles the per-patch loss. The regularizer applies only when the patch
/// is semantically eligible, the epoch has passed the warm-up delay, and
/// lambda1 is nonzero.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    pred_rgb: &[Vec3],
    gt_rgb: &[Vec3],
    pred_depth: &[f64],
    rays: &[Ray],
    classes: &[u8],
    groups: &SemanticGroups,
    weights: &LossWeights,
    epoch: usize,
    patch_size: usize,
) -> Result<PatchLoss> {
    let n = patch_size * patch_size;
    if pred_rgb.len() != n
        || gt_rgb.len() != n
        || pred_depth.len() != n
        || rays.len() != n
        || classes.len() != n
    {
        return Err(Error::ShapeMismatch(format!(
            "patch arrays must all have {n} entries"
        )));
    }
    let (mse, mut d_rgb) = mse_loss(pred_rgb, gt_rgb)?;
    let mut dssim = 0.0;
    if weights.lambda0 != 0.0 {
        let (d, g) = dssim_with_gradient(pred_rgb, gt_rgb)?;
        dssim = d;
        for (acc, gi) in d_rgb.iter_mut().zip(&g) {
            *acc += *gi * weights.lambda0;
        }
    }
    let eligible = patch_eligible(classes, groups).is_some();
    let apply_reg = eligible && epoch >= weights.svd_delay_epochs && weights.lambda1 != 0.0;
    let mut reg = None;
    let mut ill_conditioned = false;
    let mut d_depth = vec![0.0; n];
    if apply_reg {
        let (value, grad) = match weights.regularizer {
            Regularizer::SvdPlane => {
                let s = svd_plane_loss(rays, pred_depth)?;
                ill_conditioned = s.ill_conditioned;
                (s.sigma3, s.d_depth)
            }
            Regularizer::DepthSmoothness => depth_smoothness_loss(pred_depth, patch_size)?,
        };
        reg = Some(value);
        for (acc, g) in d_depth.iter_mut().zip(&grad) {
            *acc = weights.lambda1 * g;
        }
    }
    let total = mse + weights.lambda0 * dssim + weights.lambda1 * reg.unwrap_or(0.0);
    Ok(PatchLoss {
        mse,
        dssim,
        reg,
        total,
        eligible,
        ill_conditioned,
        d_rgb,
        d_depth,
    })
}
