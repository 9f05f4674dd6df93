//! Patch-batch training: stratified ray rendering, loss assembly, adaptive
//! moment updates under a cosine learning-rate schedule, and the epoch loop
//! with validation-driven early stopping.
//!
//! Determinism contract: every random draw is keyed on (seed, step) or
//! (seed, step, patch) through a mixing function, and per-patch gradients
//! are accumulated into a fixed number of chunks merged in chunk order, so
//! results are bit-identical for any worker count.

use crate::dataset::{Dataset, LoadedFrame, Split};
use crate::error::{Error, Result};
use crate::field::{FieldInit, ParamGrad, VoxelField};
use crate::losses::{patch_eligible, total_loss, LossWeights, Regularizer, SemanticGroups};
use crate::math::{mix_seed, Vec3};
use crate::metrics::{mse_images, psnr_from_mse};
use crate::render::{self, far_bound, rays_for_patch, RayWork};
use rand::Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Gradient accumulation chunk count; fixed so the merge order (and thus
/// every rounding) is independent of how many workers run.
const GRAD_CHUNKS: usize = 16;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_patches: usize,
    pub patch_size: u32,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weights: LossWeights,
    pub n_samples_train: usize,
    pub n_samples_eval: usize,
    pub early_stop_patience: usize,
    /// Validation PSNR must improve by more than this many dB to reset the
    /// patience counter.
    pub min_improvement_db: f64,
    pub seed: u64,
    pub grid_resolution: [usize; 3],
    pub t_near: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_patches: 128,
            patch_size: 20,
            lr_start: 1e-2,
            lr_end: 1e-4,
            weights: LossWeights::default(),
            n_samples_train: 64,
            n_samples_eval: 192,
            early_stop_patience: 10,
            min_improvement_db: 0.01,
            seed: 0,
            grid_resolution: [64, 64, 64],
            t_near: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.epochs > 0, "epochs"),
            (self.batch_patches > 0, "batch_patches"),
            (self.patch_size >= 2, "patch_size"),
            (self.lr_start > 0.0, "lr_start"),
            (self.lr_end > 0.0, "lr_end"),
            (self.n_samples_train >= 2, "n_samples_train"),
            (self.n_samples_eval >= 2, "n_samples_eval"),
            (self.early_stop_patience > 0, "early_stop_patience"),
            (self.t_near > 0.0, "t_near"),
            (self.grid_resolution.iter().all(|&r| r >= 2), "grid_resolution"),
        ];
        for (ok, name) in positive {
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "train config field {name} is out of range"
                )));
            }
        }
        if self.lr_end > self.lr_start {
            return Err(Error::InvalidArgument(format!(
                "lr_end {} exceeds lr_start {}",
                self.lr_end, self.lr_start
            )));
        }
        Ok(())
    }

    pub fn with_no_svd(mut self) -> Self {
        self.weights.lambda1 = 0.0;
        self
    }

    pub fn with_no_dssim(mut self) -> Self {
        self.weights.lambda0 = 0.0;
        self
    }

    pub fn with_ds_baseline(mut self) -> Self {
        self.weights.regularizer = Regularizer::DepthSmoothness;
        self
    }
}

/// lr_end + 0.5 (lr_start - lr_end)(1 + cos(pi step / total)).
pub fn cosine_lr(step: u64, total_steps: u64, lr_start: f64, lr_end: f64) -> f64 {
    let frac = if total_steps == 0 {
        1.0
    } else {
        step as f64 / total_steps as f64
    };
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adaptive moment estimates over the field parameters.
#[derive(Debug)]
pub struct OptimizerState {
    m: ParamGrad,
    v: ParamGrad,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(field: &VoxelField) -> OptimizerState {
        OptimizerState {
            m: ParamGrad::zeros(field),
            v: ParamGrad::zeros(field),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected moment update at the given learning rate.
    pub fn update(&mut self, field: &mut VoxelField, grad: &ParamGrad, lr: f64) {
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        let apply = |params: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / b1c;
                let vhat = v[i] / b2c;
                params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        };
        apply(
            &mut field.density_raw,
            &grad.density,
            &mut self.m.density,
            &mut self.v.density,
        );
        apply(
            &mut field.color_raw,
            &grad.color,
            &mut self.m.color,
            &mut self.v.color,
        );
    }
}

/// One training patch: a frame index and the patch top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRef {
    pub frame: usize,
    pub x: u32,
    pub y: u32,
}

/// The per-step batch sampler. Uniform over frames, then uniform over all
/// fully-inside top-left positions.
pub fn sample_patch_batch(
    frames: &[LoadedFrame],
    n_patches: usize,
    patch_size: u32,
    rng: &mut crate::geometry::SeedRng,
) -> Result<Vec<PatchRef>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    for f in frames {
        if f.camera.width < patch_size || f.camera.height < patch_size {
            return Err(Error::InvalidArgument(format!(
                "frame {} is {}x{}, smaller than the {patch_size}-pixel patch",
                f.index, f.camera.width, f.camera.height
            )));
        }
    }
    Ok((0..n_patches)
        .map(|_| {
            let frame = rng.gen_range(0..frames.len());
            let cam = &frames[frame].camera;
            PatchRef {
                frame,
                x: rng.gen_range(0..=cam.width - patch_size),
                y: rng.gen_range(0..=cam.height - patch_size),
            }
        })
        .collect())
}

/// The rng that seeds one step's batch sampling.
pub fn step_rng(seed: u64, step: u64) -> crate::geometry::SeedRng {
    crate::geometry::SeedRng::seed_from_u64(mix_seed(mix_seed(seed, 0xBA7C4), step))
}

/// Per-step training record; one JSON line per step in the log. `svd` holds
/// the active regularizer's batch mean (0 when not applied this step).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub epoch: usize,
    pub mse: f64,
    pub dssim: f64,
    pub svd: f64,
    pub total: f64,
    pub eligible_fraction: f64,
    #[serde(skip)]
    pub applied_patches: usize,
}

struct ChunkAcc {
    mse: f64,
    dssim: f64,
    reg: f64,
    eligible: usize,
    applied: usize,
}

/// Loss and parameter gradient of one batch. The photometric terms average
/// over all patches; the regularizer averages over the patches it applies
/// to. Exposed separately from the optimizer step so the whole pipeline can
/// be checked against finite differences.
pub fn batch_loss_and_grad(
    field: &VoxelField,
    frames: &[LoadedFrame],
    groups: &SemanticGroups,
    batch: &[PatchRef],
    cfg: &TrainConfig,
    epoch: usize,
    step: u64,
) -> Result<(StepStats, ParamGrad)> {
    let s = cfg.patch_size;
    let n_pix = (s * s) as usize;
    let b = batch.len();

    // The regularizer's averaging set is known before rendering: patch
    // eligibility depends only on semantic labels.
    let reg_on = epoch >= cfg.weights.svd_delay_epochs && cfg.weights.lambda1 != 0.0;
    let mut applied = 0usize;
    for p in batch {
        let classes = patch_classes(&frames[p.frame], p, s);
        if patch_eligible(&classes, groups).is_some() {
            applied += 1;
        }
    }
    let applied = if reg_on { applied } else { 0 };
    let scale_rgb = 1.0 / b as f64;
    let scale_depth = if applied > 0 {
        1.0 / applied as f64
    } else {
        0.0
    };

    let chunk_size = b.div_ceil(GRAD_CHUNKS);
    let results: Result<Vec<(ChunkAcc, ParamGrad)>> = batch
        .par_chunks(chunk_size)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut grad = ParamGrad::zeros(field);
            let mut acc = ChunkAcc {
                mse: 0.0,
                dssim: 0.0,
                reg: 0.0,
                eligible: 0,
                applied: 0,
            };
            let mut works: Vec<RayWork> = (0..n_pix).map(|_| RayWork::new()).collect();
            let mut pred_rgb = vec![Vec3::ZERO; n_pix];
            let mut pred_depth = vec![0.0; n_pix];
            for (pi, p) in chunk.iter().enumerate() {
                let global_idx = ci * chunk_size + pi;
                let frame = &frames[p.frame];
                let rays = rays_for_patch(&frame.camera, (p.x, p.y), s)?;
                let t_far = far_bound(&field.bbox, frame.camera.pose.position);
                let patch_seed = mix_seed(
                    mix_seed(mix_seed(cfg.seed, 0x5A3), step),
                    global_idx as u64,
                );
                for (r, ray) in rays.iter().enumerate() {
                    let ts = render::sample_ray(
                        cfg.n_samples_train,
                        cfg.t_near,
                        t_far,
                        true,
                        mix_seed(patch_seed, r as u64),
                    );
                    let out = render::render_ray_forward(field, ray, &ts, t_far, &mut works[r]);
                    pred_rgb[r] = out.color;
                    pred_depth[r] = out.depth;
                }
                let gt_rgb = patch_rgb(frame, p, s);
                let classes = patch_classes(frame, p, s);
                let loss = total_loss(
                    &pred_rgb,
                    &gt_rgb,
                    &pred_depth,
                    &rays,
                    &classes,
                    groups,
                    &cfg.weights,
                    epoch,
                    s as usize,
                )?;
                if !loss.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        epoch,
                        detail: format!(
                            "patch at frame {} ({}, {}): mse {} dssim {} reg {:?}",
                            p.frame, p.x, p.y, loss.mse, loss.dssim, loss.reg
                        ),
                    });
                }
                for r in 0..n_pix {
                    render::render_ray_backward_cached(
                        field,
                        &works[r],
                        loss.d_rgb[r] * scale_rgb,
                        loss.d_depth[r] * scale_depth,
                        &mut grad,
                    );
                }
                acc.mse += loss.mse;
                acc.dssim += loss.dssim;
                if loss.eligible {
                    acc.eligible += 1;
                }
                if let Some(v) = loss.reg {
                    acc.reg += v;
                    acc.applied += 1;
                }
            }
            Ok((acc, grad))
        })
        .collect();

    let results = results?;
    let mut grad = ParamGrad::zeros(field);
    let mut mse = 0.0;
    let mut dssim = 0.0;
    let mut reg = 0.0;
    let mut eligible = 0;
    let mut applied_seen = 0;
    for (acc, g) in &results {
        grad.add_assign(g);
        mse += acc.mse;
        dssim += acc.dssim;
        reg += acc.reg;
        eligible += acc.eligible;
        applied_seen += acc.applied;
    }
    debug_assert_eq!(applied_seen, applied);
    mse /= b as f64;
    dssim /= b as f64;
    let svd = if applied_seen > 0 {
        reg / applied_seen as f64
    } else {
        0.0
    };
    let total = mse + cfg.weights.lambda0 * dssim + cfg.weights.lambda1 * svd;
    Ok((
        StepStats {
            step,
            epoch,
            mse,
            dssim,
            svd,
            total,
            eligible_fraction: eligible as f64 / b as f64,
            applied_patches: applied_seen,
        },
        grad,
    ))
}

fn patch_rgb(frame: &LoadedFrame, p: &PatchRef, s: u32) -> Vec<Vec3> {
    let mut out = Vec::with_capacity((s * s) as usize);
    for dy in 0..s {
        for dx in 0..s {
            out.push(frame.rgb.get(p.x + dx, p.y + dy));
        }
    }
    out
}

fn patch_classes(frame: &LoadedFrame, p: &PatchRef, s: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity((s * s) as usize);
    for dy in 0..s {
        for dx in 0..s {
            out.push(frame.classes.get(p.x + dx, p.y + dy));
        }
    }
    out
}

/// Samples a batch, computes its gradient, and applies one optimizer update
/// at the cosine-scheduled learning rate.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    field: &mut VoxelField,
    frames: &[LoadedFrame],
    groups: &SemanticGroups,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    epoch: usize,
    step: u64,
    total_steps: u64,
) -> Result<StepStats> {
    let mut rng = step_rng(cfg.seed, step);
    let batch = sample_patch_batch(frames, cfg.batch_patches, cfg.patch_size, &mut rng)?;
    let (stats, grad) = batch_loss_and_grad(field, frames, groups, &batch, cfg, epoch, step)?;
    let lr = cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end);
    opt.update(field, &grad, lr);
    Ok(stats)
}

/// Mean PSNR of deterministic validation renders against ground truth.
pub fn validation_psnr(
    field: &VoxelField,
    val_frames: &[LoadedFrame],
    n_samples: usize,
    t_near: f64,
) -> Result<f64> {
    if val_frames.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let mut acc = 0.0;
    for f in val_frames {
        let t_far = far_bound(&field.bbox, f.camera.pose.position);
        let (rgb, _) = render::render_image(field, &f.camera, n_samples, t_near, t_far);
        acc += psnr_from_mse(mse_images(&rgb, &f.rgb)?);
    }
    Ok(acc / val_frames.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_psnr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct FitResult {
    /// The best-validation field (reloaded from the best checkpoint).
    pub field: VoxelField,
    pub best_epoch: usize,
    pub best_psnr: f64,
    pub epochs_run: usize,
    pub wall_seconds: f64,
    pub val_psnr_history: Vec<f64>,
}

/// Steps per epoch: enough batches to cover the training pixels once.
pub fn steps_per_epoch(train_pixels: u64, cfg: &TrainConfig) -> u64 {
    let per_step = (cfg.batch_patches as u64) * (cfg.patch_size as u64).pow(2);
    train_pixels.div_ceil(per_step).max(1)
}

/// The full training loop: per-epoch validation PSNR, early stopping when it
/// stops improving, a checkpoint per epoch plus a rolling best checkpoint,
/// and a JSON-lines log of every step.
pub fn fit(ds: &Dataset, cfg: &TrainConfig, out_dir: &Path) -> Result<FitResult> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let started = std::time::Instant::now();

    let train = ds.load_split(Split::Train)?;
    let val = ds.load_split(Split::Val)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let groups = ds.manifest.semantic_groups.clone();
    let mut field = VoxelField::init(
        cfg.grid_resolution,
        ds.manifest.bbox,
        &FieldInit {
            seed: cfg.seed,
            ..FieldInit::default()
        },
    )?;
    let mut opt = OptimizerState::new(&field);

    let spe = steps_per_epoch(ds.split_pixel_count(Split::Train), cfg);
    let total_steps = spe * cfg.epochs as u64;
    let log_path = out_dir.join("log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );

    let best_path = out_dir.join("best.plnf");
    let mut best_psnr = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stall = 0usize;
    let mut history = Vec::new();
    let mut epochs_run = 0;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for _ in 0..spe {
            let stats = train_step(
                &mut field, &train, &groups, &mut opt, cfg, epoch, step, total_steps,
            )?;
            let line = serde_json::to_string(&stats).map_err(|e| Error::Json {
                path: log_path.clone(),
                source: e,
            })?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            step += 1;
        }
        epochs_run = epoch + 1;
        let psnr = validation_psnr(&field, &val, cfg.n_samples_eval, cfg.t_near)?;
        history.push(psnr);
        field.save_checkpoint(&out_dir.join(format!("ckpt_epoch{epoch:03}.plnf")))?;
        if psnr > best_psnr + cfg.min_improvement_db {
            best_psnr = psnr;
            best_epoch = epoch;
            stall = 0;
            field.save_checkpoint(&best_path)?;
        } else {
            stall += 1;
            if stall >= cfg.early_stop_patience {
                break;
            }
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let wall_seconds = started.elapsed().as_secs_f64();
    let summary = TrainSummary {
        best_epoch,
        best_psnr,
        wall_seconds,
    };
    let sum_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Json {
        path: sum_path.clone(),
        source: e,
    })?;
    std::fs::write(&sum_path, text).map_err(|e| Error::io(&sum_path, e))?;

    let best_field = VoxelField::load_checkpoint(&best_path)?;
    Ok(FitResult {
        field: best_field,
        best_epoch,
        best_psnr,
        epochs_run,
        wall_seconds,
        val_psnr_history: history,
    })
}
