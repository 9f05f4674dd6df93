//! Subcommand implementations. Each resolves its options from flags plus
//! the config bag (flags win), rejects leftover config keys, then runs.

use crate::{ply, require, ConfigBag, EvalArgs, ExportPlyArgs, GenDataArgs, RenderArgs, TrainArgs};
use planereg_core::dataset::{self, LoadedFrame, Split, WriteOptions};
use planereg_core::field::VoxelField;
use planereg_core::imageio;
use planereg_core::metrics::{
    append_report_csv, chamfer, csv_line, filtered_point_pair, plane_sigma_detailed, psnr_images,
    ssim_image, GeoEvalConfig, GeoEvalReport, LabeledRay, ReportRow, DEFAULT_SSIM_WINDOW,
    REPORT_HEADER,
};
use planereg_core::render::{far_bound, render_image, Camera, Pose};
use planereg_core::trainer::{fit, TrainConfig};
use planereg_core::{Error, Result};
use serde::Deserialize;
use std::path::{Path, PathBuf};

pub fn gen_data(args: GenDataArgs, mut bag: ConfigBag) -> Result<()> {
    let preset = require(args.preset.or(bag.take_string("preset")?), "preset")?;
    let out = require(args.out.or(bag.take_path("out")?), "out")?;
    let frames = args.frames.or(bag.take_usize("frames")?).unwrap_or(15);
    let seed = args.seed.or(bag.take_u64("seed")?).unwrap_or(0);
    let width = args
        .width
        .or(bag.take_u32("width")?)
        .unwrap_or(dataset::DEFAULT_WIDTH);
    let height = args
        .height
        .or(bag.take_u32("height")?)
        .unwrap_or(dataset::DEFAULT_HEIGHT);
    let defaults = WriteOptions::default();
    let opts = WriteOptions {
        dropout: args
            .dropout
            .or(bag.take_f64("dropout")?)
            .unwrap_or(defaults.dropout),
        seed,
        label_noise: args
            .label_noise
            .or(bag.take_f64("label-noise")?)
            .unwrap_or(defaults.label_noise),
    };
    bag.finish()?;

    let (scene, cameras) =
        dataset::preset_scene_and_trajectory(&preset, frames, seed, width, height)?;
    let manifest = dataset::write_dataset(&scene, &cameras, &out, &opts)?;
    let n_train = manifest
        .frames
        .iter()
        .filter(|f| f.split == Split::Train)
        .count();
    println!(
        "wrote dataset \"{}\" to {}: {} train / {} val frames at {}x{}",
        manifest.scene,
        out.display(),
        n_train,
        manifest.frames.len() - n_train,
        width,
        height
    );
    Ok(())
}

pub fn train(args: TrainArgs, mut bag: ConfigBag) -> Result<()> {
    let data = require(args.data.or(bag.take_path("data")?), "data")?;
    let out = require(args.out.or(bag.take_path("out")?), "out")?;
    let d = TrainConfig::default();
    let grid = args
        .grid_res
        .or(bag.take_usize("grid-res")?)
        .unwrap_or(d.grid_resolution[0]);
    let mut weights = d.weights.clone();
    if let Some(v) = args.lambda0.or(bag.take_f64("lambda0")?) {
        weights.lambda0 = v;
    }
    if let Some(v) = args.lambda1.or(bag.take_f64("lambda1")?) {
        weights.lambda1 = v;
    }
    if let Some(v) = args.svd_delay.or(bag.take_usize("svd-delay")?) {
        weights.svd_delay_epochs = v;
    }
    let mut cfg = TrainConfig {
        epochs: args.epochs.or(bag.take_usize("epochs")?).unwrap_or(d.epochs),
        batch_patches: args
            .batch_patches
            .or(bag.take_usize("batch-patches")?)
            .unwrap_or(d.batch_patches),
        patch_size: args
            .patch_size
            .or(bag.take_u32("patch-size")?)
            .unwrap_or(d.patch_size),
        lr_start: args
            .lr_start
            .or(bag.take_f64("lr-start")?)
            .unwrap_or(d.lr_start),
        lr_end: args.lr_end.or(bag.take_f64("lr-end")?).unwrap_or(d.lr_end),
        weights,
        n_samples_train: args
            .n_samples_train
            .or(bag.take_usize("n-samples-train")?)
            .unwrap_or(d.n_samples_train),
        n_samples_eval: args
            .n_samples_eval
            .or(bag.take_usize("n-samples-eval")?)
            .unwrap_or(d.n_samples_eval),
        early_stop_patience: args
            .patience
            .or(bag.take_usize("patience")?)
            .unwrap_or(d.early_stop_patience),
        min_improvement_db: d.min_improvement_db,
        seed: args.seed.or(bag.take_u64("seed")?).unwrap_or(d.seed),
        grid_resolution: [grid, grid, grid],
        t_near: args.t_near.or(bag.take_f64("t-near")?).unwrap_or(d.t_near),
    };
    if args.no_svd || bag.take_bool("no-svd")? {
        cfg = cfg.with_no_svd();
    }
    if args.no_dssim || bag.take_bool("no-dssim")? {
        cfg = cfg.with_no_dssim();
    }
    if args.ds_baseline || bag.take_bool("ds-baseline")? {
        cfg = cfg.with_ds_baseline();
    }
    bag.finish()?;

    let ds = dataset::load_dataset(&data)?;
    let result = fit(&ds, &cfg, &out)?;
    println!(
        "best epoch {}: val PSNR {:.3} dB ({} epochs run, {:.1}s)",
        result.best_epoch, result.best_psnr, result.epochs_run, result.wall_seconds
    );
    Ok(())
}

/// All labeled rays of the given frames whose class is listed and whose
/// reference depth is a surface hit.
fn labeled_rays(frames: &[LoadedFrame], classes: &[u8]) -> Vec<LabeledRay> {
    let mut rays = Vec::new();
    for f in frames {
        for y in 0..f.camera.height {
            for x in 0..f.camera.width {
                let class = f.classes.get(x, y);
                let depth = f.depth.get(x, y);
                if depth > 0.0 && classes.contains(&class) {
                    rays.push(LabeledRay {
                        ray: f.camera.ray_through_pixel(x as f64, y as f64),
                        gt_depth: depth,
                        class,
                    });
                }
            }
        }
    }
    rays
}

pub fn eval(args: EvalArgs, mut bag: ConfigBag) -> Result<()> {
    let data = require(args.data.or(bag.take_path("data")?), "data")?;
    let checkpoint = require(args.checkpoint.or(bag.take_path("checkpoint")?), "checkpoint")?;
    let out_csv = require(args.out_csv.or(bag.take_path("out-csv")?), "out-csv")?;
    let out_json = args.out_json.or(bag.take_path("out-json")?);
    let variant = args
        .variant
        .or(bag.take_string("variant")?)
        .unwrap_or_else(|| "full".into());
    let n_samples = args.n_samples.or(bag.take_usize("n-samples")?).unwrap_or(192);
    let t_near = args.t_near.or(bag.take_f64("t-near")?).unwrap_or(0.05);
    bag.finish()?;

    let ds = dataset::load_dataset(&data)?;
    let field = VoxelField::load_checkpoint(&checkpoint)?;
    let frames = ds.load_split(Split::Val)?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }

    let mut psnr = 0.0;
    let mut ssim = 0.0;
    for f in &frames {
        let t_far = far_bound(&field.bbox, f.camera.pose.position);
        let (rgb, _) = render_image(&field, &f.camera, n_samples, t_near, t_far);
        psnr += psnr_images(&rgb, &f.rgb)?;
        ssim += ssim_image(&rgb, &f.rgb, DEFAULT_SSIM_WINDOW)?;
    }
    psnr /= frames.len() as f64;
    ssim /= frames.len() as f64;

    let geocfg = GeoEvalConfig::default();
    let rays = labeled_rays(&frames, &geocfg.eval_classes);
    let (pred, gt) = filtered_point_pair(&field, &rays, &geocfg.eval_classes, n_samples, t_near)?;
    let cd = chamfer(&pred, &gt)?;
    let sigma = plane_sigma_detailed(&pred, &gt, &geocfg)?;
    let report = GeoEvalReport {
        chamfer: cd,
        p_sigma: sigma.mean,
        psnr,
        ssim,
        n_points: pred.len(),
        n_cells: sigma.cells.len(),
        cells: sigma.cells,
    };
    let row = ReportRow {
        scene: ds.manifest.scene.clone(),
        variant,
        report,
    };
    append_report_csv(&out_csv, std::slice::from_ref(&row))?;
    if let Some(path) = out_json {
        let text = serde_json::to_string_pretty(&row.report).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    println!("{REPORT_HEADER}");
    println!("{}", csv_line(&row));
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFileIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    intrinsics: PoseFileIntrinsics,
    /// Row-major 4x4 camera-to-world matrices.
    poses: Vec<[[f64; 4]; 4]>,
}

fn load_pose_file(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PoseFile = serde_json::from_str(&text).map_err(|e| Error::InvalidData {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let k = &file.intrinsics;
    if k.width == 0 || k.height == 0 || !(k.fx.is_finite() && k.fx != 0.0) || !k.fy.is_finite() {
        return Err(Error::InvalidData {
            path: path.to_path_buf(),
            reason: "intrinsics must have nonzero size and finite focal lengths".into(),
        });
    }
    file.poses
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let pose = Pose::from_matrix(m).map_err(|e| Error::InvalidData {
                path: path.to_path_buf(),
                reason: format!("pose {i}: {e}"),
            })?;
            Ok(Camera {
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
                width: k.width,
                height: k.height,
                pose,
            })
        })
        .collect()
}

pub fn render(args: RenderArgs, mut bag: ConfigBag) -> Result<()> {
    let checkpoint = require(args.checkpoint.or(bag.take_path("checkpoint")?), "checkpoint")?;
    let poses = require(args.poses.or(bag.take_string("poses")?), "poses")?;
    let data = args.data.or(bag.take_path("data")?);
    let out = require(args.out.or(bag.take_path("out")?), "out")?;
    let n_samples = args.n_samples.or(bag.take_usize("n-samples")?).unwrap_or(192);
    let t_near = args.t_near.or(bag.take_f64("t-near")?).unwrap_or(0.05);
    bag.finish()?;

    let field = VoxelField::load_checkpoint(&checkpoint)?;
    let cameras: Vec<(usize, Camera)> = if poses == "val" {
        let data = require(data, "data")?;
        let ds = dataset::load_dataset(&data)?;
        ds.split_frames(Split::Val)
            .into_iter()
            .map(|i| (i, ds.camera(i).clone()))
            .collect()
    } else {
        load_pose_file(Path::new(&poses))?
            .into_iter()
            .enumerate()
            .collect()
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for (i, cam) in &cameras {
        let t_far = far_bound(&field.bbox, cam.pose.position);
        let (rgb, depth) = render_image(&field, cam, n_samples, t_near, t_far);
        imageio::save_rgb_png(&out.join(format!("rgb_{i:04}.png")), &rgb)?;
        imageio::save_depth_png16(&out.join(format!("depth_{i:04}.png")), &depth)?;
    }
    println!("rendered {} poses to {}", cameras.len(), out.display());
    Ok(())
}

/// The reference cloud lands next to the predicted one, tagged _gt.
fn gt_sibling(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = out
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ply".into());
    out.with_file_name(format!("{stem}_gt.{ext}"))
}

pub fn export_ply(args: ExportPlyArgs, mut bag: ConfigBag) -> Result<()> {
    let checkpoint = require(args.checkpoint.or(bag.take_path("checkpoint")?), "checkpoint")?;
    let data = require(args.data.or(bag.take_path("data")?), "data")?;
    let out = require(args.out.or(bag.take_path("out")?), "out")?;
    let classes = args
        .classes
        .or(bag.take_string("classes")?)
        .unwrap_or_else(|| "road,lane,sidewalk".into());
    let n_samples = args.n_samples.or(bag.take_usize("n-samples")?).unwrap_or(192);
    let t_near = args.t_near.or(bag.take_f64("t-near")?).unwrap_or(0.05);
    bag.finish()?;

    let ds = dataset::load_dataset(&data)?;
    let field = VoxelField::load_checkpoint(&checkpoint)?;
    let mut ids = Vec::new();
    for name in classes.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let def = ds.manifest.classes.iter().find(|c| c.name == name);
        match def {
            Some(c) => ids.push(c.id),
            None => {
                let known: Vec<&str> =
                    ds.manifest.classes.iter().map(|c| c.name.as_str()).collect();
                return Err(Error::InvalidArgument(format!(
                    "unknown class \"{name}\" (available: {})",
                    known.join(", ")
                )));
            }
        }
    }

    let frames: Result<Vec<LoadedFrame>> = (0..ds.manifest.frames.len())
        .map(|i| ds.load_frame(i))
        .collect();
    let rays = labeled_rays(&frames?, &ids);
    let (pred, gt) = filtered_point_pair(&field, &rays, &ids, n_samples, t_near)?;
    let colors: Vec<[u8; 3]> = rays
        .iter()
        .filter(|r| ids.contains(&r.class))
        .map(|r| ply::class_color(r.class))
        .collect();
    ply::write_ply(&out, &pred, &colors)?;
    let gt_out = gt_sibling(&out);
    ply::write_ply(&gt_out, &gt, &colors)?;
    println!(
        "wrote {} points to {} and {}",
        pred.len(),
        out.display(),
        gt_out.display()
    );
    Ok(())
}
