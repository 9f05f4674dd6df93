//! Command-line front end: dataset generation, training, evaluation,
//! rendering, and point-cloud export.
//!
//! Exit codes: 0 success, 2 usage or input error, 1 internal error.

mod commands;
mod ply;

use clap::{Args, Parser, Subcommand};
use planereg_core::{Error, Result};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "planereg",
    version,
    about = "Voxel radiance field training with planar geometry regularization"
)]
struct Cli {
    /// Print errors as single-line JSON on stderr.
    #[arg(long, global = true)]
    json: bool,

    /// Worker thread cap (falls back to PLANEREG_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Flat key-value JSON file supplying defaults for this subcommand's
    /// flags (flags win; unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic stereo dataset for one scene preset.
    GenData(GenDataArgs),
    /// Train a voxel field on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint: geometry metrics plus image quality on the
    /// validation split.
    Eval(EvalArgs),
    /// Render RGB and depth images from a checkpoint.
    Render(RenderArgs),
    /// Export predicted and ground-truth point clouds as ASCII PLY.
    ExportPly(ExportPlyArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Scene preset: flat-road, slanted-road, or curb.
    #[arg(long)]
    preset: Option<String>,
    /// Stereo pair count along the trajectory.
    #[arg(long)]
    frames: Option<usize>,
    /// Seed for trajectory jitter, dropout, and label noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Image width in pixels.
    #[arg(long)]
    width: Option<u32>,
    /// Image height in pixels.
    #[arg(long)]
    height: Option<u32>,
    /// Probability that a candidate training frame is dropped.
    #[arg(long)]
    dropout: Option<f64>,
    /// Fraction of semantic labels randomized per frame.
    #[arg(long)]
    label_noise: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for checkpoints, logs, and the summary.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training epochs (one epoch covers roughly every training pixel once).
    #[arg(long)]
    epochs: Option<usize>,
    /// Ray patches per optimization step.
    #[arg(long)]
    batch_patches: Option<usize>,
    /// Square patch side length in pixels.
    #[arg(long)]
    patch_size: Option<u32>,
    /// Learning rate at step 0 of the cosine schedule.
    #[arg(long)]
    lr_start: Option<f64>,
    /// Learning rate at the final step of the cosine schedule.
    #[arg(long)]
    lr_end: Option<f64>,
    /// Structural dissimilarity weight.
    #[arg(long)]
    lambda0: Option<f64>,
    /// Geometry regularizer weight.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Epochs to wait before the geometry regularizer switches on.
    #[arg(long)]
    svd_delay: Option<usize>,
    /// Depth samples per ray during training (stratified).
    #[arg(long)]
    n_samples_train: Option<usize>,
    /// Depth samples per ray for validation renders (midpoints).
    #[arg(long)]
    n_samples_eval: Option<usize>,
    /// Early-stop patience in epochs without validation improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Master seed for init, batch order, and ray jitter.
    #[arg(long)]
    seed: Option<u64>,
    /// Cubic voxel grid resolution per axis.
    #[arg(long)]
    grid_res: Option<usize>,
    /// Near bound of every camera ray, world units.
    #[arg(long)]
    t_near: Option<f64>,
    /// Drop the plane regularizer (lambda1 = 0).
    #[arg(long)]
    no_svd: bool,
    /// Drop the structural dissimilarity term (lambda0 = 0).
    #[arg(long)]
    no_dssim: bool,
    /// Replace the plane regularizer with the depth-smoothness baseline.
    #[arg(long)]
    ds_baseline: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory (reads the validation split and ground truth).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Field checkpoint (.plnf) to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report CSV; rows append, the header is written once.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Optional full diagnostics (per-cell values) as JSON.
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Variant label for the report row.
    #[arg(long)]
    variant: Option<String>,
    /// Depth samples per ray (midpoints).
    #[arg(long)]
    n_samples: Option<usize>,
    /// Near bound of every camera ray, world units.
    #[arg(long)]
    t_near: Option<f64>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Field checkpoint (.plnf) to render from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// "val" (every validation frame of --data) or a pose file: JSON with a
    /// shared intrinsics block and a list of 4x4 row-major camera-to-world
    /// matrices.
    #[arg(long)]
    poses: Option<String>,
    /// Dataset directory; required when --poses val.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for rgb_*.png, depth_*.png, and depth_*.bin.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Depth samples per ray (midpoints).
    #[arg(long)]
    n_samples: Option<usize>,
    /// Near bound of every camera ray, world units.
    #[arg(long)]
    t_near: Option<f64>,
}

#[derive(Args, Debug)]
struct ExportPlyArgs {
    /// Field checkpoint (.plnf) to unproject.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory (poses, semantics, and reference depth).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated class names to export.
    #[arg(long)]
    classes: Option<String>,
    /// Predicted-cloud output path; the reference cloud lands next to it
    /// with an _gt suffix.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Depth samples per ray (midpoints).
    #[arg(long)]
    n_samples: Option<usize>,
    /// Near bound of every camera ray, world units.
    #[arg(long)]
    t_near: Option<f64>,
}

/// Key-value defaults loaded from --config. Keys mirror flag names; every
/// key must be consumed by the subcommand or the whole invocation fails.
pub struct ConfigBag {
    map: serde_json::Map<String, Value>,
    path: PathBuf,
}

impl ConfigBag {
    fn load(path: Option<&Path>) -> Result<ConfigBag> {
        let Some(path) = path else {
            return Ok(ConfigBag {
                map: serde_json::Map::new(),
                path: PathBuf::new(),
            });
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        match value {
            Value::Object(map) => Ok(ConfigBag {
                map,
                path: path.to_path_buf(),
            }),
            _ => Err(Error::InvalidData {
                path: path.to_path_buf(),
                reason: "config must be a flat JSON object".into(),
            }),
        }
    }

    fn bad_key(&self, key: &str, want: &str) -> Error {
        Error::InvalidData {
            path: self.path.clone(),
            reason: format!("config key \"{key}\" must be {want}"),
        }
    }

    pub fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(Value::Number(n)) => {
                n.as_f64().map(Some).ok_or_else(|| self.bad_key(key, "a number"))
            }
            Some(_) => Err(self.bad_key(key, "a number")),
        }
    }

    pub fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(Value::Number(n)) => n
                .as_u64()
                .map(Some)
                .ok_or_else(|| self.bad_key(key, "a non-negative integer")),
            Some(_) => Err(self.bad_key(key, "a non-negative integer")),
        }
    }

    pub fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.take_u64(key)?.map(|v| v as usize))
    }

    pub fn take_u32(&mut self, key: &str) -> Result<Option<u32>> {
        match self.take_u64(key)? {
            None => Ok(None),
            Some(v) => u32::try_from(v)
                .map(Some)
                .map_err(|_| self.bad_key(key, "a 32-bit integer")),
        }
    }

    pub fn take_bool(&mut self, key: &str) -> Result<bool> {
        match self.map.remove(key) {
            None => Ok(false),
            Some(Value::Bool(b)) => Ok(b),
            Some(_) => Err(self.bad_key(key, "a boolean")),
        }
    }

    pub fn take_string(&mut self, key: &str) -> Result<Option<String>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.bad_key(key, "a string")),
        }
    }

    pub fn take_path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.take_string(key)?.map(PathBuf::from))
    }

    /// Rejects any key no flag consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::InvalidData {
                path: self.path,
                reason: format!("unknown config key \"{key}\""),
            });
        }
        Ok(())
    }
}

/// A value that must be present either as a flag or as a config key.
pub fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| {
        Error::InvalidArgument(format!("missing required --{flag} (or config key \"{flag}\")"))
    })
}

fn resolve_threads(flag: Option<usize>, bag: &mut ConfigBag) -> Result<Option<usize>> {
    if let Some(n) = flag.or(bag.take_usize("threads")?) {
        return Ok(Some(n));
    }
    match std::env::var("PLANEREG_THREADS") {
        Ok(s) => match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::InvalidArgument(format!(
                "PLANEREG_THREADS must be a positive integer, got \"{s}\""
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut bag = ConfigBag::load(cli.config.as_deref())?;
    if let Some(n) = resolve_threads(cli.threads, &mut bag)? {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData(args) => commands::gen_data(args, bag),
        Command::Train(args) => commands::train(args, bag),
        Command::Eval(args) => commands::eval(args, bag),
        Command::Render(args) => commands::render(args, bag),
        Command::ExportPly(args) => commands::export_ply(args, bag),
    }
}

fn main() {
    let cli = Cli::parse();
    let json = cli.json;
    if let Err(e) = run(cli) {
        if json {
            let kind = if e.is_input_error() { "input" } else { "internal" };
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": kind })
            );
        } else {
            eprintln!("error: {e}");
        }
        std::process::exit(if e.is_input_error() { 2 } else { 1 });
    }
}
