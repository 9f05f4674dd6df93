//! Procedural street scenes with exact ground truth, a stereo camera
//! trajectory generator, and the on-disk dataset format.
//!
//! Scenes are lists of textured rectangles and axis-aligned boxes, each
//! carrying a semantic class. Ray tracing is analytic, so stored depths lift
//! back onto the primitive surfaces to full float precision. When two
//! primitives are hit at the same depth (within 1e-9) the later one in the
//! list wins, which lets lane markings and sidewalks lie exactly in the road
//! plane instead of being offset to dodge z-fighting.

use crate::error::{Error, Result};
use crate::imageio::{self, ImageGrayF, ImageRgbF, ImageU8};
use crate::losses::SemanticGroups;
use crate::math::{mix_seed, Aabb, Mat3, Vec3};
use crate::render::{Camera, Pose, Ray};
use rand::Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const PRESETS: [&str; 3] = ["flat-road", "slanted-road", "curb"];

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_ROAD: u8 = 1;
pub const CLASS_LANE: u8 = 2;
pub const CLASS_SIDEWALK: u8 = 3;
pub const CLASS_BUILDING: u8 = 4;

pub const DEFAULT_WIDTH: u32 = 160;
pub const DEFAULT_HEIGHT: u32 = 120;
pub const DEFAULT_FOCAL: f64 = 140.0;

/// Two surfaces hit within this t distance count as the same depth; the
/// later primitive wins the pixel.
const COPLANAR_TIE: f64 = 1e-9;

/// Procedural surface color in local surface coordinates (meters).
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Uniform(Vec3),
    /// Bands of width `period` along the v coordinate, alternating a and b.
    Stripes { a: Vec3, b: Vec3, period: f64 },
    Checker { a: Vec3, b: Vec3, period: f64 },
}

impl Texture {
    fn sample(&self, u: f64, v: f64) -> Vec3 {
        match self {
            Texture::Uniform(c) => *c,
            Texture::Stripes { a, b, period } => {
                let band = (v / period).floor() as i64;
                if band.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Checker { a, b, period } => {
                let cell =
                    (u / period).floor() as i64 + (v / period).floor() as i64;
                if cell.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

/// Scene building block. Rect points are origin + s·e0 + t·e1, s, t in
/// [0, 1]; boxes are axis-aligned and textured per face.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Rect {
        origin: Vec3,
        e0: Vec3,
        e1: Vec3,
        class: u8,
        texture: Texture,
    },
    AABox {
        min: Vec3,
        max: Vec3,
        class: u8,
        texture: Texture,
    },
}

/// Hit record in surface-local coordinates.
struct Hit {
    t: f64,
    u: f64,
    v: f64,
}

impl Primitive {
    pub fn class(&self) -> u8 {
        match self {
            Primitive::Rect { class, .. } => *class,
            Primitive::AABox { class, .. } => *class,
        }
    }

    fn texture(&self) -> &Texture {
        match self {
            Primitive::Rect { texture, .. } => texture,
            Primitive::AABox { texture, .. } => texture,
        }
    }

    fn aabb(&self) -> Aabb {
        match self {
            Primitive::Rect { origin, e0, e1, .. } => {
                let mut b = Aabb {
                    min: *origin,
                    max: *origin,
                };
                for p in [*origin + *e0, *origin + *e1, *origin + *e0 + *e1] {
                    b = b.union_point(p);
                }
                b
            }
            Primitive::AABox { min, max, .. } => Aabb {
                min: *min,
                max: *max,
            },
        }
    }

    fn intersect(&self, ray: &Ray) -> Option<Hit> {
        match self {
            Primitive::Rect { origin, e0, e1, .. } => {
                let n = e0.cross(*e1);
                let denom = ray.dir.dot(n);
                if denom.abs() < 1e-12 * n.norm() {
                    return None;
                }
                let t = (*origin - ray.origin).dot(n) / denom;
                if t <= 1e-9 {
                    return None;
                }
                let q = ray.at(t) - *origin;
                let (a, b, c) = (e0.dot(*e0), e0.dot(*e1), e1.dot(*e1));
                let det = a * c - b * b;
                let s = (q.dot(*e0) * c - q.dot(*e1) * b) / det;
                let r = (q.dot(*e1) * a - q.dot(*e0) * b) / det;
                let eps = 1e-12;
                if !(-eps..=1.0 + eps).contains(&s) || !(-eps..=1.0 + eps).contains(&r) {
                    return None;
                }
                Some(Hit {
                    t,
                    u: s * e0.norm(),
                    v: r * e1.norm(),
                })
            }
            Primitive::AABox { min, max, .. } => {
                let mut t_enter = 1e-9;
                let mut t_exit = f64::INFINITY;
                let mut enter_axis = 0usize;
                for axis in 0..3 {
                    let (o, d) = (ray.origin.to_array()[axis], ray.dir.to_array()[axis]);
                    let (lo, hi) = (min.to_array()[axis], max.to_array()[axis]);
                    if d.abs() < 1e-15 {
                        if o < lo || o > hi {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d;
                    let (mut ta, mut tb) = ((lo - o) * inv, (hi - o) * inv);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t_enter {
                        t_enter = ta;
                        enter_axis = axis;
                    }
                    t_exit = t_exit.min(tb);
                }
                if t_enter > t_exit || t_enter <= 1e-9 {
                    return None;
                }
                let p = ray.at(t_enter).to_array();
                let (u, v) = match enter_axis {
                    0 => (p[1], p[2]),
                    1 => (p[0], p[2]),
                    _ => (p[0], p[1]),
                };
                Some(Hit { t: t_enter, u, v })
            }
        }
    }
}

/// The scene to be imaged: ordered primitives (later wins depth ties) and a
/// flat ambient light factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub ambient: f64,
    /// Padded bound of all primitives; the reconstruction volume.
    pub bbox: Aabb,
}

const GRAY_SIDEWALK: Vec3 = Vec3 {
    x: 0.55,
    y: 0.55,
    z: 0.55,
};
const LANE_BRIGHT: Vec3 = Vec3 {
    x: 0.92,
    y: 0.92,
    z: 0.88,
};
const LANE_DIM: Vec3 = Vec3 {
    x: 0.72,
    y: 0.72,
    z: 0.68,
};

fn facade_box(min: Vec3, max: Vec3, period: f64) -> Primitive {
    Primitive::AABox {
        min,
        max,
        class: CLASS_BUILDING,
        texture: Texture::Checker {
            a: Vec3::new(0.62, 0.55, 0.45),
            b: Vec3::new(0.30, 0.28, 0.33),
            period,
        },
    }
}

/// Ground rectangles of the street: full-width road, two lane-marking
/// strips painted into the same plane, and two sidewalk bands. All exactly
/// coplanar; listing order resolves the overlap.
fn ground_layer() -> Vec<Primitive> {
    let road = |x0: f64, x1: f64, class: u8, texture: Texture| Primitive::Rect {
        origin: Vec3::new(x0, -1.0, 0.0),
        e0: Vec3::new(x1 - x0, 0.0, 0.0),
        e1: Vec3::new(0.0, 9.0, 0.0),
        class,
        texture,
    };
    vec![
        road(
            -3.0,
            3.0,
            CLASS_ROAD,
            Texture::Checker {
                a: Vec3::new(0.24, 0.24, 0.26),
                b: Vec3::new(0.47, 0.47, 0.45),
                period: 0.75,
            },
        ),
        road(
            -1.075,
            -0.925,
            CLASS_LANE,
            Texture::Stripes {
                a: LANE_BRIGHT,
                b: LANE_DIM,
                period: 0.5,
            },
        ),
        road(
            0.925,
            1.075,
            CLASS_LANE,
            Texture::Stripes {
                a: LANE_BRIGHT,
                b: LANE_DIM,
                period: 0.5,
            },
        ),
        road(
            2.0,
            3.0,
            CLASS_SIDEWALK,
            Texture::Checker {
                a: Vec3::new(0.42, 0.42, 0.44),
                b: Vec3::new(0.64, 0.64, 0.62),
                period: 0.75,
            },
        ),
        road(
            -3.0,
            -2.0,
            CLASS_SIDEWALK,
            Texture::Checker {
                a: Vec3::new(0.42, 0.42, 0.44),
                b: Vec3::new(0.64, 0.64, 0.62),
                period: 0.75,
            },
        ),
    ]
}

fn rotate_primitive(p: &Primitive, rot: &Mat3) -> Primitive {
    match p {
        Primitive::Rect {
            origin,
            e0,
            e1,
            class,
            texture,
        } => Primitive::Rect {
            origin: rot.mul_vec(*origin),
            e0: rot.mul_vec(*e0),
            e1: rot.mul_vec(*e1),
            class: *class,
            texture: texture.clone(),
        },
        Primitive::AABox { .. } => p.clone(),
    }
}

fn shift_box(p: &Primitive, dz: f64) -> Primitive {
    match p {
        Primitive::AABox {
            min,
            max,
            class,
            texture,
        } => Primitive::AABox {
            min: *min + Vec3::new(0.0, 0.0, dz),
            max: *max + Vec3::new(0.0, 0.0, dz),
            class: *class,
            texture: texture.clone(),
        },
        Primitive::Rect { .. } => p.clone(),
    }
}

fn finish_scene(name: &str, primitives: Vec<Primitive>) -> SceneSpec {
    let mut bbox = primitives[0].aabb();
    for p in &primitives[1..] {
        let b = p.aabb();
        bbox = bbox.union_point(b.min).union_point(b.max);
    }
    SceneSpec {
        name: name.to_string(),
        primitives,
        ambient: 1.0,
        bbox: bbox.padded(0.3),
    }
}

/// The grade of the slanted preset, degrees about the x axis.
pub const SLANT_DEGREES: f64 = 5.0;

/// Builds one of the named scene presets. The seed only perturbs facade
/// texture periods; geometry is fixed per preset.
pub fn generate_scene(preset: &str, seed: u64) -> Result<SceneSpec> {
    let mut rng = crate::geometry::SeedRng::seed_from_u64(mix_seed(seed, 0x5CE7E));
    let period = 0.4 * rng.gen_range(0.9..1.1);
    let facades = |period: f64| {
        vec![
            facade_box(Vec3::new(3.0, 1.5, 0.0), Vec3::new(3.6, 5.5, 2.2), period),
            facade_box(Vec3::new(-3.6, 1.5, 0.0), Vec3::new(-3.0, 5.5, 2.2), period),
            facade_box(Vec3::new(-3.8, 8.0, 0.0), Vec3::new(3.8, 8.4, 3.0), period),
        ]
    };
    match preset {
        "flat-road" => {
            let mut prims = ground_layer();
            prims.extend(facades(period));
            Ok(finish_scene(preset, prims))
        }
        "slanted-road" => {
            let rot = Mat3::rot_x(-SLANT_DEGREES.to_radians());
            let slope = SLANT_DEGREES.to_radians().tan();
            let mut prims: Vec<Primitive> = ground_layer()
                .iter()
                .map(|p| rotate_primitive(p, &rot))
                .collect();
            // Boxes stay axis-aligned; sink each to the local ground height.
            for b in facades(period) {
                let yc = 0.5 * (b.aabb().min.y + b.aabb().max.y);
                prims.push(shift_box(&b, -yc * slope - 0.05));
            }
            Ok(finish_scene(preset, prims))
        }
        "curb" => {
            let mut prims = ground_layer();
            // Raised sidewalks replace the flat bands: boxes whose top face
            // sits 0.15 m above the road plane.
            prims.retain(|p| p.class() != CLASS_SIDEWALK);
            for (x0, x1) in [(2.0, 3.0), (-3.0, -2.0)] {
                prims.push(Primitive::AABox {
                    min: Vec3::new(x0, -1.0, -0.2),
                    max: Vec3::new(x1, 8.0, 0.15),
                    class: CLASS_SIDEWALK,
                    texture: Texture::Uniform(GRAY_SIDEWALK),
                });
            }
            prims.extend(facades(period));
            Ok(finish_scene(preset, prims))
        }
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// Exact render of one camera view.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub rgb: ImageRgbF,
    /// Distance along the unit ray to the hit, 0 where nothing is hit.
    pub depth: ImageGrayF,
    pub classes: ImageU8,
}

/// Analytic nearest-hit render: per pixel the closest primitive's texture
/// color under ambient light, its class, and the exact hit distance.
pub fn raytrace_ground_truth(spec: &SceneSpec, cam: &Camera) -> GroundTruth {
    let mut rgb = ImageRgbF::new(cam.width, cam.height);
    let mut depth = ImageGrayF::new(cam.width, cam.height);
    let mut classes = ImageU8::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let ray = cam.ray_through_pixel(x as f64, y as f64);
            if let Some((t, prim, u, v)) = trace(spec, &ray) {
                let albedo = prim.texture().sample(u, v);
                rgb.set(x, y, (albedo * spec.ambient).min_elem_wise_one());
                depth.set(x, y, t);
                classes.set(x, y, prim.class());
            }
        }
    }
    GroundTruth {
        rgb,
        depth,
        classes,
    }
}

trait ClampColor {
    fn min_elem_wise_one(self) -> Vec3;
}
impl ClampColor for Vec3 {
    fn min_elem_wise_one(self) -> Vec3 {
        Vec3::new(self.x.min(1.0), self.y.min(1.0), self.z.min(1.0))
    }
}

fn trace<'a>(spec: &'a SceneSpec, ray: &Ray) -> Option<(f64, &'a Primitive, f64, f64)> {
    let mut best: Option<(f64, &Primitive, f64, f64)> = None;
    for prim in &spec.primitives {
        if let Some(h) = prim.intersect(ray) {
            let replace = match &best {
                None => true,
                Some((bt, ..)) => h.t <= bt + COPLANAR_TIE,
            };
            if replace {
                best = Some((h.t, prim, h.u, h.v));
            }
        }
    }
    best
}

/// Exact hit depth for one ray, background excluded. The reference for
/// rendered-depth comparisons.
pub fn trace_depth(spec: &SceneSpec, ray: &Ray) -> Option<f64> {
    trace(spec, ray).map(|(t, ..)| t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryStyle {
    LineWithJitter,
    Arc,
}

/// Stereo trajectory layout. Positions advance along +y; `ground_slope_tan`
/// is the ground dz/dy so cameras keep a constant height above it.
#[derive(Debug, Clone)]
pub struct TrajectoryParams {
    pub n_frames: usize,
    pub style: TrajectoryStyle,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub start_y: f64,
    pub step: f64,
    pub camera_height: f64,
    pub pitch_deg: f64,
    pub baseline: f64,
    pub jitter_deg: f64,
    pub ground_slope_tan: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        TrajectoryParams {
            n_frames: 10,
            style: TrajectoryStyle::LineWithJitter,
            seed: 0,
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            focal: DEFAULT_FOCAL,
            start_y: -0.3,
            step: 0.25,
            camera_height: 1.4,
            pitch_deg: 12.0,
            baseline: 0.5,
            jitter_deg: 2.0,
            ground_slope_tan: 0.0,
        }
    }
}

/// Left/right camera pairs along the trajectory, ordered
/// [L0, R0, L1, R1, ...].
pub fn generate_trajectory(
    n_frames: usize,
    style: TrajectoryStyle,
    seed: u64,
) -> Result<Vec<Camera>> {
    generate_trajectory_with(&TrajectoryParams {
        n_frames,
        style,
        seed,
        ..TrajectoryParams::default()
    })
}

pub fn generate_trajectory_with(p: &TrajectoryParams) -> Result<Vec<Camera>> {
    if p.n_frames < 2 {
        return Err(Error::InvalidArgument(format!(
            "trajectory needs at least 2 frames, got {}",
            p.n_frames
        )));
    }
    let arc_radius = 20.0;
    let mut cams = Vec::with_capacity(2 * p.n_frames);
    for i in 0..p.n_frames {
        let mut rng = crate::geometry::SeedRng::seed_from_u64(mix_seed(p.seed, i as u64));
        let jyaw = rng.gen_range(-p.jitter_deg..p.jitter_deg).to_radians();
        let jpitch = rng.gen_range(-p.jitter_deg..p.jitter_deg).to_radians();
        let jx = rng.gen_range(-0.08..0.08);

        let travel = i as f64 * p.step;
        let (x, y, heading) = match p.style {
            TrajectoryStyle::LineWithJitter => (jx, p.start_y + travel, 0.0),
            TrajectoryStyle::Arc => {
                let phi = travel / arc_radius;
                (
                    jx + arc_radius * (1.0 - phi.cos()),
                    p.start_y + arc_radius * phi.sin(),
                    phi,
                )
            }
        };
        let z = p.camera_height + y * p.ground_slope_tan;
        // Pitch is measured against the ground tangent, so a slope steepens
        // the world-frame pitch by its own angle.
        let pitch = p.pitch_deg.to_radians() - p.ground_slope_tan.atan() + jpitch;
        let yaw = heading + jyaw;
        let forward = Vec3::new(
            yaw.sin() * pitch.cos(),
            yaw.cos() * pitch.cos(),
            -pitch.sin(),
        );
        // Right-handed camera basis: x right, y down, z forward.
        let x_cam = forward.cross(Vec3::new(0.0, 0.0, 1.0)).normalized();
        let y_cam = forward.cross(x_cam);
        let rotation = Mat3::from_cols(x_cam, y_cam, forward);
        let position = Vec3::new(x, y, z);
        for side in 0..2 {
            cams.push(Camera {
                fx: p.focal,
                fy: p.focal,
                cx: p.width as f64 / 2.0,
                cy: p.height as f64 / 2.0,
                width: p.width,
                height: p.height,
                pose: Pose {
                    rotation,
                    position: position + x_cam * (side as f64 * p.baseline),
                },
            });
        }
    }
    Ok(cams)
}

/// Scene plus a trajectory matched to its ground grade.
pub fn preset_scene_and_trajectory(
    preset: &str,
    n_frames: usize,
    seed: u64,
    width: u32,
    height: u32,
) -> Result<(SceneSpec, Vec<Camera>)> {
    let scene = generate_scene(preset, seed)?;
    let slope = if preset == "slanted-road" {
        -SLANT_DEGREES.to_radians().tan()
    } else {
        0.0
    };
    let cams = generate_trajectory_with(&TrajectoryParams {
        n_frames,
        seed: mix_seed(seed, 0x7247),
        width,
        height,
        focal: DEFAULT_FOCAL * width as f64 / DEFAULT_WIDTH as f64,
        ground_slope_tan: slope,
        ..TrajectoryParams::default()
    })?;
    Ok((scene, cams))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 4x4 camera-to-world matrix.
    pub camera_to_world: Vec<f64>,
}

impl CameraRecord {
    pub fn from_camera(cam: &Camera) -> CameraRecord {
        let m = cam.pose.to_matrix();
        CameraRecord {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            camera_to_world: m.iter().flatten().copied().collect(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        if self.camera_to_world.len() != 16 {
            return Err(Error::InvalidData {
                path: PathBuf::from(MANIFEST_NAME),
                reason: format!(
                    "camera_to_world has {} entries, expected 16",
                    self.camera_to_world.len()
                ),
            });
        }
        let mut m = [[0.0; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                m[r][c] = self.camera_to_world[r * 4 + c];
            }
        }
        Ok(Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            pose: Pose::from_matrix(&m)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    /// Index into the manifest camera list.
    pub camera: usize,
    pub rgb: String,
    pub semantic: String,
    pub depth: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassDef {
    pub id: u8,
    pub name: String,
}

pub fn default_class_table() -> Vec<ClassDef> {
    [
        (CLASS_BACKGROUND, "background"),
        (CLASS_ROAD, "road"),
        (CLASS_LANE, "lane"),
        (CLASS_SIDEWALK, "sidewalk"),
        (CLASS_BUILDING, "building"),
    ]
    .iter()
    .map(|&(id, name)| ClassDef {
        id,
        name: name.to_string(),
    })
    .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub scene: String,
    pub bbox: Aabb,
    pub cameras: Vec<CameraRecord>,
    pub frames: Vec<FrameRecord>,
    pub classes: Vec<ClassDef>,
    pub semantic_groups: SemanticGroups,
    #[serde(default)]
    pub label_noise: f64,
}

#[derive(Debug, Clone)]
pub struct WriteOptions {
    /// Probability that a candidate training frame is discarded.
    pub dropout: f64,
    pub seed: u64,
    /// Probability that a pixel's class label is flipped to a random other
    /// class, simulating imperfect semantic inputs.
    pub label_noise: f64,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions {
            dropout: 0.5,
            seed: 0,
            label_noise: 0.0,
        }
    }
}

fn flip_labels(classes: &mut ImageU8, table: &[ClassDef], p: f64, seed: u64) {
    let mut rng = crate::geometry::SeedRng::seed_from_u64(seed);
    for v in classes.pixels.iter_mut() {
        if rng.gen::<f64>() < p {
            let mut pick = table[rng.gen_range(0..table.len())].id;
            while pick == *v {
                pick = table[rng.gen_range(0..table.len())].id;
            }
            *v = pick;
        }
    }
}

/// Renders every camera, writes images and the manifest, and assigns
/// splits: every other left frame becomes validation, and the remaining
/// frames are independently dropped with the configured probability.
/// Dropped frames stay on disk but are not referenced by the manifest.
pub fn write_dataset(
    scene: &SceneSpec,
    cameras: &[Camera],
    out_dir: &Path,
    opts: &WriteOptions,
) -> Result<DatasetManifest> {
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("no cameras to render".into()));
    }
    for sub in ["rgb", "sem", "depth"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let table = default_class_table();
    let truths: Vec<GroundTruth> = cameras
        .par_iter()
        .enumerate()
        .map(|(i, cam)| {
            let mut gt = raytrace_ground_truth(scene, cam);
            if opts.label_noise > 0.0 {
                flip_labels(
                    &mut gt.classes,
                    &table,
                    opts.label_noise,
                    mix_seed(opts.seed, 0x4AB0 + i as u64),
                );
            }
            gt
        })
        .collect();

    let mut drop_rng =
        crate::geometry::SeedRng::seed_from_u64(mix_seed(opts.seed, 0xD209));
    let mut frames = Vec::new();
    let mut kept_any_train = false;
    let mut records: Vec<(usize, Split, bool)> = Vec::new();
    for i in 0..cameras.len() {
        let is_left = i % 2 == 0;
        let pair = i / 2;
        if is_left && pair % 2 == 1 {
            records.push((i, Split::Val, true));
        } else {
            let keep = drop_rng.gen::<f64>() >= opts.dropout;
            kept_any_train |= keep;
            records.push((i, Split::Train, keep));
        }
    }
    if !kept_any_train {
        // Dropout may not empty the training split; force the first
        // candidate back in.
        if let Some(r) = records.iter_mut().find(|r| r.1 == Split::Train) {
            r.2 = true;
        }
    }

    for (i, split, keep) in &records {
        let i = *i;
        let rgb_rel = format!("rgb/{i:04}.png");
        let sem_rel = format!("sem/{i:04}.png");
        let depth_rel = format!("depth/{i:04}.bin");
        imageio::save_rgb_png(&out_dir.join(&rgb_rel), &truths[i].rgb)?;
        imageio::save_class_png(&out_dir.join(&sem_rel), &truths[i].classes)?;
        imageio::save_depth_bin(&out_dir.join(&depth_rel), &truths[i].depth)?;
        if *keep {
            frames.push(FrameRecord {
                camera: i,
                rgb: rgb_rel,
                semantic: sem_rel,
                depth: depth_rel,
                split: *split,
            });
        }
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        scene: scene.name.clone(),
        bbox: scene.bbox,
        cameras: cameras.iter().map(CameraRecord::from_camera).collect(),
        frames,
        classes: table,
        semantic_groups: SemanticGroups::ground_default(),
        label_noise: opts.label_noise,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory opened for reading. Cameras are validated eagerly;
/// images load on demand.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    cameras: Vec<Camera>,
}

/// One frame fully loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedFrame {
    /// Index into manifest.frames.
    pub index: usize,
    pub camera: Camera,
    pub rgb: ImageRgbF,
    pub classes: ImageU8,
    pub depth: ImageGrayF,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::UnsupportedManifestVersion {
            found: manifest.version,
            supported: MANIFEST_VERSION,
        });
    }
    let mut ids: Vec<u8> = manifest.classes.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != manifest.classes.len() {
        return Err(Error::InvalidData {
            path: path.clone(),
            reason: "duplicate class ids in class table".into(),
        });
    }
    for g in manifest.semantic_groups.groups() {
        for c in &g.classes {
            if !ids.contains(c) {
                return Err(Error::InvalidData {
                    path: path.clone(),
                    reason: format!(
                        "semantic group '{}' uses class id {c} absent from the class table",
                        g.name
                    ),
                });
            }
        }
    }
    let cameras: Vec<Camera> = manifest
        .cameras
        .iter()
        .map(|c| c.to_camera())
        .collect::<Result<_>>()?;
    for (i, f) in manifest.frames.iter().enumerate() {
        if f.camera >= cameras.len() {
            return Err(Error::InvalidData {
                path: path.clone(),
                reason: format!("frame {i} references camera {} of {}", f.camera, cameras.len()),
            });
        }
        for rel in [&f.rgb, &f.semantic, &f.depth] {
            let p = dir.join(rel);
            if !p.exists() {
                return Err(Error::MissingFile(p));
            }
        }
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        cameras,
    })
}

impl Dataset {
    pub fn camera(&self, frame: usize) -> &Camera {
        &self.cameras[self.manifest.frames[frame].camera]
    }

    pub fn split_frames(&self, split: Split) -> Vec<usize> {
        self.manifest
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_pixel_count(&self, split: Split) -> u64 {
        self.split_frames(split)
            .iter()
            .map(|&i| {
                let c = self.camera(i);
                c.width as u64 * c.height as u64
            })
            .sum()
    }

    pub fn load_frame(&self, frame: usize) -> Result<LoadedFrame> {
        let rec = &self.manifest.frames[frame];
        let cam = self.camera(frame).clone();
        let rgb = imageio::load_rgb_png(&self.root.join(&rec.rgb))?;
        let classes = imageio::load_class_png(&self.root.join(&rec.semantic))?;
        let depth =
            imageio::load_depth_bin(&self.root.join(&rec.depth), cam.width, cam.height)?;
        for img in [(rgb.width, rgb.height), (classes.width, classes.height)] {
            if img != (cam.width, cam.height) {
                return Err(Error::InvalidData {
                    path: self.root.join(&rec.rgb),
                    reason: format!(
                        "image size {}x{} does not match camera {}x{}",
                        img.0, img.1, cam.width, cam.height
                    ),
                });
            }
        }
        let known: Vec<u8> = self.manifest.classes.iter().map(|c| c.id).collect();
        if let Some(bad) = classes.pixels.iter().find(|c| !known.contains(c)) {
            return Err(Error::InvalidData {
                path: self.root.join(&rec.semantic),
                reason: format!("class id {bad} is not in the class table"),
            });
        }
        Ok(LoadedFrame {
            index: frame,
            camera: cam,
            rgb,
            classes,
            depth,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedFrame>> {
        self.split_frames(split)
            .into_iter()
            .map(|i| self.load_frame(i))
            .collect()
    }
}
