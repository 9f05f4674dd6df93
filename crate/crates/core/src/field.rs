//! Optimizable voxel field: raw density and color grids on a regular lattice,
//! trilinearly interpolated and squashed through softplus / sigmoid. Queries
//! outside the bounding box are empty space. The raw grids are the training
//! parameters; `query_backward` accumulates loss gradients onto them.

use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};
use rand::Rng;
use rand::SeedableRng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const CHECKPOINT_MAGIC: [u8; 4] = *b"PLNF";
const CHECKPOINT_VERSION: u32 = 1;

/// Density and color at a point, after activations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    /// Attenuation coefficient, 1/m. Nonnegative.
    pub sigma: f64,
    /// Linear color in [0, 1] per channel.
    pub rgb: Vec3,
}

impl FieldSample {
    pub const EMPTY: FieldSample = FieldSample {
        sigma: 0.0,
        rgb: Vec3::ZERO,
    };
}

/// Gradient buffer with the same shape as the field's raw parameters.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub density: Vec<f64>,
    /// rgb interleaved per node, matching `VoxelField::color_raw`.
    pub color: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros(field: &VoxelField) -> ParamGrad {
        ParamGrad {
            density: vec![0.0; field.density_raw.len()],
            color: vec![0.0; field.color_raw.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.density.iter_mut().for_each(|g| *g = 0.0);
        self.color.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds `other` elementwise. Merge order matters for bit-level
    /// reproducibility, so callers keep it fixed.
    pub fn add_assign(&mut self, other: &ParamGrad) {
        assert_eq!(self.density.len(), other.density.len());
        assert_eq!(self.color.len(), other.color.len());
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.density.iter_mut().for_each(|g| *g *= s);
        self.color.iter_mut().for_each(|g| *g *= s);
    }
}

/// Initial raw values for a fresh field.
#[derive(Debug, Clone)]
pub struct FieldInit {
    /// Constant raw density. The default -2.0 starts the volume nearly
    /// transparent (softplus(-2) is about 0.13/m).
    pub density_raw: f64,
    /// Raw colors are drawn uniformly from [-span, span].
    pub color_span: f64,
    pub seed: u64,
}

impl Default for FieldInit {
    fn default() -> Self {
        FieldInit {
            density_raw: -2.0,
            color_span: 0.1,
            seed: 0,
        }
    }
}

/// Regular voxel lattice over `bbox`. `resolution` counts grid nodes per
/// axis (so a 64-resolution axis has 63 cells). Node (x, y, z) lives at flat
/// index `x + nx * (y + ny * z)`: x varies fastest.
#[derive(Debug, Clone)]
pub struct VoxelField {
    pub resolution: [usize; 3],
    pub bbox: Aabb,
    pub density_raw: Vec<f64>,
    /// rgb interleaved per node.
    pub color_raw: Vec<f64>,
}

/// Everything needed to push gradients through one query without redoing the
/// interpolation or the activations: corner weights plus the activation
/// derivatives at the interpolated raw values.
#[derive(Debug, Clone, Copy)]
pub struct QueryCache {
    inside: bool,
    base: usize,
    offsets: [usize; 8],
    w: [f64; 8],
    /// d sigma / d raw_sigma (the logistic at the raw density).
    d_sigma_raw: f64,
    /// d rgb_c / d raw_c per channel.
    d_rgb_raw: [f64; 3],
}

impl QueryCache {
    pub const OUTSIDE: QueryCache = QueryCache {
        inside: false,
        base: 0,
        offsets: [0; 8],
        w: [0.0; 8],
        d_sigma_raw: 0.0,
        d_rgb_raw: [0.0; 3],
    };
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl VoxelField {
    /// Fresh field: constant raw density, seeded uniform raw colors.
    pub fn init(resolution: [usize; 3], bbox: Aabb, init: &FieldInit) -> Result<VoxelField> {
        for (axis, &n) in resolution.iter().enumerate() {
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "grid resolution must be at least 2 per axis, got {n} on axis {axis}"
                )));
            }
        }
        let ext = bbox.extent();
        if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
            return Err(Error::InvalidArgument(
                "field bbox must have positive extent on every axis".into(),
            ));
        }
        let n = resolution[0] * resolution[1] * resolution[2];
        let mut rng = crate::geometry::SeedRng::seed_from_u64(init.seed);
        let color_raw = if init.color_span > 0.0 {
            (0..3 * n)
                .map(|_| rng.gen_range(-init.color_span..init.color_span))
                .collect()
        } else {
            vec![0.0; 3 * n]
        };
        Ok(VoxelField {
            resolution,
            bbox,
            density_raw: vec![init.density_raw; n],
            color_raw,
        })
    }

    pub fn node_count(&self) -> usize {
        self.resolution[0] * self.resolution[1] * self.resolution[2]
    }

    pub fn node_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    /// Field value at `p`; empty space outside the bbox.
    pub fn query(&self, p: Vec3) -> FieldSample {
        self.query_cached(p).0
    }

    /// `query` plus the cache that lets `accumulate` backpropagate later
    /// without recomputing interpolation weights or activations.
    pub fn query_cached(&self, p: Vec3) -> (FieldSample, QueryCache) {
        let [nx, ny, nz] = self.resolution;
        let ext = self.bbox.extent();
        let rx = (p.x - self.bbox.min.x) / ext.x;
        let ry = (p.y - self.bbox.min.y) / ext.y;
        let rz = (p.z - self.bbox.min.z) / ext.z;
        if !(0.0..=1.0).contains(&rx) || !(0.0..=1.0).contains(&ry) || !(0.0..=1.0).contains(&rz)
        {
            return (FieldSample::EMPTY, QueryCache::OUTSIDE);
        }
        let ux = rx * (nx - 1) as f64;
        let uy = ry * (ny - 1) as f64;
        let uz = rz * (nz - 1) as f64;
        let ix = (ux as usize).min(nx - 2);
        let iy = (uy as usize).min(ny - 2);
        let iz = (uz as usize).min(nz - 2);
        let fx = ux - ix as f64;
        let fy = uy - iy as f64;
        let fz = uz - iz as f64;

        let sx = 1usize;
        let sy = nx;
        let sz = nx * ny;
        let base = ix + nx * (iy + ny * iz);
        let offsets = [
            0,
            sx,
            sy,
            sy + sx,
            sz,
            sz + sx,
            sz + sy,
            sz + sy + sx,
        ];
        let w = [
            (1.0 - fx) * (1.0 - fy) * (1.0 - fz),
            fx * (1.0 - fy) * (1.0 - fz),
            (1.0 - fx) * fy * (1.0 - fz),
            fx * fy * (1.0 - fz),
            (1.0 - fx) * (1.0 - fy) * fz,
            fx * (1.0 - fy) * fz,
            (1.0 - fx) * fy * fz,
            fx * fy * fz,
        ];

        let mut raw_sigma = 0.0;
        let mut raw_rgb = [0.0f64; 3];
        for c in 0..8 {
            let idx = base + offsets[c];
            raw_sigma += w[c] * self.density_raw[idx];
            let ci = 3 * idx;
            raw_rgb[0] += w[c] * self.color_raw[ci];
            raw_rgb[1] += w[c] * self.color_raw[ci + 1];
            raw_rgb[2] += w[c] * self.color_raw[ci + 2];
        }

        let s_sig = sigmoid(raw_sigma);
        let r = sigmoid(raw_rgb[0]);
        let g = sigmoid(raw_rgb[1]);
        let b = sigmoid(raw_rgb[2]);
        let sample = FieldSample {
            sigma: softplus(raw_sigma),
            rgb: Vec3::new(r, g, b),
        };
        let cache = QueryCache {
            inside: true,
            base,
            offsets,
            w,
            d_sigma_raw: s_sig,
            d_rgb_raw: [r * (1.0 - r), g * (1.0 - g), b * (1.0 - b)],
        };
        (sample, cache)
    }

    /// Accumulates d(loss)/d(raw params) for one earlier `query_cached`,
    /// given the loss gradients at the activated outputs.
    pub fn accumulate(&self, cache: &QueryCache, d_sigma: f64, d_rgb: Vec3, grad: &mut ParamGrad) {
        if !cache.inside {
            return;
        }
        let ds = d_sigma * cache.d_sigma_raw;
        let dr = d_rgb.x * cache.d_rgb_raw[0];
        let dg = d_rgb.y * cache.d_rgb_raw[1];
        let db = d_rgb.z * cache.d_rgb_raw[2];
        for c in 0..8 {
            let idx = cache.base + cache.offsets[c];
            let w = cache.w[c];
            grad.density[idx] += w * ds;
            let ci = 3 * idx;
            grad.color[ci] += w * dr;
            grad.color[ci + 1] += w * dg;
            grad.color[ci + 2] += w * db;
        }
    }

    /// Standalone backward pass: recomputes the interpolation at `p` and
    /// accumulates gradients. Points outside the bbox contribute nothing.
    pub fn query_backward(&self, p: Vec3, d_sigma: f64, d_rgb: Vec3, grad: &mut ParamGrad) {
        let (_, cache) = self.query_cached(p);
        self.accumulate(&cache, d_sigma, d_rgb, grad);
    }

    /// Applies `delta` scaled by `scale` to the raw parameters.
    pub fn apply_delta(&mut self, delta: &ParamGrad, scale: f64) {
        for (p, d) in self.density_raw.iter_mut().zip(&delta.density) {
            *p += scale * d;
        }
        for (p, d) in self.color_raw.iter_mut().zip(&delta.color) {
            *p += scale * d;
        }
    }

    /// Writes the field: magic, version, resolution, bbox, then raw density
    /// and raw color as little-endian f32 in x-fastest node order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let werr = |e| Error::io(path, e);
        w.write_all(&CHECKPOINT_MAGIC).map_err(werr)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(werr)?;
        for &n in &self.resolution {
            w.write_all(&(n as u32).to_le_bytes()).map_err(werr)?;
        }
        for v in [
            self.bbox.min.x,
            self.bbox.min.y,
            self.bbox.min.z,
            self.bbox.max.x,
            self.bbox.max.y,
            self.bbox.max.z,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
        for &v in &self.density_raw {
            w.write_all(&(v as f32).to_le_bytes()).map_err(werr)?;
        }
        for &v in &self.color_raw {
            w.write_all(&(v as f32).to_le_bytes()).map_err(werr)?;
        }
        w.flush().map_err(werr)
    }

    pub fn load_checkpoint(path: &Path) -> Result<VoxelField> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, path)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadCheckpoint(format!(
                "{}: bad magic {:?}",
                path.display(),
                magic
            )));
        }
        let version = read_u32(&mut r, path)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let nx = read_u32(&mut r, path)? as usize;
        let ny = read_u32(&mut r, path)? as usize;
        let nz = read_u32(&mut r, path)? as usize;
        if nx < 2 || ny < 2 || nz < 2 || nx.saturating_mul(ny).saturating_mul(nz) > (1 << 30) {
            return Err(Error::BadCheckpoint(format!(
                "{}: implausible resolution {nx}x{ny}x{nz}",
                path.display()
            )));
        }
        let mut b = [0.0f64; 6];
        for v in &mut b {
            *v = read_f64(&mut r, path)?;
        }
        let bbox = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]));
        let n = nx * ny * nz;
        let mut density_raw = Vec::with_capacity(n);
        for _ in 0..n {
            density_raw.push(read_f32(&mut r, path)? as f64);
        }
        let mut color_raw = Vec::with_capacity(3 * n);
        for _ in 0..3 * n {
            color_raw.push(read_f32(&mut r, path)? as f64);
        }
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => {
                return Err(Error::BadCheckpoint(format!(
                    "{}: trailing bytes after parameter block",
                    path.display()
                )))
            }
            Err(e) => return Err(Error::io(path, e)),
        }
        Ok(VoxelField {
            resolution: [nx, ny, nz],
            bbox,
            density_raw,
            color_raw,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::BadCheckpoint(format!("{}: truncated file", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, path: &Path) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(f32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(f64::from_le_bytes(b))
}
