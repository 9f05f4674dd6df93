//! Differentiable volumetric rendering. Rays march through the voxel field
//! with front-to-back alpha compositing: alpha_i = 1 - exp(-sigma_i delta_i),
//! weights w_i = T_i alpha_i with T_i the transmittance before sample i.
//! Color and depth are weight sums; w_i sum to 1 - T_final exactly, so the
//! leftover transmittance closes the partition of unity. The backward pass
//! uses a suffix recurrence instead of dividing by 1 - alpha, so saturated
//! samples cannot blow it up.

use crate::error::{Error, Result};
use crate::field::{ParamGrad, QueryCache, VoxelField};
use crate::geometry::SeedRng;
use crate::imageio::{ImageGrayF, ImageRgbF};
use crate::math::{Aabb, Mat3, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rayon::prelude::*;

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub position: Vec3,
}

impl Pose {
    /// Validates and unpacks a row-major 4x4 camera-to-world matrix: the
    /// rotation block must be orthonormal with determinant +1 (within 1e-9)
    /// and the bottom row (0, 0, 0, 1).
    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Result<Pose> {
        let rotation = Mat3 {
            m: [
                [m[0][0], m[0][1], m[0][2]],
                [m[1][0], m[1][1], m[1][2]],
                [m[2][0], m[2][1], m[2][2]],
            ],
        };
        let rtr = rotation.transpose().mul_mat(&rotation);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr.m[i][j] - want).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(
                        "pose rotation block is not orthonormal".into(),
                    ));
                }
            }
        }
        if (rotation.det() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "pose rotation block is not a proper rotation (det != +1)".into(),
            ));
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument(
                "pose matrix bottom row must be 0 0 0 1".into(),
            ));
        }
        Ok(Pose {
            rotation,
            position: Vec3::new(m[0][3], m[1][3], m[2][3]),
        })
    }

    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation.m;
        [
            [r[0][0], r[0][1], r[0][2], self.position.x],
            [r[1][0], r[1][1], r[1][2], self.position.y],
            [r[2][0], r[2][1], r[2][2], self.position.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

/// Pinhole camera. Camera frame: +x right, +y down in the image, +z the view
/// direction. Pixel (x, y) is sampled at its center (x + 0.5, y + 0.5).
#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: Pose,
}

impl Camera {
    /// World-space ray through the center of pixel (x, y); fractional pixel
    /// coordinates are allowed. Direction comes out unit length.
    pub fn ray_through_pixel(&self, x: f64, y: f64) -> Ray {
        let d_cam = Vec3::new(
            (x + 0.5 - self.cx) / self.fx,
            (y + 0.5 - self.cy) / self.fy,
            1.0,
        );
        Ray {
            origin: self.pose.position,
            dir: self.pose.rotation.mul_vec(d_cam).normalized(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Rays through every pixel of a square patch, row-major from the top-left
/// pixel (x, y).
pub fn rays_for_patch(cam: &Camera, top_left: (u32, u32), patch_size: u32) -> Result<Vec<Ray>> {
    let (x, y) = top_left;
    if x + patch_size > cam.width || y + patch_size > cam.height {
        return Err(Error::PatchOutOfBounds {
            x,
            y,
            size: patch_size,
            width: cam.width,
            height: cam.height,
        });
    }
    let mut rays = Vec::with_capacity((patch_size * patch_size) as usize);
    for dy in 0..patch_size {
        for dx in 0..patch_size {
            rays.push(cam.ray_through_pixel((x + dx) as f64, (y + dy) as f64));
        }
    }
    Ok(rays)
}

/// Bin midpoints of a uniform partition of [t_near, t_far] into n bins.
pub fn sample_midpoints(n: usize, t_near: f64, t_far: f64) -> Vec<f64> {
    assert!(n >= 1 && t_far > t_near && t_near >= 0.0);
    let step = (t_far - t_near) / n as f64;
    (0..n).map(|i| t_near + (i as f64 + 0.5) * step).collect()
}

/// One uniform draw per bin: t_i = t_near + (i + u_i) step with u_i in [0, 1).
/// Samples are strictly increasing and stay one per bin.
pub fn sample_stratified(n: usize, t_near: f64, t_far: f64, rng: &mut SeedRng) -> Vec<f64> {
    assert!(n >= 1 && t_far > t_near && t_near >= 0.0);
    let step = (t_far - t_near) / n as f64;
    (0..n)
        .map(|i| t_near + (i as f64 + rng.gen_range(0.0..1.0)) * step)
        .collect()
}

/// Seeded convenience wrapper: midpoints when `stratified` is false (the seed
/// is then irrelevant), one jittered sample per bin otherwise.
pub fn sample_ray(n: usize, t_near: f64, t_far: f64, stratified: bool, seed: u64) -> Vec<f64> {
    if stratified {
        let mut rng = SeedRng::seed_from_u64(seed);
        sample_stratified(n, t_near, t_far, &mut rng)
    } else {
        sample_midpoints(n, t_near, t_far)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderResult {
    pub color: Vec3,
    /// Expected hit distance along the ray: sum of w_i t_i, without
    /// normalization. A fully transparent ray renders depth 0.
    pub depth: f64,
    /// Transmittance left after the last sample.
    pub transmittance: f64,
}

/// Per-sample state kept from a forward pass so the backward pass needs no
/// second field traversal. Reused across rays to avoid reallocation.
#[derive(Debug, Clone, Default)]
pub struct RayWork {
    t: Vec<f64>,
    delta: Vec<f64>,
    alpha: Vec<f64>,
    /// exp(-sigma delta) = 1 - alpha, kept separately for accuracy.
    keep: Vec<f64>,
    /// Transmittance in front of each sample.
    trans: Vec<f64>,
    weight: Vec<f64>,
    rgb: Vec<Vec3>,
    cache: Vec<QueryCache>,
}

impl RayWork {
    pub fn new() -> RayWork {
        RayWork::default()
    }

    fn reset(&mut self, n: usize) {
        for v in [
            &mut self.t,
            &mut self.delta,
            &mut self.alpha,
            &mut self.keep,
            &mut self.trans,
            &mut self.weight,
        ] {
            v.clear();
            v.reserve(n);
        }
        self.rgb.clear();
        self.rgb.reserve(n);
        self.cache.clear();
        self.cache.reserve(n);
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Compositing weights of the last forward pass, one per sample.
    pub fn weights(&self) -> &[f64] {
        &self.weight
    }
}

/// Forward pass only; allocates nothing.
pub fn render_ray(field: &VoxelField, ray: &Ray, sample_t: &[f64], t_far: f64) -> RenderResult {
    debug_assert!(!sample_t.is_empty());
    let mut trans = 1.0;
    let mut color = Vec3::ZERO;
    let mut depth = 0.0;
    for (i, &t) in sample_t.iter().enumerate() {
        let next = if i + 1 < sample_t.len() {
            sample_t[i + 1]
        } else {
            t_far
        };
        let delta = next - t;
        debug_assert!(delta >= 0.0, "samples must be increasing and below t_far");
        let s = field.query(ray.at(t));
        let keep = (-s.sigma * delta).exp();
        let alpha = 1.0 - keep;
        let w = trans * alpha;
        color += s.rgb * w;
        depth += w * t;
        trans *= keep;
    }
    RenderResult {
        color,
        depth,
        transmittance: trans,
    }
}

/// Forward pass that also fills `work` for a later backward pass. Produces
/// bit-identical results to `render_ray`.
pub fn render_ray_forward(
    field: &VoxelField,
    ray: &Ray,
    sample_t: &[f64],
    t_far: f64,
    work: &mut RayWork,
) -> RenderResult {
    debug_assert!(!sample_t.is_empty());
    work.reset(sample_t.len());
    let mut trans = 1.0;
    let mut color = Vec3::ZERO;
    let mut depth = 0.0;
    for (i, &t) in sample_t.iter().enumerate() {
        let next = if i + 1 < sample_t.len() {
            sample_t[i + 1]
        } else {
            t_far
        };
        let delta = next - t;
        debug_assert!(delta >= 0.0, "samples must be increasing and below t_far");
        let (s, cache) = field.query_cached(ray.at(t));
        let keep = (-s.sigma * delta).exp();
        let alpha = 1.0 - keep;
        let w = trans * alpha;
        color += s.rgb * w;
        depth += w * t;
        work.t.push(t);
        work.delta.push(delta);
        work.alpha.push(alpha);
        work.keep.push(keep);
        work.trans.push(trans);
        work.weight.push(w);
        work.rgb.push(s.rgb);
        work.cache.push(cache);
        trans *= keep;
    }
    RenderResult {
        color,
        depth,
        transmittance: trans,
    }
}

/// Backward pass over a filled `RayWork`: accumulates d(loss)/d(raw params)
/// given the loss gradients at the rendered color and depth.
///
/// With g_i = d_color . rgb_i + d_depth t_i, the derivative through the
/// compositing weights is dL/dalpha_k = T_k (g_k - B_k), where
/// B_k = sum_{i>k} prod_{k<j<i}(1-alpha_j) alpha_i g_i satisfies the suffix
/// recurrence B_{k-1} = alpha_k g_k + (1-alpha_k) B_k. No division by
/// 1 - alpha, so opaque samples stay stable.
pub fn render_ray_backward_cached(
    field: &VoxelField,
    work: &RayWork,
    d_color: Vec3,
    d_depth: f64,
    grad: &mut ParamGrad,
) {
    let n = work.len();
    let mut b = 0.0;
    for k in (0..n).rev() {
        let g = d_color.dot(work.rgb[k]) + d_depth * work.t[k];
        let d_alpha = work.trans[k] * (g - b);
        let d_sigma = d_alpha * work.delta[k] * work.keep[k];
        let d_rgb = d_color * work.weight[k];
        field.accumulate(&work.cache[k], d_sigma, d_rgb, grad);
        b = work.alpha[k] * g + work.keep[k] * b;
    }
}

/// Standalone backward pass; runs its own forward traversal first.
pub fn render_ray_backward(
    field: &VoxelField,
    ray: &Ray,
    sample_t: &[f64],
    t_far: f64,
    d_color: Vec3,
    d_depth: f64,
    grad: &mut ParamGrad,
) {
    let mut work = RayWork::new();
    render_ray_forward(field, ray, sample_t, t_far, &mut work);
    render_ray_backward_cached(field, &work, d_color, d_depth, grad);
}

/// Renders a full frame with deterministic midpoint sampling; returns color
/// and depth images. Rows render in parallel but compose in row order, so the
/// output matches a sequential per-pixel loop exactly.
pub fn render_image(
    field: &VoxelField,
    cam: &Camera,
    n_samples: usize,
    t_near: f64,
    t_far: f64,
) -> (ImageRgbF, ImageGrayF) {
    let ts = sample_midpoints(n_samples, t_near, t_far);
    let rows: Vec<(Vec<Vec3>, Vec<f64>)> = (0..cam.height)
        .into_par_iter()
        .map(|y| {
            let mut crow = Vec::with_capacity(cam.width as usize);
            let mut drow = Vec::with_capacity(cam.width as usize);
            for x in 0..cam.width {
                let ray = cam.ray_through_pixel(x as f64, y as f64);
                let r = render_ray(field, &ray, &ts, t_far);
                crow.push(r.color);
                drow.push(r.depth);
            }
            (crow, drow)
        })
        .collect();
    let mut rgb = ImageRgbF::new(cam.width, cam.height);
    let mut depth = ImageGrayF::new(cam.width, cam.height);
    for (y, (crow, drow)) in rows.into_iter().enumerate() {
        for x in 0..cam.width as usize {
            rgb.pixels[y * cam.width as usize + x] = crow[x];
            depth.pixels[y * cam.width as usize + x] = drow[x];
        }
    }
    (rgb, depth)
}

/// Distance from `origin` to the farthest corner of `bbox`, padded a hair;
/// a safe t_far for any ray from that origin.
pub fn far_bound(bbox: &Aabb, origin: Vec3) -> f64 {
    let mut far: f64 = 0.0;
    for i in 0..8 {
        far = far.max((bbox.corner(i) - origin).norm());
    }
    far * 1.001
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{softplus, FieldInit, FieldSample};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn identity_camera(width: u32, height: u32) -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            pose: Pose {
                rotation: Mat3::IDENTITY,
                position: Vec3::ZERO,
            },
        }
    }

    fn random_field(res: [usize; 3], bbox: Aabb, seed: u64) -> VoxelField {
        let mut f = VoxelField::init(res, bbox, &FieldInit::default()).unwrap();
        let mut rng = SeedRng::seed_from_u64(seed);
        for v in f.density_raw.iter_mut() {
            *v = rng.gen_range(-1.0..2.0);
        }
        for v in f.color_raw.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        f
    }

    #[test]
    fn principal_ray_points_down_z() {
        let cam = identity_camera(8, 6);
        let ray = cam.ray_through_pixel(cam.cx - 0.5, cam.cy - 0.5);
        assert_relative_eq!(ray.dir.z, 1.0, epsilon = 1e-12);
        assert_eq!(ray.origin, Vec3::ZERO);
    }

    #[test]
    fn patch_rays_are_row_major_and_unit() {
        let cam = identity_camera(8, 6);
        let rays = rays_for_patch(&cam, (1, 2), 3).unwrap();
        assert_eq!(rays.len(), 9);
        // First ray is pixel (1, 2), second is (2, 2): x advances first.
        let r0 = cam.ray_through_pixel(1.0, 2.0);
        let r1 = cam.ray_through_pixel(2.0, 2.0);
        assert_eq!(rays[0].dir, r0.dir);
        assert_eq!(rays[1].dir, r1.dir);
        for r in &rays {
            assert_relative_eq!(r.dir.norm(), 1.0, epsilon = 1e-12);
        }
        assert!(matches!(
            rays_for_patch(&cam, (6, 0), 3),
            Err(Error::PatchOutOfBounds { .. })
        ));
        assert!(rays_for_patch(&cam, (5, 3), 3).is_ok());
    }

    #[test]
    fn rotated_pose_rotates_directions() {
        let rot = Mat3::rot_z(90f64.to_radians());
        let cam = Camera {
            pose: Pose {
                rotation: rot,
                position: Vec3::new(1.0, 2.0, 3.0),
            },
            ..identity_camera(8, 6)
        };
        let ray = cam.ray_through_pixel(cam.cx - 0.5, cam.cy - 0.5);
        assert_relative_eq!(ray.dir.z, 1.0, epsilon = 1e-12);
        let ray = cam.ray_through_pixel(cam.cx - 0.5 + 10.0, cam.cy - 0.5);
        // Camera +x maps to world +y under a 90 degree z rotation.
        assert!(ray.dir.y > 0.05 && ray.dir.x.abs() < 1e-9);
    }

    #[test]
    fn pose_matrix_round_trip_and_validation() {
        let pose = Pose {
            rotation: Mat3::rot_axis(Vec3::new(0.3, -1.0, 0.2).normalized(), 0.7),
            position: Vec3::new(0.5, -1.5, 2.0),
        };
        let m = pose.to_matrix();
        let back = Pose::from_matrix(&m).unwrap();
        assert!((back.position - pose.position).norm() < 1e-12);
        let mut bad = m;
        bad[0][0] += 0.01;
        assert!(Pose::from_matrix(&bad).is_err());
        let mut skew = m;
        skew[3][0] = 0.1;
        assert!(Pose::from_matrix(&skew).is_err());
    }

    #[test]
    fn midpoint_samples_match_hand_values() {
        assert_eq!(sample_midpoints(4, 1.0, 5.0), vec![1.5, 2.5, 3.5, 4.5]);
        assert_eq!(sample_ray(4, 1.0, 5.0, false, 123), vec![1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn stratified_samples_stay_in_bins_and_reproduce() {
        let a = sample_ray(32, 0.5, 6.5, true, 7);
        let b = sample_ray(32, 0.5, 6.5, true, 7);
        let c = sample_ray(32, 0.5, 6.5, true, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let step = 6.0 / 32.0;
        for (i, &t) in a.iter().enumerate() {
            assert!(t >= 0.5 + i as f64 * step && t < 0.5 + (i + 1) as f64 * step);
            if i > 0 {
                assert!(t > a[i - 1]);
            }
        }
    }

    #[test]
    fn weights_and_leftover_transmittance_sum_to_one() {
        let bbox = Aabb::new(Vec3::new(-2.0, -2.0, 0.0), Vec3::new(2.0, 2.0, 8.0));
        let field = random_field([8, 8, 12], bbox, 21);
        let cam = identity_camera(16, 12);
        let mut rng = SeedRng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = rng.gen_range(0..16) as f64;
            let y = rng.gen_range(0..12) as f64;
            let ray = cam.ray_through_pixel(x, y);
            let ts = sample_ray(33, 0.1, 9.0, true, rng.gen());
            let r = render_ray(&field, &ray, &ts, 9.0);
            // Recompute the weight sum directly.
            let mut wsum = 0.0;
            let mut trans = 1.0;
            for (i, &t) in ts.iter().enumerate() {
                let next = if i + 1 < ts.len() { ts[i + 1] } else { 9.0 };
                let s = field.query(ray.at(t));
                let keep = (-s.sigma * (next - t)).exp();
                wsum += trans * (1.0 - keep);
                trans *= keep;
            }
            assert!((wsum + r.transmittance - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn homogeneous_medium_matches_analytic_transmittance() {
        let bbox = Aabb::new(Vec3::new(-3.0, -3.0, 0.0), Vec3::new(3.0, 3.0, 8.0));
        let sigma0 = 0.5;
        let raw = sigma0_inverse(sigma0);
        assert_relative_eq!(softplus(raw), sigma0, epsilon = 1e-12);
        let mut field = VoxelField::init([4, 4, 4], bbox, &FieldInit::default()).unwrap();
        field.density_raw.iter_mut().for_each(|d| *d = raw);
        let ray = Ray {
            origin: Vec3::new(0.0, 0.0, 0.0),
            dir: Vec3::new(0.0, 0.0, 1.0),
        };
        let ts = sample_midpoints(1024, 1.0, 5.0);
        let r = render_ray(&field, &ray, &ts, 5.0);
        let analytic = (-sigma0 * 4.0).exp();
        assert!(
            (r.transmittance - analytic).abs() < 1e-3,
            "got {}, analytic {}",
            r.transmittance,
            analytic
        );
    }

    /// Inverse of softplus: raw value whose activation is the target sigma.
    fn sigma0_inverse(sigma: f64) -> f64 {
        (sigma.exp() - 1.0).ln()
    }

    #[test]
    fn opaque_slab_depth_matches_plane_intersection() {
        // Dense half-space z >= 2 with a one-centimeter activation ramp.
        let bbox = Aabb::new(Vec3::new(-2.0, -2.0, 0.0), Vec3::new(2.0, 2.0, 4.0));
        let nz = 401;
        let mut field = VoxelField::init([2, 2, nz], bbox, &FieldInit::default()).unwrap();
        for z in 0..nz {
            let zpos = 4.0 * z as f64 / (nz - 1) as f64;
            let raw = if zpos >= 2.0 { 300.0 } else { -30.0 };
            for y in 0..2 {
                for x in 0..2 {
                    let idx = field.node_index(x, y, z);
                    field.density_raw[idx] = raw;
                }
            }
        }
        let n = 64;
        let spacing = 3.0 / n as f64;
        for dir in [
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.3, 0.1, 1.0).normalized(),
        ] {
            let ray = Ray {
                origin: Vec3::new(0.0, 0.0, 0.5),
                dir,
            };
            let ts = sample_midpoints(n, 0.5, 3.5);
            let r = render_ray(&field, &ray, &ts, 3.5);
            // Analytic ray-plane hit with the plane z = 2.
            let t_star = (2.0 - ray.origin.z) / ray.dir.z;
            assert!(
                (r.depth - t_star).abs() < spacing,
                "depth {} vs plane hit {} (spacing {})",
                r.depth,
                t_star,
                spacing
            );
            assert!(r.transmittance < 1e-6);
        }
    }

    #[test]
    fn empty_space_renders_black_at_depth_zero() {
        let bbox = Aabb::new(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 4.0));
        let mut field = VoxelField::init([3, 3, 3], bbox, &FieldInit::default()).unwrap();
        field.density_raw.iter_mut().for_each(|d| *d = -200.0);
        let ray = Ray {
            origin: Vec3::ZERO,
            dir: Vec3::new(0.0, 0.0, 1.0),
        };
        let ts = sample_midpoints(16, 0.5, 3.5);
        let r = render_ray(&field, &ray, &ts, 3.5);
        assert_eq!(r.color, Vec3::ZERO);
        assert_eq!(r.depth, 0.0);
        assert_relative_eq!(r.transmittance, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn occupied_depth_stays_between_bounds() {
        let bbox = Aabb::new(Vec3::new(-2.0, -2.0, 0.0), Vec3::new(2.0, 2.0, 6.0));
        let field = random_field([6, 6, 9], bbox, 5);
        let cam = identity_camera(10, 8);
        let mut rng = SeedRng::seed_from_u64(6);
        for _ in 0..200 {
            let ray = cam.ray_through_pixel(rng.gen_range(0..10) as f64, rng.gen_range(0..8) as f64);
            let ts = sample_ray(24, 0.2, 7.0, true, rng.gen());
            let r = render_ray(&field, &ray, &ts, 7.0);
            let occupancy = 1.0 - r.transmittance;
            if occupancy > 1e-9 {
                let mean_t = r.depth / occupancy;
                assert!(mean_t >= 0.2 - 1e-9 && mean_t <= 7.0 + 1e-9);
            }
        }
    }

    #[test]
    fn forward_paths_agree_bitwise() {
        let bbox = Aabb::new(Vec3::new(-2.0, -2.0, 0.0), Vec3::new(2.0, 2.0, 6.0));
        let field = random_field([5, 5, 7], bbox, 9);
        let cam = identity_camera(6, 6);
        let ts = sample_ray(16, 0.2, 6.5, true, 44);
        let mut work = RayWork::new();
        for y in 0..6 {
            for x in 0..6 {
                let ray = cam.ray_through_pixel(x as f64, y as f64);
                let a = render_ray(&field, &ray, &ts, 6.5);
                let b = render_ray_forward(&field, &ray, &ts, 6.5, &mut work);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn ray_backward_matches_central_differences() {
        let bbox = Aabb::new(Vec3::new(-1.5, -1.5, 0.0), Vec3::new(1.5, 1.5, 4.0));
        let base = random_field([3, 3, 4], bbox, 33);
        let cam = identity_camera(5, 5);
        let mut rng = SeedRng::seed_from_u64(34);
        for trial in 0..6 {
            let ray =
                cam.ray_through_pixel(rng.gen_range(0..5) as f64, rng.gen_range(0..5) as f64);
            let ts = sample_ray(8, 0.3, 4.5, trial % 2 == 0, rng.gen());
            let d_color = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let d_depth = rng.gen_range(-1.0..1.0);
            let mut grad = ParamGrad::zeros(&base);
            render_ray_backward(&base, &ray, &ts, 4.5, d_color, d_depth, &mut grad);

            let object = |f: &VoxelField| {
                let r = render_ray(f, &ray, &ts, 4.5);
                d_color.dot(r.color) + d_depth * r.depth
            };
            let h = 1e-5;
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..base.density_raw.len() {
                let mut hi = base.clone();
                let mut lo = base.clone();
                hi.density_raw[i] += h;
                lo.density_raw[i] -= h;
                let fd = (object(&hi) - object(&lo)) / (2.0 * h);
                num += (grad.density[i] - fd).powi(2);
                den += fd * fd;
            }
            for i in 0..base.color_raw.len() {
                let mut hi = base.clone();
                let mut lo = base.clone();
                hi.color_raw[i] += h;
                lo.color_raw[i] -= h;
                let fd = (object(&hi) - object(&lo)) / (2.0 * h);
                num += (grad.color[i] - fd).powi(2);
                den += fd * fd;
            }
            let rel = (num / den.max(1e-300)).sqrt();
            assert!(rel < 1e-5, "render gradient relative error {rel}");
        }
    }

    #[test]
    fn backward_survives_saturated_alpha() {
        // A sample chain with alpha essentially 1 early on: the suffix
        // recurrence must stay finite where a 1/(1-alpha) form would not.
        let bbox = Aabb::new(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 4.0));
        let mut field = VoxelField::init([3, 3, 4], bbox, &FieldInit::default()).unwrap();
        field.density_raw.iter_mut().for_each(|d| *d = 400.0);
        let ray = Ray {
            origin: Vec3::ZERO,
            dir: Vec3::new(0.0, 0.0, 1.0),
        };
        let ts = sample_midpoints(16, 0.5, 3.5);
        let mut grad = ParamGrad::zeros(&field);
        render_ray_backward(&field, &ray, &ts, 3.5, Vec3::new(1.0, 1.0, 1.0), 1.0, &mut grad);
        assert!(grad.density.iter().all(|g| g.is_finite()));
        assert!(grad.color.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn render_image_equals_per_pixel_loop() {
        let bbox = Aabb::new(Vec3::new(-2.0, -2.0, 0.0), Vec3::new(2.0, 2.0, 6.0));
        let field = random_field([6, 6, 8], bbox, 50);
        let cam = identity_camera(8, 6);
        let (rgb, depth) = render_image(&field, &cam, 12, 0.2, 6.5);
        let ts = sample_midpoints(12, 0.2, 6.5);
        for y in 0..6u32 {
            for x in 0..8u32 {
                let ray = cam.ray_through_pixel(x as f64, y as f64);
                let r = render_ray(&field, &ray, &ts, 6.5);
                assert_eq!(rgb.get(x, y), r.color);
                assert_eq!(depth.get(x, y), r.depth);
            }
        }
    }

    #[test]
    fn far_bound_covers_every_corner() {
        let bbox = Aabb::new(Vec3::new(-1.0, -2.0, 0.0), Vec3::new(3.0, 2.0, 5.0));
        let origin = Vec3::new(0.5, 0.0, -1.0);
        let far = far_bound(&bbox, origin);
        for i in 0..8 {
            assert!((bbox.corner(i) - origin).norm() <= far);
        }
    }

    #[test]
    fn outside_bbox_samples_are_empty() {
        let bbox = Aabb::new(Vec3::new(-1.0, -1.0, 2.0), Vec3::new(1.0, 1.0, 4.0));
        let field = random_field([4, 4, 4], bbox, 60);
        // Ray passes through the box; samples before z=2 see empty space.
        assert_eq!(field.query(Vec3::new(0.0, 0.0, 1.0)), FieldSample::EMPTY);
    }
}
