//! Plane fitting on 3D point sets. A plane is estimated as the barycenter
//! plus the singular direction with the smallest singular value of the
//! centered coordinate matrix; that smallest singular value doubles as a
//! coplanarity measure with an analytic gradient, so it can drive training.
//! A RANSAC wrapper handles contaminated point sets.

use crate::error::{Error, Result};
use crate::math::Vec3;
use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

/// Deterministic RNG used across the crate. The algorithm is pinned (not the
/// `StdRng` alias) so seeded runs reproduce across rand upgrades.
pub type SeedRng = rand_chacha::ChaCha12Rng;

/// Below this, sigma3 is treated as exactly zero and its gradient as the zero
/// subgradient.
pub const SIGMA3_DEGENERATE: f64 = 1e-12;

/// Gap between sigma2 and sigma3 under which the smallest singular direction
/// is ambiguous and the gradient is flagged as ill conditioned.
pub const DEGENERACY_GAP: f64 = 1e-8;

const JACOBI_MAX_SWEEPS: usize = 30;
const JACOBI_REL_TOL: f64 = 1e-14;

/// Mean of a point set.
pub fn barycenter(points: &[Vec3]) -> Result<Vec3> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let mut sum = Vec3::ZERO;
    for &p in points {
        sum += p;
    }
    Ok(sum / points.len() as f64)
}

/// Least-squares plane through a point set.
///
/// `singular_values` are those of the centered coordinate matrix, sorted
/// descending; `singular_values[2]` is the root of the summed squared
/// distances to the plane. The normal is the corresponding singular
/// direction, oriented so that its dot with +z (then +y, then +x on exact
/// ties) is nonnegative.
#[derive(Debug, Clone)]
pub struct PlaneFit {
    pub centroid: Vec3,
    pub normal: Vec3,
    pub singular_values: [f64; 3],
}

impl PlaneFit {
    /// Signed distance from `p` to the fitted plane.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        (p - self.centroid).dot(self.normal)
    }
}

/// Smallest singular value of the centered point matrix together with its
/// gradient with respect to every input point.
#[derive(Debug, Clone)]
pub struct Sigma3Grad {
    pub sigma3: f64,
    pub grad: Vec<Vec3>,
    /// True when sigma2 - sigma3 fell below the degeneracy gap, in which case
    /// the gradient direction is unreliable (the smallest singular direction
    /// is not isolated).
    pub ill_conditioned: bool,
}

/// Plane estimate from a contaminated point set plus the consensus set it was
/// refit on.
#[derive(Debug, Clone)]
pub struct RansacPlane {
    pub fit: PlaneFit,
    /// Indices of the points within `threshold` of the winning hypothesis.
    pub inliers: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RansacParams {
    pub iterations: usize,
    /// Inlier band: absolute point-to-plane distance in scene units.
    pub threshold: f64,
    /// Required fraction of all points in the consensus set.
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            iterations: 100,
            threshold: 0.05,
            min_inlier_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Full SVD of the centered N x 3 coordinate matrix A: sigma sorted
/// descending, `v` the matching right singular directions, and `col3` the
/// rotated data column equal to sigma3 * u3.
struct CenteredSvd {
    centroid: Vec3,
    sigma: [f64; 3],
    v: [Vec3; 3],
    col3: Vec<f64>,
}

/// One-sided cyclic Jacobi SVD of the centered coordinates. Rotations act on
/// the three data columns directly rather than on the 3x3 Gram matrix; that
/// keeps small singular values accurate to machine precision times the data
/// scale instead of its square root, which the coplanarity tolerances below
/// 1e-9 require.
fn centered_svd(points: &[Vec3]) -> Result<CenteredSvd> {
    if points.len() < 3 {
        return Err(Error::UnderdeterminedPlane(points.len()));
    }
    let centroid = barycenter(points)?;
    let n = points.len();
    let mut cols: [Vec<f64>; 3] = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for &p in points {
        let d = p - centroid;
        cols[0].push(d.x);
        cols[1].push(d.y);
        cols[2].push(d.z);
    }
    // Right singular vectors accumulate the same plane rotations.
    let mut v = [
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
    ];

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let (cp, cq) = if p < q {
                let (a, b) = cols.split_at_mut(q);
                (&mut a[p], &mut b[0])
            } else {
                unreachable!()
            };
            let mut app = 0.0;
            let mut aqq = 0.0;
            let mut apq = 0.0;
            for i in 0..n {
                app += cp[i] * cp[i];
                aqq += cq[i] * cq[i];
                apq += cp[i] * cq[i];
            }
            if apq.abs() <= JACOBI_REL_TOL * (app * aqq).sqrt() {
                continue;
            }
            let tau = (aqq - app) / (2.0 * apq);
            let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for i in 0..n {
                let xp = cp[i];
                let xq = cq[i];
                cp[i] = c * xp - s * xq;
                cq[i] = s * xp + c * xq;
            }
            let vp = v[p];
            let vq = v[q];
            v[p] = vp * c - vq * s;
            v[q] = vp * s + vq * c;
            rotated = true;
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());
    let sigma = [norms[order[0]], norms[order[1]], norms[order[2]]];
    let v_sorted = [v[order[0]], v[order[1]], v[order[2]]];
    let col3 = std::mem::take(&mut cols[order[2]]);
    Ok(CenteredSvd {
        centroid,
        sigma,
        v: v_sorted,
        col3,
    })
}

/// Orients `n` so its dot with +z is positive, breaking exact ties on +y and
/// then +x. Returns true when the vector was flipped.
fn orient_normal(n: &mut Vec3) -> bool {
    let flip = if n.z != 0.0 {
        n.z < 0.0
    } else if n.y != 0.0 {
        n.y < 0.0
    } else {
        n.x < 0.0
    };
    if flip {
        *n = -*n;
    }
    flip
}

/// Fits the least-squares plane through `points`.
///
/// Fails with `UnderdeterminedPlane` for fewer than 3 points. Collinear or
/// coincident sets still return a fit; they are recognizable by
/// `singular_values[1]` also being (near) zero.
pub fn fit_plane(points: &[Vec3]) -> Result<PlaneFit> {
    let svd = centered_svd(points)?;
    let mut normal = svd.v[2];
    orient_normal(&mut normal);
    Ok(PlaneFit {
        centroid: svd.centroid,
        normal,
        singular_values: svd.sigma,
    })
}

/// Smallest singular value of the centered point matrix and its gradient.
///
/// With u3 the left and v3 the right singular direction of sigma3, the
/// gradient for point k is (u3_k - mean(u3)) * v3; the mean term is the
/// centering correction (it vanishes analytically but is kept so the formula
/// matches the factorization actually computed). Below `SIGMA3_DEGENERATE`
/// the zero subgradient is returned.
pub fn sigma3_with_gradient(points: &[Vec3]) -> Result<Sigma3Grad> {
    sigma3_with_gradient_gap(points, DEGENERACY_GAP)
}

/// `sigma3_with_gradient` with an explicit degeneracy gap for the
/// ill-conditioning flag.
pub fn sigma3_with_gradient_gap(points: &[Vec3], gap: f64) -> Result<Sigma3Grad> {
    let svd = centered_svd(points)?;
    let sigma3 = svd.sigma[2];
    let ill_conditioned = svd.sigma[1] - sigma3 < gap;
    if sigma3 < SIGMA3_DEGENERATE {
        return Ok(Sigma3Grad {
            sigma3,
            grad: vec![Vec3::ZERO; points.len()],
            ill_conditioned,
        });
    }
    // The gradient is invariant to the joint sign of (u3, v3), so the
    // pre-orientation v3 is fine here.
    let v3 = svd.v[2];
    let inv = 1.0 / sigma3;
    let mean_u: f64 = svd.col3.iter().sum::<f64>() * inv / points.len() as f64;
    let grad = svd
        .col3
        .iter()
        .map(|&c| v3 * (c * inv - mean_u))
        .collect();
    Ok(Sigma3Grad {
        sigma3,
        grad,
        ill_conditioned,
    })
}

/// Plane estimate robust to outliers: hypotheses from random 3-point samples,
/// scored by consensus within `threshold`, winner refit on its full consensus
/// set with `fit_plane`. Deterministic for a fixed seed.
pub fn ransac_plane(points: &[Vec3], params: &RansacParams) -> Result<RansacPlane> {
    if points.len() < 3 {
        return Err(Error::UnderdeterminedPlane(points.len()));
    }
    let n = points.len();
    let mut rng = SeedRng::seed_from_u64(params.seed);
    let mut best_count = 0usize;
    let mut best: Option<(Vec3, Vec3)> = None; // (point on plane, unit normal)

    for _ in 0..params.iterations {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n);
        while j == i {
            j = rng.gen_range(0..n);
        }
        let mut k = rng.gen_range(0..n);
        while k == i || k == j {
            k = rng.gen_range(0..n);
        }
        let normal = (points[j] - points[i]).cross(points[k] - points[i]);
        let norm = normal.norm();
        if norm < 1e-12 {
            continue; // Collinear sample, no plane hypothesis.
        }
        let normal = normal / norm;
        let count = points
            .iter()
            .filter(|&&p| (p - points[i]).dot(normal).abs() <= params.threshold)
            .count();
        if count > best_count {
            best_count = count;
            best = Some((points[i], normal));
        }
    }

    let required = (params.min_inlier_fraction * n as f64).ceil() as usize;
    let (anchor, normal) = match best {
        Some(b) if best_count >= required.max(3) => b,
        _ => {
            return Err(Error::NoConsensusPlane {
                best: best_count as f64 / n as f64,
                required: params.min_inlier_fraction,
            })
        }
    };
    let inliers: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, &p)| (p - anchor).dot(normal).abs() <= params.threshold)
        .map(|(i, _)| i)
        .collect();
    let subset: Vec<Vec3> = inliers.iter().map(|&i| points[i]).collect();
    let fit = fit_plane(&subset)?;
    Ok(RansacPlane { fit, inliers })
}
