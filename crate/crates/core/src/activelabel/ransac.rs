use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::pillar::{PillarConfig, PillarPartition};
use crate::error::{input_err, Result};
use crate::geometry::Point3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier distance in meters.
    pub inlier_threshold: f64,
    /// Largest accepted angle between plane normal and vertical, degrees.
    pub max_tilt_deg: f64,
    /// Largest vertical offset of a pillar plane from the scene-level plane over the
    /// pillar footprint, meters.
    /// `None` disables the check.
    pub max_plane_offset: Option<f64>,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 200, inlier_threshold: 0.1, max_tilt_deg: 15.0, max_plane_offset: Some(0.3), seed: 0 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(input_err("RANSAC needs at least one iteration"));
        }
        if !(self.inlier_threshold > 0.0) || !(0.0..=90.0).contains(&self.max_tilt_deg) {
            return Err(input_err("RANSAC threshold must be positive and tilt within [0, 90]"));
        }
        Ok(())
    }
}

/// Plane `n · p = d` with unit normal pointing up (`n.z >= 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub d: f64,
}

impl Plane {
    fn through(a: &Point3, b: &Point3, c: &Point3) -> Option<Plane> {
        let (a, b, c) = (Vector3::from(*a), Vector3::from(*b), Vector3::from(*c));
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        let scale = (b - a).norm().max((c - a).norm()).max(1e-12);
        if len <= 1e-9 * scale * scale {
            return None;
        }
        Self::oriented(n / len, a)
    }

    fn oriented(n: Vector3<f64>, on: Vector3<f64>) -> Option<Plane> {
        let n = if n.z < 0.0 { -n } else { n };
        Some(Plane { normal: n, d: n.dot(&on) })
    }

    pub fn distance(&self, p: &Point3) -> f64 {
        (self.normal.dot(&Vector3::from(*p)) - self.d).abs()
    }

    pub fn tilt_deg(&self) -> f64 {
        self.normal.z.clamp(-1.0, 1.0).acos().to_degrees()
    }

    /// Height of the plane above `(x, y)`; `None` for (near-)vertical planes.
    pub fn z_at(&self, x: f64, y: f64) -> Option<f64> {
        (self.normal.z > 1e-9).then(|| (self.d - self.normal.x * x - self.normal.y * y) / self.normal.z)
    }

    /// Total least-squares plane; `None` when the points are (nearly) collinear.
    pub fn fit(points: &[Point3]) -> Option<Plane> {
        if points.len() < 3 {
            return None;
        }
        let n = points.len() as f64;
        let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / n;
        let mut cov = Matrix3::zeros();
        for p in points {
            let q = Vector3::from(*p) - centroid;
            cov += q * q.transpose();
        }
        let eig = SymmetricEigen::new(cov / n);
        let mut idx = [0, 1, 2];
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        // the two largest spreads must span a plane
        if eig.eigenvalues[idx[1]] <= 1e-12 * eig.eigenvalues[idx[2]].max(1e-300) {
            return None;
        }
        Self::oriented(eig.eigenvectors.column(idx[0]).into_owned(), centroid)
    }
}

fn pillar_seed(seed: u64, pillar: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pillar + 1);
    rng
}

/// Best admissible plane over `idx` by inlier count, refit on its inliers. Minimal
/// samples are drawn from `pool`; a plane is admissible when it is near-horizontal
/// and passes `gate`.
fn ransac_plane(
    points: &[Point3],
    idx: &[usize],
    pool: &[usize],
    cfg: &RansacConfig,
    rng: &mut ChaCha8Rng,
    gate: &dyn Fn(&Plane) -> bool,
) -> Option<Plane> {
    if idx.len() < 3 || pool.len() < 3 {
        return None;
    }
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..cfg.iterations {
        let a = rng.random_range(0..pool.len());
        let b = rng.random_range(0..pool.len());
        let c = rng.random_range(0..pool.len());
        if a == b || b == c || a == c {
            continue;
        }
        let Some(plane) = Plane::through(&points[pool[a]], &points[pool[b]], &points[pool[c]]) else {
            continue;
        };
        if plane.tilt_deg() > cfg.max_tilt_deg || !gate(&plane) {
            continue;
        }
        let count = idx.iter().filter(|&&i| plane.distance(&points[i]) <= cfg.inlier_threshold).count();
        if best.is_none_or(|(bc, _)| count > bc) {
            best = Some((count, plane));
        }
    }
    let (_, plane) = best?;
    let inliers: Vec<Point3> =
        idx.iter().map(|&i| points[i]).filter(|p| plane.distance(p) <= cfg.inlier_threshold).collect();
    match Plane::fit(&inliers) {
        Some(refit) if refit.tilt_deg() <= cfg.max_tilt_deg && gate(&refit) => Some(refit),
        _ => Some(plane),
    }
}

/// Ground mask: per-pillar RANSAC planes, gated by tilt and (optionally) by their
/// offset from a scene-level plane, which also covers pillars without a plane of
/// their own. Deterministic for a given `ransac.seed`.
pub fn detect_ground(points: &[Point3], pillars: &PillarConfig, ransac: &RansacConfig) -> Result<Vec<bool>> {
    ransac.validate()?;
    let partition = PillarPartition::new(points, pillars)?;
    let all: Vec<usize> = (0..points.len()).collect();
    let reference = match ransac.max_plane_offset {
        Some(_) => {
            let mut rng = pillar_seed(ransac.seed, u64::MAX - 1);
            let cfg = RansacConfig { iterations: ransac.iterations.max(500), ..*ransac };
            ransac_plane(points, &all, &all, &cfg, &mut rng, &|_| true)
        }
        None => None,
    };
    let members = partition.members();
    let per_pillar: Vec<Vec<usize>> = members
        .par_iter()
        .enumerate()
        .map(|(pid, idx)| {
            let mut rng = pillar_seed(ransac.seed, pid as u64);
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for &i in idx {
                for k in 0..2 {
                    lo[k] = lo[k].min(points[i][k]);
                    hi[k] = hi[k].max(points[i][k]);
                }
            }
            // the plane must stay near the reference over the pillar's footprint
            // (checking the bounding-box corners suffices for planes); this rejects
            // e.g. a car roof covering a whole pillar
            let gate = |plane: &Plane| match (ransac.max_plane_offset, reference) {
                (Some(max_off), Some(reference)) => [(lo[0], lo[1]), (lo[0], hi[1]), (hi[0], lo[1]), (hi[0], hi[1])]
                    .iter()
                    .all(|&(x, y)| match (plane.z_at(x, y), reference.z_at(x, y)) {
                        (Some(a), Some(b)) => (a - b).abs() <= max_off,
                        _ => false,
                    }),
                _ => true,
            };
            // hypotheses come from points near the reference only; a pillar under a
            // large object would otherwise almost never draw three ground points
            let pool: Vec<usize> = match (ransac.max_plane_offset, reference) {
                (Some(max_off), Some(reference)) => idx
                    .iter()
                    .copied()
                    .filter(|&i| reference.distance(&points[i]) <= max_off + ransac.inlier_threshold)
                    .collect(),
                _ => idx.clone(),
            };
            // too few points for a hypothesis (sparse far pillars) or none passing
            // the gates: the scene-level plane stands in
            let Some(plane) = ransac_plane(points, idx, &pool, ransac, &mut rng, &gate).or(reference) else {
                return Vec::new();
            };
            idx.iter().copied().filter(|&i| plane.distance(&points[i]) <= ransac.inlier_threshold).collect()
        })
        .collect();
    let mut mask = vec![false; points.len()];
    for i in per_pillar.into_iter().flatten() {
        mask[i] = true;
    }
    Ok(mask)
}
