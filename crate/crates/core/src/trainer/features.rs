//! Handcrafted per-point descriptors for the point branch.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use ndarray::Array2;
use rayon::prelude::*;

use crate::activelabel::Plane;
use crate::geometry::{rotate_z, Point3};

const SCALE_FEATURES: usize = 9;
pub const POINT_FEATURE_DIM: usize = 3 + 2 * SCALE_FEATURES;
pub const DEFAULT_NEIGHBORS: usize = 48;
/// Size of the inner neighbourhood.
pub const SMALL_SCALE: usize = 16;

/// `k` nearest neighbours per point (the point itself first), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    pub k: usize,
    pub idx: Vec<u32>,
}

impl Neighborhoods {
    pub fn of(&self, i: usize) -> &[u32] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }
}

fn dist2(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Exact k-nearest neighbours; ties go to the smaller index. Neighbour sets are
/// invariant under rotation and uniform scaling, so they are computed once per scene.
pub fn knn(points: &[Point3], k: usize) -> Neighborhoods {
    let k = k.min(points.len()).max(1);
    let idx = points
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, p)| {
            let mut d: Vec<(f64, u32)> = points.iter().enumerate().map(|(j, q)| (dist2(p, q), j as u32)).collect();
            let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, cmp);
                d.truncate(k);
            }
            d.sort_by(cmp);
            // the point itself leads even when it has duplicates
            if let Some(pos) = d.iter().position(|e| e.1 as usize == i) {
                d[..=pos].rotate_right(1);
            }
            d.into_iter().map(|e| e.1).collect::<Vec<_>>()
        })
        .collect();
    Neighborhoods { k, idx }
}

/// Plane through the low points: a fit to the lowest 30% by height, refit to
/// the points within 0.25 m of it.
pub fn reference_plane(points: &[Point3]) -> Plane {
    let flat = Plane { normal: Vector3::z(), d: 0.0 };
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a][2].total_cmp(&points[b][2]).then(a.cmp(&b)));
    let low: Vec<Point3> =
        order[..(points.len() * 3 / 10).max(3).min(points.len())].iter().map(|&i| points[i]).collect();
    let Some(first) = Plane::fit(&low) else { return flat };
    let near: Vec<Point3> = points.iter().copied().filter(|p| first.distance(p) < 0.25).collect();
    Plane::fit(&near).unwrap_or(first)
}

fn signed_height(plane: &Plane, p: &Point3) -> f64 {
    plane.normal.dot(&Vector3::from(*p)) - plane.d
}

/// Shape statistics of one neighbourhood: density, linearity, planarity,
/// scattering, normal tilt, principal-axis verticality, z-extent and the max/min
/// height above `plane`.
fn neighbourhood_stats(points: &[Point3], plane: &Plane, p: &Point3, nb: &[u32]) -> [f64; SCALE_FEATURES] {
    let q: Vec<Vector3<f64>> = nb.iter().map(|&j| Vector3::from(points[j as usize])).collect();
    let c = q.iter().fold(Vector3::zeros(), |a, v| a + v) / q.len() as f64;
    let mut cov = Matrix3::zeros();
    for v in &q {
        cov += (v - c) * (v - c).transpose();
    }
    let eig = SymmetricEigen::new(cov / q.len() as f64);
    let mut o = [0, 1, 2];
    o.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l: Vec<f64> = o.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let l1 = l[0].max(1e-12);
    let normal = eig.eigenvectors.column(o[2]);
    let axis = eig.eigenvectors.column(o[0]);
    let (mut hmin, mut hmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &j in nb {
        let h = signed_height(plane, &points[j as usize]);
        hmin = hmin.min(h);
        hmax = hmax.max(h);
        zmin = zmin.min(points[j as usize][2]);
        zmax = zmax.max(points[j as usize][2]);
    }
    let range = (p[0] * p[0] + p[1] * p[1]).sqrt();
    let radius = dist2(p, &points[*nb.last().unwrap() as usize]).sqrt();
    [
        (radius.max(1e-3) / range.max(1.0)).ln(),
        (l[0] - l[1]) / l1,
        (l[1] - l[2]) / l1,
        l[2] / l1,
        1.0 - normal.z.abs(),
        axis.z.abs(),
        zmax - zmin,
        hmax,
        hmin,
    ]
}

/// Feature rows: height above the reference plane, range and intensity, then
/// [`neighbourhood_stats`] over the nearest `SMALL_SCALE` neighbours and over the
/// full neighbourhood.
pub fn point_features(points: &[Point3], intensity: &[f64], nbrs: &Neighborhoods) -> Array2<f64> {
    let all: Vec<usize> = (0..points.len()).collect();
    point_features_rows(points, intensity, nbrs, &all)
}

/// [`point_features`] for the points in `rows` only (in that order).
pub fn point_features_rows(points: &[Point3], intensity: &[f64], nbrs: &Neighborhoods, rows: &[usize]) -> Array2<f64> {
    let plane = reference_plane(points);
    let out: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|&i| {
            let p = points[i];
            let nb = nbrs.of(i);
            let mut f = Vec::with_capacity(POINT_FEATURE_DIM);
            f.extend([signed_height(&plane, &p), (p[0] * p[0] + p[1] * p[1]).sqrt() / 10.0, intensity[i]]);
            f.extend(neighbourhood_stats(points, &plane, &p, &nb[..SMALL_SCALE.min(nb.len())]));
            f.extend(neighbourhood_stats(points, &plane, &p, nb));
            f
        })
        .collect();
    Array2::from_shape_fn((rows.len(), POINT_FEATURE_DIM), |(i, k)| out[i][k])
}

/// Rotation about the vertical axis followed by uniform scaling.
pub fn augment(points: &[Point3], angle: f64, scale: f64) -> Vec<Point3> {
    points
        .iter()
        .map(|p| {
            let r = rotate_z(p, angle);
            [r[0] * scale, r[1] * scale, r[2] * scale]
        })
        .collect()
}
