//! Per-scene training inputs restricted to the camera-visible points.

use ndarray::{Array2, ArrayView2};

use super::features::{knn, point_features, Neighborhoods, DEFAULT_NEIGHBORS};
use crate::error::{input_err, Result};
use crate::geometry::{camera_subset, project_all, PixelHit, Point3};
use crate::superpixel::{pixel_descriptors, superpixel_features, SuperpixelMap, PIXEL_DESCRIPTOR_DIM};
use crate::synth::SceneFrame;

/// One camera's superpixels with their pooled pixel descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSuperpixels {
    pub map: SuperpixelMap,
    pub pooled: Array2<f64>,
    /// Hits of this camera, indexed in the subset.
    pub hits: Vec<PixelHit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub seed: u64,
    /// Indices of the subset in the full frame.
    pub subset: Vec<usize>,
    pub points: Vec<Point3>,
    pub intensity: Vec<f64>,
    pub gt: Vec<usize>,
    pub neighbors: Neighborhoods,
    pub point_features: Array2<f64>,
    /// Pixel descriptor under each point's nearest hit.
    pub pixel_features: Array2<f64>,
    /// Empty when no superpixels were supplied.
    pub cameras: Vec<CameraSuperpixels>,
}

impl SceneData {
    /// Keeps the points seen by at least one camera. `superpixels`, when given,
    /// holds one map per camera.
    pub fn build(frame: &SceneFrame, superpixels: Option<&[SuperpixelMap]>) -> Result<Self> {
        let subset = camera_subset(frame);
        let sub = frame.restrict(&subset);
        let hits_per_camera = project_all(&sub.points, &sub.cameras);
        let descriptors: Vec<_> = sub.images.iter().map(pixel_descriptors).collect();
        let mut nearest: Vec<Option<PixelHit>> = vec![None; sub.len()];
        for hits in &hits_per_camera {
            for h in hits {
                let slot = &mut nearest[h.point_index];
                if slot.is_none_or(|b| h.depth < b.depth) {
                    *slot = Some(*h);
                }
            }
        }
        let mut pixel_features = Array2::zeros((sub.len(), PIXEL_DESCRIPTOR_DIM));
        for (i, h) in nearest.iter().enumerate() {
            let h = h.ok_or_else(|| input_err("camera subset point without a hit"))?;
            let (x, y) = h.pixel();
            for k in 0..PIXEL_DESCRIPTOR_DIM {
                pixel_features[[i, k]] = descriptors[h.camera_index][[y, x, k]];
            }
        }
        let cameras = match superpixels {
            None => Vec::new(),
            Some(maps) => {
                if maps.len() != sub.cameras.len() {
                    return Err(input_err(format!("{} superpixel maps for {} cameras", maps.len(), sub.cameras.len())));
                }
                maps.iter()
                    .zip(&descriptors)
                    .zip(hits_per_camera)
                    .map(|((m, d), hits)| {
                        Ok(CameraSuperpixels { map: m.clone(), pooled: superpixel_features(m, d)?, hits })
                    })
                    .collect::<Result<_>>()?
            }
        };
        let neighbors = knn(&sub.points, DEFAULT_NEIGHBORS);
        let point_features = point_features(&sub.points, &sub.intensity, &neighbors);
        Ok(Self {
            seed: frame.seed,
            subset,
            points: sub.points,
            intensity: sub.intensity,
            gt: sub.gt_class,
            neighbors,
            point_features,
            pixel_features,
            cameras,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rows of `m` in `rows` order.
pub fn gather_rows(m: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), m.ncols()), |(r, c)| m[[rows[r], c]])
}
