//! Active labeling: pillar RANSAC ground removal, HDBSCAN pre-segmentation and a
//! simulated cluster-level annotator.

mod annotate;
mod hdbscan;
mod labels;
mod pillar;
mod ransac;
mod stats;

pub use annotate::{medoid, simulate_annotation};
pub use hdbscan::{core_distances, hdbscan, mutual_reachability_mst, HdbscanConfig};
pub use labels::{Clustering, LabelKind, LabelSet, PseudoLabel};
pub use pillar::{pillar_of, PillarConfig, PillarPartition};
pub use ransac::{detect_ground, Plane, RansacConfig};
pub use stats::{label_statistics, LabelStatistics};

use crate::error::Result;
use crate::geometry::Point3;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActiveLabelConfig {
    pub pillars: PillarConfig,
    pub ransac: RansacConfig,
    pub hdbscan: HdbscanConfig,
}

/// Output of the labeling pipeline for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveLabeling {
    pub ground: Vec<bool>,
    /// Annotation units: detected ground is unit 0, then the HDBSCAN clusters.
    pub units: Clustering,
    pub labels: LabelSet,
}

/// Ground detection, clustering of the remaining points, then annotation.
pub fn active_label(points: &[Point3], gt_class: &[usize], cfg: &ActiveLabelConfig) -> Result<ActiveLabeling> {
    let ground = detect_ground(points, &cfg.pillars, &cfg.ransac)?;
    let rest: Vec<usize> = (0..points.len()).filter(|&i| !ground[i]).collect();
    let rest_points: Vec<Point3> = rest.iter().map(|&i| points[i]).collect();
    let sub = hdbscan(&rest_points, &cfg.hdbscan)?;
    let units = Clustering::with_ground(&ground, &rest, &sub);
    let labels = simulate_annotation(points, &units, gt_class)?;
    Ok(ActiveLabeling { ground, units, labels })
}
