use std::f64::consts::TAU;

use crate::error::{input_err, Result};
use crate::geometry::Point3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PillarConfig {
    pub radial_bins: usize,
    pub angular_bins: usize,
    /// Outer radius in meters; farther points fall into the last ring.
    pub r_max: f64,
}

impl Default for PillarConfig {
    fn default() -> Self {
        Self { radial_bins: 10, angular_bins: 36, r_max: 30.0 }
    }
}

impl PillarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radial_bins == 0 || self.angular_bins == 0 {
            return Err(input_err("pillar grid needs at least one radial and one angular bin"));
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(input_err("pillar r_max must be positive"));
        }
        Ok(())
    }

    pub fn num_pillars(&self) -> usize {
        self.radial_bins * self.angular_bins
    }
}

/// Uniform cylindrical pillars around the sensor axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarPartition {
    pub radial_bins: usize,
    pub angular_bins: usize,
    pub r_max: f64,
    /// Pillar id per point: `ring * angular_bins + sector`.
    pub assignment: Vec<usize>,
}

impl PillarPartition {
    pub fn new(points: &[Point3], cfg: &PillarConfig) -> Result<Self> {
        cfg.validate()?;
        let assignment = points.iter().map(|p| pillar_of(p, cfg)).collect();
        Ok(Self { radial_bins: cfg.radial_bins, angular_bins: cfg.angular_bins, r_max: cfg.r_max, assignment })
    }

    pub fn num_pillars(&self) -> usize {
        self.radial_bins * self.angular_bins
    }

    /// Member indices per pillar.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_pillars()];
        for (i, &p) in self.assignment.iter().enumerate() {
            out[p].push(i);
        }
        out
    }
}

pub fn pillar_of(p: &Point3, cfg: &PillarConfig) -> usize {
    let r = p[0].hypot(p[1]);
    let ring = ((r / cfg.r_max * cfg.radial_bins as f64) as usize).min(cfg.radial_bins - 1);
    let theta = p[1].atan2(p[0]).rem_euclid(TAU);
    let sector = ((theta / TAU * cfg.angular_bins as f64) as usize).min(cfg.angular_bins - 1);
    ring * cfg.angular_bins + sector
}
