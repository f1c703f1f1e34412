//! Superpixels: SEEDS segmentation, matching to labelled points and pooled features.

mod matching;
mod seeds;

pub use matching::{
    match_superpixels, pixel_descriptors, superpixel_features, MatchedSuperpixel, PIXEL_DESCRIPTOR_DIM,
};
pub use seeds::{grid_shape, seeds_segment, SeedsConfig, SeedsResult, BINS_PER_CHANNEL};

use crate::container::Container;
use crate::error::{input_err, Error, Result};
use crate::synth::Image;

/// Pixel -> superpixel partition of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    /// Row-major superpixel id per pixel.
    pub assignment: Vec<usize>,
    pub num_superpixels: usize,
    pub counts: Vec<usize>,
    /// `(u, v)` centroid in pixel-centre coordinates.
    pub centroids: Vec<[f64; 2]>,
    pub mean_colors: Vec<[f64; 3]>,
}

impl SuperpixelMap {
    pub fn from_assignment(image: &Image, assignment: Vec<usize>, num_superpixels: usize) -> Result<Self> {
        let (w, h) = (image.width, image.height);
        if assignment.len() != w * h {
            return Err(input_err("assignment does not cover the image"));
        }
        let mut counts = vec![0usize; num_superpixels];
        let mut centroids = vec![[0.0; 2]; num_superpixels];
        let mut mean_colors = vec![[0.0; 3]; num_superpixels];
        for (p, &s) in assignment.iter().enumerate() {
            if s >= num_superpixels {
                return Err(input_err(format!("superpixel id {s} out of range")));
            }
            let (x, y) = (p % w, p / w);
            counts[s] += 1;
            centroids[s][0] += x as f64 + 0.5;
            centroids[s][1] += y as f64 + 0.5;
            let c = image.get(x, y);
            for k in 0..3 {
                mean_colors[s][k] += c[k];
            }
        }
        for s in 0..num_superpixels {
            if counts[s] == 0 {
                return Err(input_err(format!("superpixel {s} is empty")));
            }
            let n = counts[s] as f64;
            centroids[s].iter_mut().for_each(|v| *v /= n);
            mean_colors[s].iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { width: w, height: h, assignment, num_superpixels, counts, centroids, mean_colors })
    }

    pub fn at(&self, x: usize, y: usize) -> usize {
        self.assignment[y * self.width + x]
    }

    /// Whether every superpixel is a single 4-connected region.
    pub fn is_connected(&self) -> bool {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; w * h];
        let mut components = vec![0usize; self.num_superpixels];
        for start in 0..w * h {
            if seen[start] {
                continue;
            }
            let s = self.assignment[start];
            components[s] += 1;
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(p) = stack.pop() {
                let (x, y) = (p % w, p / w);
                let mut visit = |q: usize| {
                    if !seen[q] && self.assignment[q] == s {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
            }
        }
        components.iter().all(|&c| c == 1)
    }

    /// Pixels with a 4-neighbour in another superpixel.
    pub fn boundary_mask(&self) -> Vec<bool> {
        let (w, h) = (self.width, self.height);
        (0..w * h)
            .map(|p| {
                let (x, y) = (p % w, p / w);
                let s = self.assignment[p];
                (x > 0 && self.assignment[p - 1] != s)
                    || (x + 1 < w && self.assignment[p + 1] != s)
                    || (y > 0 && self.assignment[p - w] != s)
                    || (y + 1 < h && self.assignment[p + w] != s)
            })
            .collect()
    }

    pub fn write_sections(&self, c: &mut Container, prefix: &str) -> Result<()> {
        c.push_i64(
            &format!("{prefix}assignment"),
            &[self.height, self.width],
            self.assignment.iter().map(|&s| s as i64).collect(),
        )?;
        c.push_f64(
            &format!("{prefix}mean_colors"),
            &[self.num_superpixels, 3],
            self.mean_colors.iter().flatten().copied().collect(),
        )
    }

    /// Rebuilds the map; `image` supplies colours for the derived statistics.
    pub fn read_sections(c: &Container, prefix: &str, image: &Image) -> Result<Self> {
        let (shape, data) = c.i64(&format!("{prefix}assignment"))?;
        if shape != [image.height, image.width] || data.iter().any(|&v| v < 0) {
            return Err(Error::Format(format!("section `{prefix}assignment` does not match its image")));
        }
        let k = data.iter().max().map_or(0, |&m| m as usize + 1);
        Self::from_assignment(image, data.iter().map(|&v| v as usize).collect(), k)
            .map_err(|e| Error::Format(e.to_string()))
    }
}
