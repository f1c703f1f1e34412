use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use super::SuperpixelMap;
use crate::error::{input_err, Result};
use crate::geometry::PixelHit;
use crate::synth::Image;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedSuperpixel {
    pub superpixel: usize,
    pub class: usize,
    /// Sparse-labelled points of `class` projecting into the superpixel, ascending.
    pub points: Vec<usize>,
}

/// Superpixels containing at least one sparse-labelled point, one entry per
/// (superpixel, class), ordered by superpixel then class. `hits` must come from
/// the camera that produced `spx`.
pub fn match_superpixels(
    spx: &SuperpixelMap,
    hits: &[PixelHit],
    sparse: &BTreeMap<usize, usize>,
) -> Vec<MatchedSuperpixel> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for hit in hits {
        if let Some(&class) = sparse.get(&hit.point_index) {
            let (x, y) = hit.pixel();
            if x < spx.width && y < spx.height {
                groups.entry((spx.at(x, y), class)).or_default().push(hit.point_index);
            }
        }
    }
    groups
        .into_iter()
        .map(|((superpixel, class), mut points)| {
            points.sort_unstable();
            points.dedup();
            MatchedSuperpixel { superpixel, class, points }
        })
        .collect()
}

pub const PIXEL_DESCRIPTOR_DIM: usize = 4;

/// Per-pixel `(r, g, b, gradient magnitude)`, the gradient taken on luminance
/// with central differences (one-sided at the border).
pub fn pixel_descriptors(image: &Image) -> Array3<f64> {
    let (w, h) = (image.width, image.height);
    let lum = |x: usize, y: usize| {
        let c = image.get(x, y);
        0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
    };
    let mut out = Array3::zeros((h, w, PIXEL_DESCRIPTOR_DIM));
    for y in 0..h {
        for x in 0..w {
            let c = image.get(x, y);
            let (xa, xb) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (ya, yb) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = if xb > xa { (lum(xb, y) - lum(xa, y)) / (xb - xa) as f64 } else { 0.0 };
            let gy = if yb > ya { (lum(x, yb) - lum(x, ya)) / (yb - ya) as f64 } else { 0.0 };
            out[[y, x, 0]] = c[0];
            out[[y, x, 1]] = c[1];
            out[[y, x, 2]] = c[2];
            out[[y, x, 3]] = gx.hypot(gy);
        }
    }
    out
}

/// Mean of `features` (`H x W x D`) over each superpixel.
pub fn superpixel_features(spx: &SuperpixelMap, features: &Array3<f64>) -> Result<Array2<f64>> {
    let (h, w, d) = features.dim();
    if h != spx.height || w != spx.width {
        return Err(input_err(format!("feature map is {h}x{w}, superpixel map is {}x{}", spx.height, spx.width)));
    }
    let mut out = Array2::zeros((spx.num_superpixels, d));
    for y in 0..h {
        for x in 0..w {
            let s = spx.at(x, y);
            for k in 0..d {
                out[[s, k]] += features[[y, x, k]];
            }
        }
    }
    for (s, mut row) in out.rows_mut().into_iter().enumerate() {
        row /= spx.counts[s] as f64;
    }
    Ok(out)
}
