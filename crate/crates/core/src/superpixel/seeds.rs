//! SEEDS: hill climbing on a colour-histogram energy, moving blocks of a nested
//! hierarchy and then single pixels between neighbouring superpixels.

use std::collections::VecDeque;

use super::SuperpixelMap;
use crate::error::{input_err, Result};
use crate::synth::Image;

pub const BINS_PER_CHANNEL: usize = 5;
const NBINS: usize = BINS_PER_CHANNEL * BINS_PER_CHANNEL * BINS_PER_CHANNEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedsConfig {
    pub num_superpixels: usize,
    /// Block levels below the initial grid cells (each halves the block size).
    pub num_levels: usize,
    /// Sweeps per level, block levels and the pixel level alike.
    pub iterations: usize,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        Self { num_superpixels: 64, num_levels: 3, iterations: 4 }
    }
}

/// Segmentation plus the energy after initialization and after every sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedsResult {
    pub map: SuperpixelMap,
    pub energy_trace: Vec<f64>,
    pub moves: usize,
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn split(self) -> Vec<Rect> {
        let xm = if self.x1 - self.x0 >= 2 { (self.x0 + self.x1) / 2 } else { self.x1 };
        let ym = if self.y1 - self.y0 >= 2 { (self.y0 + self.y1) / 2 } else { self.y1 };
        let mut out = Vec::with_capacity(4);
        for (ya, yb) in [(self.y0, ym), (ym, self.y1)] {
            for (xa, xb) in [(self.x0, xm), (xm, self.x1)] {
                if ya < yb && xa < xb {
                    out.push(Rect { x0: xa, y0: ya, x1: xb, y1: yb });
                }
            }
        }
        out
    }
}

fn bin_of(c: [f64; 3]) -> usize {
    let q = |v: f64| ((v.clamp(0.0, 1.0) * BINS_PER_CHANNEL as f64) as usize).min(BINS_PER_CHANNEL - 1);
    q(c[0]) * BINS_PER_CHANNEL * BINS_PER_CHANNEL + q(c[1]) * BINS_PER_CHANNEL + q(c[2])
}

/// Initial grid shape for `k` superpixels on a `w x h` image.
pub fn grid_shape(k: usize, w: usize, h: usize) -> (usize, usize) {
    let rows = ((k as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let cols = ((k as f64 / rows as f64).round() as usize).clamp(1, w);
    (rows, cols)
}

struct State<'a> {
    w: usize,
    h: usize,
    bins: &'a [usize],
    label: Vec<usize>,
    hist: Vec<[u32; NBINS]>,
    count: Vec<u64>,
    sq: Vec<u64>,
    /// Visit marks for connectivity checks, valid when equal to `stamp`.
    mark: Vec<u32>,
    stamp: u32,
}

fn sum_sq(h: &[u32; NBINS]) -> u64 {
    h.iter().map(|&c| c as u64 * c as u64).sum()
}

impl State<'_> {
    fn energy(&self) -> f64 {
        self.sq.iter().zip(&self.count).map(|(&s, &n)| s as f64 / (n * n) as f64).sum()
    }

    /// Labels of pixels 4-adjacent to `pixels` (excluding `own`), in first-seen order.
    fn neighbour_labels(&self, pixels: &[usize], own: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &p in pixels {
            let (x, y) = (p % self.w, p / self.w);
            let mut look = |q: usize| {
                let l = self.label[q];
                if l != own && !out.contains(&l) {
                    out.push(l);
                }
            };
            if x > 0 {
                look(p - 1);
            }
            if x + 1 < self.w {
                look(p + 1);
            }
            if y > 0 {
                look(p - self.w);
            }
            if y + 1 < self.h {
                look(p + self.w);
            }
        }
        out
    }

    fn intersection(a: &[u32; NBINS], na: u64, b: &[u32; NBINS], nb: u64) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x as f64 / na as f64).min(y as f64 / nb as f64)).sum()
    }

    /// Whether the pixels of `a` in the 8-neighbourhood of `p` are 4-connected
    /// to each other without `p`; if so, removing `p` cannot split `a`.
    fn locally_simple(&self, a: usize, p: usize) -> bool {
        let (x, y) = ((p % self.w) as isize, (p / self.w) as isize);
        // ring order around p
        const RING: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];
        let inside = |(dx, dy): (isize, isize)| {
            let (qx, qy) = (x + dx, y + dy);
            qx >= 0
                && qy >= 0
                && (qx as usize) < self.w
                && (qy as usize) < self.h
                && self.label[qy as usize * self.w + qx as usize] == a
        };
        let on: Vec<bool> = RING.iter().map(|&d| inside(d)).collect();
        // 4-neighbours of p in a must form one run along the ring, where a run may
        // pass through a corner only when that corner belongs to a
        let edges = [1, 3, 5, 7];
        let present: Vec<usize> = edges.iter().copied().filter(|&k| on[k]).collect();
        if present.len() <= 1 {
            return true;
        }
        let mut runs = 0;
        for &k in &edges {
            if on[k] && !(on[(k + 6) % 8] && on[(k + 7) % 8]) {
                runs += 1;
            }
        }
        runs <= 1
    }

    /// Whether superpixel `a` stays 4-connected after removing `moving`.
    fn stays_connected(&mut self, a: usize, moving: &[usize], remaining: u64) -> bool {
        if let [p] = moving {
            if self.locally_simple(a, *p) {
                return true;
            }
        }
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.mark.iter_mut().for_each(|m| *m = 0);
            self.stamp = 1;
        }
        let stamp = self.stamp;
        for &p in moving {
            self.mark[p] = stamp;
        }
        // seed: any pixel of `a` next to the moved set, else any pixel of `a`
        let start = moving
            .iter()
            .flat_map(|&p| {
                let (x, y) = (p % self.w, p / self.w);
                [
                    (x > 0).then(|| p - 1),
                    (x + 1 < self.w).then(|| p + 1),
                    (y > 0).then(|| p - self.w),
                    (y + 1 < self.h).then(|| p + self.w),
                ]
            })
            .flatten()
            .find(|&q| self.label[q] == a && self.mark[q] != stamp);
        let Some(start) = start else {
            return remaining == 0;
        };
        self.mark[start] = stamp;
        let mut queue = VecDeque::from([start]);
        let mut reached = 1u64;
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % self.w, p / self.w);
            for q in [
                (x > 0).then(|| p - 1),
                (x + 1 < self.w).then(|| p + 1),
                (y > 0).then(|| p - self.w),
                (y + 1 < self.h).then(|| p + self.w),
            ]
            .into_iter()
            .flatten()
            {
                if self.mark[q] != stamp && self.label[q] == a {
                    self.mark[q] = stamp;
                    reached += 1;
                    queue.push_back(q);
                }
            }
        }
        reached == remaining
    }

    /// Tries to move `pixels` (currently all labelled `a`) to the best neighbour.
    fn try_move(&mut self, pixels: &[usize]) -> bool {
        let a = self.label[pixels[0]];
        let nb = pixels.len() as u64;
        if self.count[a] <= nb {
            return false;
        }
        let mut hb = [0u32; NBINS];
        for &p in pixels {
            hb[self.bins[p]] += 1;
        }
        let mut rest = self.hist[a];
        for (r, &x) in rest.iter_mut().zip(&hb) {
            *r -= x;
        }
        let n_rest = self.count[a] - nb;
        let own = Self::intersection(&hb, nb, &rest, n_rest);
        let mut best: Option<(f64, usize)> = None;
        for b in self.neighbour_labels(pixels, a) {
            let s = Self::intersection(&hb, nb, &self.hist[b], self.count[b]);
            if s > own && best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, b));
            }
        }
        let Some((_, b)) = best else {
            return false;
        };
        let mut grown = self.hist[b];
        for (g, &x) in grown.iter_mut().zip(&hb) {
            *g += x;
        }
        let (sq_rest, sq_grown) = (sum_sq(&rest), sum_sq(&grown));
        let nbn = self.count[b] + nb;
        let before = self.sq[a] as f64 / (self.count[a] * self.count[a]) as f64
            + self.sq[b] as f64 / (self.count[b] * self.count[b]) as f64;
        let after = sq_rest as f64 / (n_rest * n_rest) as f64 + sq_grown as f64 / (nbn * nbn) as f64;
        if after - before <= 1e-12 || !self.stays_connected(a, pixels, n_rest) {
            return false;
        }
        for &p in pixels {
            self.label[p] = b;
        }
        self.hist[a] = rest;
        self.hist[b] = grown;
        self.count[a] = n_rest;
        self.count[b] = nbn;
        self.sq[a] = sq_rest;
        self.sq[b] = sq_grown;
        true
    }
}

/// SEEDS over-segmentation of `image` into roughly `cfg.num_superpixels` regions.
///
/// Blocks that do not divide evenly are clipped at the image border rather than
/// padded. Each accepted move strictly increases the energy, so the trace is
/// non-decreasing.
pub fn seeds_segment(image: &Image, cfg: &SeedsConfig) -> Result<SeedsResult> {
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Err(input_err("image is empty"));
    }
    if cfg.num_superpixels == 0 || cfg.num_superpixels > w * h {
        return Err(input_err(format!("{} superpixels requested for a {w}x{h} image", cfg.num_superpixels)));
    }
    let bins: Vec<usize> = (0..w * h).map(|p| bin_of(image.get(p % w, p / w))).collect();
    let (rows, cols) = grid_shape(cfg.num_superpixels, w, h);
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            cells.push(Rect { x0: c * w / cols, y0: r * h / rows, x1: (c + 1) * w / cols, y1: (r + 1) * h / rows });
        }
    }
    let k = cells.len();
    let mut label = vec![0usize; w * h];
    for (id, cell) in cells.iter().enumerate() {
        for y in cell.y0..cell.y1 {
            for x in cell.x0..cell.x1 {
                label[y * w + x] = id;
            }
        }
    }
    let mut hist = vec![[0u32; NBINS]; k];
    let mut count = vec![0u64; k];
    for p in 0..w * h {
        hist[label[p]][bins[p]] += 1;
        count[label[p]] += 1;
    }
    let sq = hist.iter().map(sum_sq).collect();
    let mut st = State { w, h, bins: &bins, label, hist, count, sq, mark: vec![0; w * h], stamp: 0 };

    let mut trace = vec![st.energy()];
    let mut moves = 0;
    let mut level = cells;
    for _ in 0..cfg.num_levels {
        level = level.into_iter().flat_map(Rect::split).collect();
        let blocks: Vec<Vec<usize>> =
            level.iter().map(|r| (r.y0..r.y1).flat_map(|y| (r.x0..r.x1).map(move |x| y * w + x)).collect()).collect();
        for _ in 0..cfg.iterations {
            let mut moved = 0;
            for block in &blocks {
                // blocks stay uniformly labelled: coarser moves shift whole blocks
                if st.try_move(block) {
                    moved += 1;
                }
            }
            moves += moved;
            trace.push(st.energy());
            if moved == 0 {
                break;
            }
        }
    }
    for _ in 0..cfg.iterations {
        let mut moved = 0;
        for p in 0..w * h {
            let (x, y) = (p % w, p / w);
            let l = st.label[p];
            let boundary = (x > 0 && st.label[p - 1] != l)
                || (x + 1 < w && st.label[p + 1] != l)
                || (y > 0 && st.label[p - w] != l)
                || (y + 1 < h && st.label[p + w] != l);
            if boundary && st.try_move(&[p]) {
                moved += 1;
            }
        }
        moves += moved;
        trace.push(st.energy());
        if moved == 0 {
            break;
        }
    }
    let map = SuperpixelMap::from_assignment(image, st.label, k)?;
    Ok(SeedsResult { map, energy_trace: trace, moves })
}
