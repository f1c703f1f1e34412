//! Confusion matrices, IoU, pseudo-label quality and the adjusted Rand index.

use std::collections::HashMap;

use crate::error::{input_err, Result};

/// `counts[truth * C + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(input_err("truth and prediction differ in length"));
        }
        let mut cm = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.num_classes || pred >= self.num_classes {
            return Err(input_err(format!("class out of range: truth {truth}, pred {pred}")));
        }
        self.counts[truth * self.num_classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(input_err("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from both truth
    /// and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Per-class IoU and their mean over the classes present in the truth.
    pub fn miou(&self) -> (Vec<Option<f64>>, f64) {
        let iou = self.iou();
        let present: Vec<f64> = (0..self.num_classes)
            .filter(|&k| (0..self.num_classes).any(|j| self.get(k, j) > 0))
            .map(|k| iou[k].unwrap_or(0.0))
            .collect();
        let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        (iou, mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelQuality {
    pub accepted: usize,
    pub correct: usize,
    /// Points that could have received a pseudo label.
    pub candidates: usize,
    /// `None` when nothing was accepted.
    pub precision: Option<f64>,
    pub recall: f64,
    pub error_rate: Option<f64>,
}

/// Quality of accepted `(point, class)` pseudo labels against `gt`, with recall
/// taken over `candidates` eligible points.
pub fn pseudo_label_quality(
    accepted: &[(usize, usize)],
    gt: &[usize],
    candidates: usize,
) -> Result<PseudoLabelQuality> {
    if accepted.len() > candidates {
        return Err(input_err("more accepted pseudo labels than candidates"));
    }
    let mut correct = 0;
    for &(i, c) in accepted {
        let t = *gt.get(i).ok_or_else(|| input_err(format!("pseudo label for unknown point {i}")))?;
        correct += (t == c) as usize;
    }
    let precision = (!accepted.is_empty()).then(|| correct as f64 / accepted.len() as f64);
    Ok(PseudoLabelQuality {
        accepted: accepted.len(),
        correct,
        candidates,
        precision,
        recall: if candidates == 0 { 0.0 } else { correct as f64 / candidates as f64 },
        error_rate: precision.map(|p| 1.0 - p),
    })
}

fn pairs(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between `clustering` (−1 = noise) and `truth`, over the
/// points the clustering does not call noise.
pub fn adjusted_rand_index(clustering: &[i64], truth: &[i64]) -> Result<f64> {
    if clustering.len() != truth.len() {
        return Err(input_err("clustering and truth differ in length"));
    }
    let mut table: HashMap<(i64, i64), u64> = HashMap::new();
    let mut rows: HashMap<i64, u64> = HashMap::new();
    let mut cols: HashMap<i64, u64> = HashMap::new();
    let mut n = 0u64;
    for (&a, &b) in clustering.iter().zip(truth) {
        if a < 0 {
            continue;
        }
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
        n += 1;
    }
    let index: f64 = table.values().map(|&v| pairs(v)).sum();
    let a: f64 = rows.values().map(|&v| pairs(v)).sum();
    let b: f64 = cols.values().map(|&v| pairs(v)).sum();
    let total = pairs(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / total;
    let max = (a + b) / 2.0;
    if max == expected {
        // both partitions trivial (all singletons or one block)
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}
