//! Segmentation losses: weighted cross-entropy, Lovász-softmax and the
//! negative-label loss, each with its analytic gradient.

use ndarray::Array2;

pub use crate::assoc::{row_softmax as softmax, row_softmax_backward as softmax_backward};

/// Smallest admissible permitted mass inside the negative-label log.
pub const NEGATIVE_CLAMP: f64 = 1e-12;

/// A hard target with a per-row weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub row: usize,
    pub class: usize,
    pub weight: f64,
}

/// `(1/n) sum_t w_t * -log softmax(z)[row_t, class_t]` and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[Target]) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    if targets.is_empty() {
        return (0.0, grad);
    }
    let n = targets.len() as f64;
    let mut value = 0.0;
    for t in targets {
        let row = logits.row(t.row);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        value += t.weight * (lse - row[t.class]);
        for (k, g) in grad.row_mut(t.row).iter_mut().enumerate() {
            let p = (row[k] - lse).exp();
            *g += t.weight * (p - (k == t.class) as u8 as f64) / n;
        }
    }
    (value / n, grad)
}

/// Permitted classes of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeTarget {
    pub row: usize,
    pub allowed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeLoss {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Rows whose permitted mass was clamped.
    pub clamped: usize,
}

/// `-(1/N) sum_i log(1 - sum_{j forbidden} p_ij)` with the gradient w.r.t. `probs`.
pub fn negative_loss(probs: &Array2<f64>, targets: &[NegativeTarget]) -> NegativeLoss {
    let mut out = NegativeLoss { value: 0.0, grad: Array2::zeros(probs.raw_dim()), clamped: 0 };
    if targets.is_empty() {
        return out;
    }
    let n = targets.len() as f64;
    for t in targets {
        let row = probs.row(t.row);
        let forbidden: f64 = (0..row.len()).filter(|k| !t.allowed.contains(k)).map(|k| row[k]).sum();
        let kept = 1.0 - forbidden;
        if kept < NEGATIVE_CLAMP {
            out.clamped += 1;
            out.value -= NEGATIVE_CLAMP.ln() / n;
            continue;
        }
        out.value -= kept.ln() / n;
        for k in (0..row.len()).filter(|k| !t.allowed.contains(k)) {
            out.grad[[t.row, k]] += 1.0 / (n * kept);
        }
    }
    out
}

/// [`negative_loss`] on logits, using the permitted mass directly for accuracy.
pub fn negative_loss_logits(logits: &Array2<f64>, targets: &[NegativeTarget]) -> NegativeLoss {
    let probs = softmax(logits);
    let mut out = NegativeLoss { value: 0.0, grad: Array2::zeros(logits.raw_dim()), clamped: 0 };
    if targets.is_empty() {
        return out;
    }
    let n = targets.len() as f64;
    for t in targets {
        let row = probs.row(t.row);
        let kept: f64 = t.allowed.iter().map(|&k| row[k]).sum();
        if kept < NEGATIVE_CLAMP {
            out.clamped += 1;
            out.value -= NEGATIVE_CLAMP.ln() / n;
            continue;
        }
        out.value -= kept.ln() / n;
        for k in 0..row.len() {
            let inside = t.allowed.contains(&k) as u8 as f64;
            out.grad[[t.row, k]] += row[k] * (1.0 - inside / kept) / n;
        }
    }
    out
}

/// Gradient of the Lovász extension of the Jaccard loss, for errors sorted in
/// decreasing order with foreground flags `fg_sorted`.
fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut out = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jaccard - prev);
        prev = jaccard;
    }
    out
}

/// Lovász-softmax over `rows` with labels `classes`, averaged over the classes
/// present among the labels. Returns the value and the gradient w.r.t. `probs`.
pub fn lovasz_softmax(probs: &Array2<f64>, rows: &[usize], classes: &[usize]) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(probs.raw_dim());
    if rows.is_empty() {
        return (0.0, grad);
    }
    let mut present: Vec<usize> = classes.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut value = 0.0;
    let nc = present.len() as f64;
    for &c in &present {
        let mut err: Vec<(f64, bool, usize)> = rows
            .iter()
            .zip(classes)
            .map(|(&r, &y)| {
                let fg = y == c;
                ((fg as u8 as f64 - probs[[r, c]]).abs(), fg, r)
            })
            .collect();
        err.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
        let fg: Vec<bool> = err.iter().map(|e| e.1).collect();
        let g = lovasz_grad(&fg);
        for ((e, f, r), gi) in err.iter().zip(&g) {
            value += e * gi / nc;
            let sign = if *f { -1.0 } else { 1.0 };
            grad[[*r, c]] += sign * gi / nc;
        }
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn negative_example() {
        let p = array![[0.2, 0.5, 0.3]];
        let t = [NegativeTarget { row: 0, allowed: vec![0, 1] }];
        let l = negative_loss(&p, &t);
        assert!((l.value - 0.3566749439).abs() < 1e-9);
        let ok = [NegativeTarget { row: 0, allowed: vec![0, 1, 2] }];
        assert_eq!(negative_loss(&p, &ok).value, 0.0);
        let dead = negative_loss(&array![[0.0, 0.0, 1.0]], &t);
        assert_eq!(dead.clamped, 1);
        assert!(dead.value.is_finite());
    }

    #[test]
    fn lovasz_endpoints() {
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(lovasz_softmax(&p, &[0, 1], &[0, 1]).0, 0.0);
        let (v, _) = lovasz_softmax(&array![[0.0, 1.0]], &[0], &[0]);
        assert_eq!(v, 1.0);
    }
}
