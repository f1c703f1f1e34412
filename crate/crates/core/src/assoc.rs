//! Cross-modal association: 3D -> 2D -> 3D round trips between labelled point
//! features and matched superpixel features, with walker and visit losses.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssocConfig {
    pub beta_w: f64,
    pub beta_v: f64,
    pub projection_dim: usize,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self { beta_w: 1.0, beta_v: 0.5, projection_dim: 256 }
    }
}

/// A loss value with gradients with respect to both feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub d_f3d: Array2<f64>,
    pub d_f2d: Array2<f64>,
}

impl LossGrad {
    fn zero(f3d: ArrayView2<f64>, f2d: ArrayView2<f64>) -> Self {
        Self { value: 0.0, d_f3d: Array2::zeros(f3d.raw_dim()), d_f2d: Array2::zeros(f2d.raw_dim()) }
    }

    fn scaled_add(&mut self, w: f64, other: &LossGrad) {
        self.value += w * other.value;
        self.d_f3d.scaled_add(w, &other.d_f3d);
        self.d_f2d.scaled_add(w, &other.d_f2d);
    }
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Gradient with respect to the logits of a row-wise softmax `p`, given the
/// gradient `dp` with respect to its output.
pub fn row_softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut out = p * dp;
    for (mut row, prow) in out.rows_mut().into_iter().zip(p.rows()) {
        let s = row.sum();
        row.zip_mut_with(&prow, |g, &pi| *g -= pi * s);
    }
    out
}

fn check(f3d: ArrayView2<f64>, f2d: ArrayView2<f64>) -> Result<()> {
    if f3d.ncols() != f2d.ncols() {
        return Err(input_err(format!("feature dims differ: {} vs {}", f3d.ncols(), f2d.ncols())));
    }
    if f3d.nrows() == 0 || f2d.nrows() == 0 {
        return Err(input_err("association needs at least one 3D and one 2D feature"));
    }
    if f3d.iter().chain(f2d.iter()).any(|v| !v.is_finite()) {
        return Err(input_err("non-finite association features"));
    }
    Ok(())
}

/// `(A_lc, A_cl)`: softmax over superpixels of `<f3d_i, f2d_j>` and softmax over
/// points of the transposed scores.
pub fn transition_matrices(f3d: ArrayView2<f64>, f2d: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    check(f3d, f2d)?;
    let s = f3d.dot(&f2d.t());
    Ok((row_softmax(&s), row_softmax(&s.t().to_owned())))
}

/// `Y_sim[i, j] = 1 / n(y_i)` when `y_i = y_j` (diagonal included), else 0.
pub fn similarity_targets(labels: &[usize]) -> Array2<f64> {
    let n = labels.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if labels[i] == labels[j] {
            1.0 / labels.iter().filter(|&&l| l == labels[i]).count() as f64
        } else {
            0.0
        }
    })
}

/// `KL(Y_sim || A_sim)` averaged over rows.
pub fn walker_loss_value(a_sim: &Array2<f64>, y_sim: &Array2<f64>) -> f64 {
    let n = a_sim.nrows().max(1) as f64;
    a_sim.iter().zip(y_sim.iter()).filter(|(_, &y)| y > 0.0).map(|(&a, &y)| y * (y / a).ln()).sum::<f64>() / n
}

/// Mean visit probabilities of the superpixels and the visit loss
/// `-(1/N_s) sum_j log v_j - log N_s`.
pub fn visit_loss_value(a_lc: &Array2<f64>) -> f64 {
    let v: Array1<f64> = a_lc.mean_axis(Axis(0)).unwrap();
    let ns = v.len() as f64;
    -v.mapv(f64::ln).sum() / ns - ns.ln()
}

/// Backpropagates logit gradients `ds` (`N_l x N_s`) through `S = F G^T`.
fn through_scores(ds: &Array2<f64>, f3d: ArrayView2<f64>, f2d: ArrayView2<f64>, value: f64) -> LossGrad {
    LossGrad { value, d_f3d: ds.dot(&f2d), d_f2d: ds.t().dot(&f3d) }
}

pub fn walker_loss(f3d: ArrayView2<f64>, f2d: ArrayView2<f64>, labels: &[usize]) -> Result<LossGrad> {
    check(f3d, f2d)?;
    if labels.len() != f3d.nrows() {
        return Err(input_err("one label per 3D feature is required"));
    }
    let (a, b) = transition_matrices(f3d, f2d)?;
    let a_sim = a.dot(&b);
    let y = similarity_targets(labels);
    let value = walker_loss_value(&a_sim, &y);
    let n = f3d.nrows() as f64;
    let d_sim =
        Array2::from_shape_fn(
            a_sim.raw_dim(),
            |(i, j)| {
                if y[[i, j]] > 0.0 {
                    -y[[i, j]] / (a_sim[[i, j]] * n)
                } else {
                    0.0
                }
            },
        );
    let d_a = d_sim.dot(&b.t());
    let d_b = a.t().dot(&d_sim);
    let ds = row_softmax_backward(&a, &d_a) + row_softmax_backward(&b, &d_b).t();
    Ok(through_scores(&ds, f3d, f2d, value))
}

pub fn visit_loss(f3d: ArrayView2<f64>, f2d: ArrayView2<f64>) -> Result<LossGrad> {
    check(f3d, f2d)?;
    let (a, _) = transition_matrices(f3d, f2d)?;
    let value = visit_loss_value(&a);
    let (nl, ns) = a.dim();
    let v = a.mean_axis(Axis(0)).unwrap();
    let d_a = Array2::from_shape_fn((nl, ns), |(_, j)| -1.0 / (ns as f64 * v[j] * nl as f64));
    let ds = row_softmax_backward(&a, &d_a);
    Ok(through_scores(&ds, f3d, f2d, value))
}

/// `beta_w * L_walker + beta_v * L_vis` with gradients.
pub fn assoc_loss(f3d: ArrayView2<f64>, f2d: ArrayView2<f64>, labels: &[usize], cfg: &AssocConfig) -> Result<LossGrad> {
    let mut out = LossGrad::zero(f3d, f2d);
    if cfg.beta_w != 0.0 {
        out.scaled_add(cfg.beta_w, &walker_loss(f3d, f2d, labels)?);
    }
    if cfg.beta_v != 0.0 {
        out.scaled_add(cfg.beta_v, &visit_loss(f3d, f2d)?);
    }
    Ok(out)
}

/// Rows scaled to unit length; returns the normalized rows and the norms.
pub fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let y = x / &norms.view().insert_axis(Axis(1));
    (y, norms)
}

/// Backward pass of [`l2_normalize_rows`]: `dx = (dy - y <y, dy>) / |x|`.
pub fn l2_normalize_backward(y: &Array2<f64>, norms: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let yi = y.row(i);
        let proj = yi.dot(&dy.row(i));
        row.zip_mut_with(&yi, |d, &yv| *d = (*d - yv * proj) / norms[i]);
    }
    dx
}

/// Features and transition matrices of one association minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct AssocBatch {
    pub f3d: Array2<f64>,
    pub f2d: Array2<f64>,
    pub labels3d: Vec<usize>,
    pub a_lc: Array2<f64>,
    pub a_cl: Array2<f64>,
    pub a_sim: Array2<f64>,
    pub y_sim: Array2<f64>,
}

impl AssocBatch {
    /// `Ok(None)` when either side is empty: the batch contributes no loss.
    pub fn build(f3d: Array2<f64>, f2d: Array2<f64>, labels3d: Vec<usize>) -> Result<Option<Self>> {
        if f3d.nrows() == 0 || f2d.nrows() == 0 {
            return Ok(None);
        }
        if labels3d.len() != f3d.nrows() {
            return Err(input_err("one label per 3D feature is required"));
        }
        let (a_lc, a_cl) = transition_matrices(f3d.view(), f2d.view())?;
        let a_sim = a_lc.dot(&a_cl);
        let y_sim = similarity_targets(&labels3d);
        Ok(Some(Self { f3d, f2d, labels3d, a_lc, a_cl, a_sim, y_sim }))
    }

    pub fn loss(&self, cfg: &AssocConfig) -> Result<LossGrad> {
        assoc_loss(self.f3d.view(), self.f2d.view(), &self.labels3d, cfg)
    }
}
