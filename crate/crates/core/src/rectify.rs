//! E-step pseudo-label rectification: per-class adaptive confidence thresholds
//! (ACT), a feature-similarity filter against class prototypes (FSF), gating by
//! negative labels, and the confidence-only baselines used for comparison.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};

use crate::activelabel::{LabelSet, PseudoLabel};
use crate::error::{config_err, input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectifyConfig {
    /// Tolerance below the per-class maximum confidence.
    pub delta: f64,
    /// Confidence floor.
    pub alpha: f64,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self { delta: 0.1, alpha: 0.5 }
    }
}

impl RectifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err("delta and alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn argmax(row: impl IntoIterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (c, v);
        }
    }
    best
}

/// `sigma_c = max(max_i p_ic - delta, alpha)` over the rows whose argmax is `c`;
/// classes that are never the argmax get `+inf`.
pub fn adaptive_thresholds(probs: ArrayView2<f64>, cfg: &RectifyConfig) -> Vec<f64> {
    let mut max = vec![f64::NEG_INFINITY; probs.ncols()];
    let mut present = vec![false; probs.ncols()];
    for row in probs.rows() {
        present[argmax(row.iter().copied()).0] = true;
    }
    for row in probs.rows() {
        for (c, &p) in row.iter().enumerate() {
            max[c] = max[c].max(p);
        }
    }
    (0..probs.ncols()).map(|c| if present[c] { (max[c] - cfg.delta).max(cfg.alpha) } else { f64::INFINITY }).collect()
}

/// Mean feature per class over labelled points.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub prototypes: Vec<Option<Array1<f64>>>,
    pub support: Vec<usize>,
}

impl PrototypeBank {
    /// `labels` pairs a feature row with its class.
    pub fn build(features: ArrayView2<f64>, labels: &[(usize, usize)], num_classes: usize) -> Result<Self> {
        let d = features.ncols();
        let mut sums = vec![Array1::<f64>::zeros(d); num_classes];
        let mut support = vec![0usize; num_classes];
        for &(row, class) in labels {
            if row >= features.nrows() || class >= num_classes {
                return Err(input_err(format!("prototype label ({row}, {class}) out of range")));
            }
            sums[class] += &features.row(row);
            support[class] += 1;
        }
        let prototypes: Vec<_> = sums.into_iter().zip(&support).map(|(s, &n)| (n > 0).then(|| s / n as f64)).collect();
        if prototypes.iter().flatten().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(input_err("non-finite prototype"));
        }
        Ok(Self { prototypes, support })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.iter().all(Option::is_none)
    }
}

/// Prototype class and softmax confidences over `<f, P_c>`; classes without a
/// prototype get probability 0.
pub fn prototype_labels(features: ArrayView2<f64>, bank: &PrototypeBank) -> Result<(Vec<usize>, Array2<f64>)> {
    if bank.is_empty() {
        return Err(input_err("empty prototype bank"));
    }
    let c = bank.num_classes();
    let mut conf = Array2::zeros((features.nrows(), c));
    let mut labels = Vec::with_capacity(features.nrows());
    for (i, f) in features.rows().into_iter().enumerate() {
        let scores: Vec<f64> =
            bank.prototypes.iter().map(|p| p.as_ref().map_or(f64::NEG_INFINITY, |p| p.dot(&f))).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..c {
            conf[[i, k]] = e[k] / z;
        }
        labels.push(argmax(scores).0);
    }
    Ok((labels, conf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rejection {
    BelowThreshold,
    PrototypeConflict,
    NegativeViolation,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::BelowThreshold => "below_threshold",
            Rejection::PrototypeConflict => "prototype_conflict",
            Rejection::NegativeViolation => "negative_violation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoCandidate {
    pub point: usize,
    pub classifier_class: usize,
    pub prototype_class: usize,
    pub confidence: f64,
    pub prototype_confidence: f64,
    pub rejection: Option<Rejection>,
}

impl PseudoCandidate {
    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub iteration: usize,
    pub thresholds: Vec<f64>,
    pub prototype_thresholds: Vec<f64>,
    pub candidates: Vec<PseudoCandidate>,
}

impl PseudoLabelBatch {
    pub fn accepted(&self) -> impl Iterator<Item = &PseudoCandidate> {
        self.candidates.iter().filter(|c| c.accepted())
    }

    pub fn accepted_pairs(&self) -> Vec<(usize, usize)> {
        self.accepted().map(|c| (c.point, c.classifier_class)).collect()
    }

    pub fn rejection_count(&self, r: Rejection) -> usize {
        self.candidates.iter().filter(|c| c.rejection == Some(r)).count()
    }
}

/// Points eligible for a pseudo label: negative-labelled ones at iteration 0,
/// negative or unlabelled ones afterwards. Already pseudo-labelled points are
/// skipped since earlier labels are kept.
pub fn candidate_points(labels: &LabelSet, iteration: usize) -> Vec<usize> {
    (0..labels.num_points)
        .filter(|&i| {
            if labels.pseudo.contains_key(&i) || labels.definite(i).is_some() {
                return false;
            }
            labels.negative.contains_key(&i) || (iteration > 0 && labels.is_unlabeled(i))
        })
        .collect()
}

fn gather(m: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), m.ncols()), |(r, c)| m[[rows[r], c]])
}

fn check_rows(probs: ArrayView2<f64>, n: usize) -> Result<()> {
    if probs.nrows() != n {
        return Err(input_err(format!("expected {n} probability rows, got {}", probs.nrows())));
    }
    Ok(())
}

/// ACT + FSF over the candidate points of `labels`; `probs` and `features` have
/// one row per point of `labels`.
pub fn estimate_pseudo_labels(
    probs: ArrayView2<f64>,
    features: ArrayView2<f64>,
    bank: &PrototypeBank,
    labels: &LabelSet,
    cfg: &RectifyConfig,
    iteration: usize,
) -> Result<PseudoLabelBatch> {
    cfg.validate()?;
    check_rows(probs, labels.num_points)?;
    check_rows(features, labels.num_points)?;
    if bank.num_classes() != probs.ncols() {
        return Err(input_err("prototype bank and classifier disagree on the class count"));
    }
    let cand = candidate_points(labels, iteration);
    let p = gather(probs, &cand);
    let (proto_class, proto_conf) = prototype_labels(gather(features, &cand).view(), bank)?;
    let thresholds = adaptive_thresholds(p.view(), cfg);
    let prototype_thresholds = adaptive_thresholds(proto_conf.view(), cfg);
    let candidates = cand
        .iter()
        .enumerate()
        .map(|(r, &point)| {
            let (yc, conf) = argmax(p.row(r).iter().copied());
            let yp = proto_class[r];
            let pconf = proto_conf[[r, yp]];
            let rejection = if conf < thresholds[yc] {
                Some(Rejection::BelowThreshold)
            } else if yc != yp {
                Some(Rejection::PrototypeConflict)
            } else if pconf < prototype_thresholds[yp] {
                Some(Rejection::BelowThreshold)
            } else if iteration == 0 && !labels.permits(point, yc) {
                Some(Rejection::NegativeViolation)
            } else {
                None
            };
            PseudoCandidate {
                point,
                classifier_class: yc,
                prototype_class: yp,
                confidence: conf,
                prototype_confidence: pconf,
                rejection,
            }
        })
        .collect();
    Ok(PseudoLabelBatch { iteration, thresholds, prototype_thresholds, candidates })
}

/// Confidence-only filters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineMethod {
    /// Accept when the top probability reaches `tau`.
    Fix(f64),
    /// Accept when the entropy is at most the median entropy of the predicted class.
    Esl,
    /// Accept the most confident points per class so that the accepted class
    /// histogram follows the labelled one.
    Dars,
}

impl FromStr for BaselineMethod {
    type Err = crate::Error;

    /// `fix` (tau = 0.5), `fix:<tau>`, `esl` or `dars`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "esl" => Ok(BaselineMethod::Esl),
            "dars" => Ok(BaselineMethod::Dars),
            "fix" => Ok(BaselineMethod::Fix(RectifyConfig::default().alpha)),
            _ => match s.strip_prefix("fix:").map(str::parse::<f64>) {
                Some(Ok(t)) if (0.0..=1.0).contains(&t) => Ok(BaselineMethod::Fix(t)),
                _ => Err(config_err(format!("unknown pseudo-label method `{s}`"))),
            },
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineMethod::Fix(t) => write!(f, "fix:{t}"),
            BaselineMethod::Esl => f.write_str("esl"),
            BaselineMethod::Dars => f.write_str("dars"),
        }
    }
}

fn entropy(row: impl IntoIterator<Item = f64>) -> f64 {
    row.into_iter().filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-class target counts for a total of `k`, proportional to `hist` by the
/// largest-remainder rule.
pub fn proportional_counts(hist: &[usize], k: usize) -> Vec<usize> {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return vec![0; hist.len()];
    }
    let exact: Vec<f64> = hist.iter().map(|&h| h as f64 * k as f64 / total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..hist.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = k.saturating_sub(counts.iter().sum());
    for &c in order.iter().take(missing) {
        counts[c] += 1;
    }
    counts
}

/// Accept mask of a confidence-only filter. `labeled_hist` is the class
/// histogram of the labelled set (only used by DARS).
pub fn baseline_filter(probs: ArrayView2<f64>, method: BaselineMethod, labeled_hist: &[usize]) -> Result<Vec<bool>> {
    let top: Vec<(usize, f64)> = probs.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
    let c = probs.ncols();
    Ok(match method {
        BaselineMethod::Fix(tau) => top.iter().map(|&(_, p)| p >= tau).collect(),
        BaselineMethod::Esl => {
            let ent: Vec<f64> = probs.rows().into_iter().map(|r| entropy(r.iter().copied())).collect();
            let med: Vec<f64> = (0..c)
                .map(|k| {
                    let mut v: Vec<f64> = top.iter().zip(&ent).filter(|(t, _)| t.0 == k).map(|(_, &e)| e).collect();
                    if v.is_empty() {
                        f64::NEG_INFINITY
                    } else {
                        median(&mut v)
                    }
                })
                .collect();
            top.iter().zip(&ent).map(|(t, &e)| e <= med[t.0]).collect()
        }
        BaselineMethod::Dars => {
            if labeled_hist.len() != c {
                return Err(input_err("labelled histogram length differs from the class count"));
            }
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
            for (i, &(k, _)) in top.iter().enumerate() {
                by_class[k].push(i);
            }
            for rows in &mut by_class {
                rows.sort_by(|&a, &b| top[b].1.total_cmp(&top[a].1).then(a.cmp(&b)));
            }
            let total: usize = labeled_hist.iter().sum();
            // Largest budget whose proportional share fits every class.
            let budget = (0..c)
                .filter(|&k| labeled_hist[k] > 0)
                .map(|k| by_class[k].len() * total / labeled_hist[k])
                .min()
                .unwrap_or(0);
            let mut k = budget;
            let counts = loop {
                let counts = proportional_counts(labeled_hist, k);
                if counts.iter().zip(&by_class).all(|(&n, rows)| n <= rows.len()) || k == 0 {
                    break counts;
                }
                k -= 1;
            };
            let mut mask = vec![false; top.len()];
            for (rows, &n) in by_class.iter().zip(&counts) {
                for &i in rows.iter().take(n) {
                    mask[i] = true;
                }
            }
            mask
        }
    })
}

/// A baseline over the same candidate set and iteration gating as
/// [`estimate_pseudo_labels`].
pub fn estimate_with_baseline(
    probs: ArrayView2<f64>,
    labels: &LabelSet,
    method: BaselineMethod,
    labeled_hist: &[usize],
    iteration: usize,
) -> Result<PseudoLabelBatch> {
    check_rows(probs, labels.num_points)?;
    let cand = candidate_points(labels, iteration);
    let p = gather(probs, &cand);
    let mask = baseline_filter(p.view(), method, labeled_hist)?;
    let candidates = cand
        .iter()
        .enumerate()
        .map(|(r, &point)| {
            let (yc, conf) = argmax(p.row(r).iter().copied());
            let rejection = if !mask[r] {
                Some(Rejection::BelowThreshold)
            } else if iteration == 0 && !labels.permits(point, yc) {
                Some(Rejection::NegativeViolation)
            } else {
                None
            };
            PseudoCandidate {
                point,
                classifier_class: yc,
                prototype_class: yc,
                confidence: conf,
                prototype_confidence: conf,
                rejection,
            }
        })
        .collect();
    Ok(PseudoLabelBatch { iteration, thresholds: Vec::new(), prototype_thresholds: Vec::new(), candidates })
}

/// Adds the accepted labels of `batch`; points that already carry a pseudo label
/// keep it. Returns the number of labels added.
pub fn merge_pseudo_labels(labels: &mut LabelSet, batch: &PseudoLabelBatch) -> Result<usize> {
    let mut added = 0;
    for c in batch.accepted() {
        let label = PseudoLabel {
            class: c.classifier_class,
            confidence: c.confidence.clamp(0.0, 1.0),
            iteration: batch.iteration,
        };
        added += labels.add_pseudo(c.point, label)? as usize;
    }
    Ok(added)
}
