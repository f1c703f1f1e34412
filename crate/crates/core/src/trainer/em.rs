//! The EM driver: alternate pseudo-label estimation (E) and training (M) until
//! validation mIoU stops improving.

use ndarray::{concatenate, Axis};
use rayon::prelude::*;

use super::dataset::SceneData;
use super::model::ClassifierState;
use super::mstep::{m_step, predict, predict_classes, EpochRecord, TrainConfig};
use crate::activelabel::LabelSet;
use crate::error::{input_err, Result};
use crate::metrics::{pseudo_label_quality, ConfusionMatrix};
use crate::rectify::{
    estimate_pseudo_labels, estimate_with_baseline, merge_pseudo_labels, BaselineMethod, PrototypeBank,
    PseudoLabelBatch, RectifyConfig, Rejection,
};

/// Pseudo-label filter used in the E-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PseudoMethod {
    ActFsf,
    Baseline(BaselineMethod),
}

impl std::str::FromStr for PseudoMethod {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "act-fsf" => Ok(PseudoMethod::ActFsf),
            other => other.parse().map(PseudoMethod::Baseline),
        }
    }
}

impl std::fmt::Display for PseudoMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PseudoMethod::ActFsf => f.write_str("act-fsf"),
            PseudoMethod::Baseline(b) => b.fmt(f),
        }
    }
}

/// Confusion matrix of arg-max predictions over `scenes`.
pub fn evaluate(state: &ClassifierState, scenes: &[SceneData]) -> Result<ConfusionMatrix> {
    let c = state.config().num_classes;
    let parts: Vec<ConfusionMatrix> = scenes
        .par_iter()
        .map(|s| ConfusionMatrix::from_predictions(c, &s.gt, &predict_classes(state, s)?))
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(c);
    for p in &parts {
        cm.merge(p)?;
    }
    Ok(cm)
}

/// Validation mIoU in points (0-100).
pub fn validation_miou(state: &ClassifierState, scenes: &[SceneData]) -> Result<f64> {
    Ok(100.0 * evaluate(state, scenes)?.miou().1)
}

/// Outcome of one E-step over all training scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepReport {
    pub iteration: usize,
    pub candidates: usize,
    pub accepted: usize,
    pub added: usize,
    pub below_threshold: usize,
    pub prototype_conflict: usize,
    pub negative_violation: usize,
    /// Error rate of the accepted labels against ground truth (diagnostic only).
    pub error_rate: Option<f64>,
}

/// Runs the E-step on the concatenation of all training scenes and merges the
/// accepted labels into `labels`.
pub fn e_step(
    state: &ClassifierState,
    scenes: &[SceneData],
    labels: &mut [LabelSet],
    rcfg: &RectifyConfig,
    method: PseudoMethod,
    iteration: usize,
) -> Result<(PseudoLabelBatch, EStepReport)> {
    if scenes.len() != labels.len() {
        return Err(input_err("one label set per scene is required"));
    }
    let outputs: Vec<_> = scenes.par_iter().map(|s| predict(state, s)).collect::<Result<_>>()?;
    let probs = concatenate(Axis(0), &outputs.iter().map(|o| o.0.view()).collect::<Vec<_>>())
        .map_err(|e| input_err(e.to_string()))?;
    let feats = concatenate(Axis(0), &outputs.iter().map(|o| o.1.view()).collect::<Vec<_>>())
        .map_err(|e| input_err(e.to_string()))?;
    let sizes: Vec<usize> = scenes.iter().map(SceneData::len).collect();
    let mut all = LabelSet::concat(labels);
    let gt: Vec<usize> = scenes.iter().flat_map(|s| s.gt.iter().copied()).collect();
    let labelled: Vec<(usize, usize)> = all.sparse.iter().chain(&all.propagated).map(|(&i, &c)| (i, c)).collect();
    let batch = match method {
        PseudoMethod::ActFsf => {
            let bank = PrototypeBank::build(feats.view(), &labelled, state.config().num_classes)?;
            estimate_pseudo_labels(probs.view(), feats.view(), &bank, &all, rcfg, iteration)?
        }
        PseudoMethod::Baseline(b) => {
            let mut hist = vec![0; state.config().num_classes];
            for &(_, c) in &labelled {
                hist[c] += 1;
            }
            estimate_with_baseline(probs.view(), &all, b, &hist, iteration)?
        }
    };
    let added = merge_pseudo_labels(&mut all, &batch)?;
    let quality = pseudo_label_quality(&batch.accepted_pairs(), &gt, batch.candidates.len())?;
    for (dst, src) in labels.iter_mut().zip(all.split(&sizes)?) {
        *dst = src;
    }
    let report = EStepReport {
        iteration,
        candidates: batch.candidates.len(),
        accepted: quality.accepted,
        added,
        below_threshold: batch.rejection_count(Rejection::BelowThreshold),
        prototype_conflict: batch.rejection_count(Rejection::PrototypeConflict),
        negative_violation: batch.rejection_count(Rejection::NegativeViolation),
        error_rate: quality.error_rate,
    };
    Ok((batch, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmIteration {
    pub estep: EStepReport,
    pub epochs: Vec<EpochRecord>,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub iteration: usize,
    pub labels: Vec<LabelSet>,
    /// Validation mIoU after the warm-up and after each EM iteration.
    pub history: Vec<f64>,
    pub iterations: Vec<EmIteration>,
    /// Index into `history` of the returned state.
    pub best: usize,
}

/// EM iterations after a completed warm-up M-step. Stops when validation mIoU
/// improves by no more than `cfg.tolerance` (once `em_min_iterations` have run)
/// or after `em_max_iterations`; returns the best validated state.
pub fn em_loop(
    mut state: ClassifierState,
    train: &[SceneData],
    val: &[SceneData],
    labels: Vec<LabelSet>,
    cfg: &TrainConfig,
    rcfg: &RectifyConfig,
    method: PseudoMethod,
) -> Result<(ClassifierState, EmState)> {
    cfg.validate()?;
    rcfg.validate()?;
    let first = validation_miou(&state, val)?;
    let mut em = EmState { iteration: 0, labels, history: vec![first], iterations: Vec::new(), best: 0 };
    let mut best = state.clone();
    for it in 0..cfg.em_max_iterations {
        let (_, estep) = e_step(&state, train, &mut em.labels, rcfg, method, it)?;
        let epochs = m_step(&mut state, train, &em.labels, cfg, it as u64 + 1)?;
        let miou = validation_miou(&state, val)?;
        let prev = *em.history.last().unwrap();
        em.history.push(miou);
        em.iterations.push(EmIteration { estep, epochs, miou });
        em.iteration = it + 1;
        if miou > em.history[em.best] {
            em.best = em.history.len() - 1;
            best = state.clone();
        }
        if !(miou - prev > cfg.tolerance) && it + 1 >= cfg.em_min_iterations {
            break;
        }
    }
    Ok((best, em))
}

/// Warm-up M-step on the initial labels followed by [`em_loop`].
pub fn train_em(
    state: ClassifierState,
    train: &[SceneData],
    val: &[SceneData],
    labels: Vec<LabelSet>,
    cfg: &TrainConfig,
    rcfg: &RectifyConfig,
    method: PseudoMethod,
) -> Result<(ClassifierState, EmState, Vec<EpochRecord>)> {
    let mut state = state;
    let warm = m_step(&mut state, train, &labels, cfg, 0)?;
    let (best, em) = em_loop(state, train, val, labels, cfg, rcfg, method)?;
    Ok((best, em, warm))
}
