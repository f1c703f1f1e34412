//! The synthetic benchmark: label statistics and the supervision ladder
//! (sparse → +negative → +propagated → +association → EM), plus the fully
//! labelled upper bound, all trained from the same initial state.

use std::time::Instant;

use rayon::prelude::*;
use weaklab_core::activelabel::{active_label, label_statistics, LabelSet, LabelStatistics};
use weaklab_core::geometry::camera_subset;
use weaklab_core::superpixel::{seeds_segment, SuperpixelMap};
use weaklab_core::synth::generate_scene;
use weaklab_core::trainer::em::EStepReport;
use weaklab_core::trainer::{
    evaluate, fit_standardization, m_step, train_em, ClassifierState, SceneData, Supervision, TrainConfig,
};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub struct BenchData {
    pub train: Vec<SceneData>,
    pub val: Vec<SceneData>,
    pub labels: Vec<LabelSet>,
    /// Label coverage over the training split.
    pub stats: LabelStatistics,
    /// Sparse and propagated labels that disagree with the ground truth.
    pub wrong_labels: usize,
    pub seconds: f64,
}

/// Generates, segments and labels every seed; seeds in the validation split
/// keep no labels.
pub fn prepare(cfg: &RunConfig, seeds: &[u64]) -> Result<BenchData> {
    let t = Instant::now();
    let scene_cfg = cfg.scene()?;
    let scfg = cfg.seeds_config();
    let al_cfg = cfg.active_label();
    let scenes: Vec<(SceneData, LabelSet, usize)> = seeds
        .par_iter()
        .map(|&seed| {
            let frame = generate_scene(&scene_cfg, seed)?;
            let maps: Vec<SuperpixelMap> =
                frame.images.iter().map(|im| Ok(seeds_segment(im, &scfg)?.map)).collect::<Result<_>>()?;
            let data = SceneData::build(&frame, Some(&maps))?;
            let sub = frame.restrict(&camera_subset(&frame));
            let labels = active_label(&sub.points, &sub.gt_class, &al_cfg)?.labels;
            Ok((data, labels, frame.len()))
        })
        .collect::<Result<_>>()?;
    let (mut train, mut val, mut labels, mut sizes) = (vec![], vec![], vec![], vec![]);
    let mut wrong_labels = 0;
    for (data, l, full) in scenes {
        if cfg.is_validation(data.seed) {
            val.push(data);
        } else {
            wrong_labels += l.sparse.iter().chain(&l.propagated).filter(|(&i, &c)| data.gt[i] != c).count();
            train.push(data);
            labels.push(l);
            sizes.push(full);
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Config("the benchmark needs both training and validation scenes".into()));
    }
    let stats = label_statistics(&labels, &sizes)?;
    Ok(BenchData { train, val, labels, stats, wrong_labels, seconds: t.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rung {
    pub name: String,
    /// Validation mIoU in points.
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderReport {
    pub rungs: Vec<Rung>,
    /// Validation mIoU after the warm-up and after every EM iteration.
    pub em_history: Vec<f64>,
    pub em_best: usize,
    pub estep: Vec<EStepReport>,
    pub seconds: f64,
}

impl LadderReport {
    pub fn miou(&self, name: &str) -> Option<f64> {
        self.rungs.iter().find(|r| r.name == name).map(|r| r.miou)
    }
}

pub const SPARSE: &str = "sparse";
pub const NEGATIVE: &str = "+negative";
pub const PROPAGATED: &str = "+propagated";
pub const ASSOCIATION: &str = "+association";
pub const FULL: &str = "full (EM + association)";
pub const UPPER: &str = "upper bound (all labels)";

/// Every training point labelled with its ground truth.
pub fn full_labels(train: &[SceneData]) -> Vec<LabelSet> {
    train
        .iter()
        .map(|d| {
            let mut l = LabelSet::new(d.len());
            for (i, &g) in d.gt.iter().enumerate() {
                l.add_propagated(i, g).expect("fresh label set");
            }
            l
        })
        .collect()
}

pub fn run_ladder(cfg: &RunConfig, data: &BenchData, mut log: impl FnMut(&str)) -> Result<LadderReport> {
    let t0 = Instant::now();
    let base = cfg.train()?;
    let mut init = ClassifierState::init(cfg.model(cfg.scene()?.num_classes()), cfg.train_seed)?;
    fit_standardization(&mut init, &data.train)?;
    let off = Supervision { propagated: false, negative: false, pseudo: false, hard_pseudo: false };
    let with = |sup: Supervision, assoc: f64| TrainConfig { supervision: sup, assoc_weight: assoc, ..base.clone() };
    let mut rungs = Vec::new();
    let mut push = |name: &str, state: &ClassifierState, t: Instant, log: &mut dyn FnMut(&str)| -> Result<()> {
        let cm = evaluate(state, &data.val)?;
        let (iou, miou) = cm.miou();
        let r = Rung { name: name.into(), miou: 100.0 * miou, iou, seconds: t.elapsed().as_secs_f64() };
        log(&format!("{:<26} mIoU {:6.2}  ({:.0} s)", r.name, r.miou, r.seconds));
        rungs.push(r);
        Ok(())
    };
    let single = |tcfg: &TrainConfig, labels: &[LabelSet]| -> Result<ClassifierState> {
        let mut s = init.clone();
        m_step(&mut s, &data.train, labels, tcfg, 0)?;
        Ok(s)
    };
    for (name, sup, assoc) in [
        (SPARSE, off, 0.0),
        (NEGATIVE, Supervision { negative: true, ..off }, 0.0),
        (PROPAGATED, Supervision { negative: true, propagated: true, ..off }, 0.0),
        (ASSOCIATION, Supervision { negative: true, propagated: true, ..off }, base.assoc_weight),
    ] {
        let t = Instant::now();
        let s = single(&with(sup, assoc), &data.labels)?;
        push(name, &s, t, &mut log)?;
    }
    let t = Instant::now();
    let (best, em, _) =
        train_em(init.clone(), &data.train, &data.val, data.labels.clone(), &base, &cfg.rectify(), cfg.method()?)?;
    push(FULL, &best, t, &mut log)?;
    let t = Instant::now();
    let upper = single(&with(Supervision { propagated: true, ..off }, 0.0), &full_labels(&data.train))?;
    push(UPPER, &upper, t, &mut log)?;
    Ok(LadderReport {
        rungs,
        em_history: em.history,
        em_best: em.best,
        estep: em.iterations.into_iter().map(|i| i.estep).collect(),
        seconds: t0.elapsed().as_secs_f64(),
    })
}
