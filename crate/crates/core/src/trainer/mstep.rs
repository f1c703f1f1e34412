//! The M-step: minibatch Nesterov SGD on `seg_weight * L_seg + assoc_weight * L_asso`.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dataset::{gather_rows, SceneData};
use super::features::{augment, point_features_rows};
use super::losses::{
    cross_entropy, lovasz_softmax, negative_loss_logits, softmax, softmax_backward, NegativeTarget, Target,
};
use super::model::ClassifierState;
use super::nn::standardizer;
use super::optim::{cosine_lr, nesterov_step, SgdConfig};
use crate::activelabel::LabelSet;
use crate::assoc::{assoc_loss, l2_normalize_backward, l2_normalize_rows, AssocConfig};
use crate::error::{config_err, input_err, Error, Result};
use crate::superpixel::match_superpixels;

/// Which label kinds enter the segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Supervision {
    pub propagated: bool,
    pub negative: bool,
    pub pseudo: bool,
    /// Pseudo labels at weight 1 instead of their E-step confidence.
    pub hard_pseudo: bool,
}

impl Default for Supervision {
    fn default() -> Self {
        Self { propagated: true, negative: true, pseudo: true, hard_pseudo: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Scenes per minibatch.
    pub batch_scenes: usize,
    pub epochs: usize,
    pub seg_weight: f64,
    pub assoc_weight: f64,
    pub assoc: AssocConfig,
    pub lovasz: bool,
    pub augment: bool,
    /// Cap on labelled points per scene entering the association loss.
    pub max_assoc_points: usize,
    /// Cap on rows per scene and step; sparse rows are always kept and the rest
    /// are sampled.
    pub max_rows: usize,
    pub supervision: Supervision,
    pub em_max_iterations: usize,
    /// EM iterations run before the improvement test may stop the loop.
    pub em_min_iterations: usize,
    /// Required validation mIoU gain, in points.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_scenes: 2,
            epochs: 20,
            seg_weight: 1.0,
            assoc_weight: 0.5,
            assoc: AssocConfig::default(),
            lovasz: true,
            augment: true,
            max_assoc_points: 64,
            max_rows: 1024,
            supervision: Supervision::default(),
            em_max_iterations: 3,
            em_min_iterations: 1,
            tolerance: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(config_err("lr must be >= 0, momentum in [0, 1), weight decay >= 0"));
        }
        if self.seg_weight < 0.0 || self.assoc_weight < 0.0 || self.assoc.beta_w < 0.0 || self.assoc.beta_v < 0.0 {
            return Err(config_err("loss weights must be non-negative"));
        }
        if self.batch_scenes == 0 || self.max_rows == 0 {
            return Err(config_err("batch_scenes and max_rows must be positive"));
        }
        if self.tolerance.is_nan() {
            return Err(config_err("tolerance must be a number"));
        }
        Ok(())
    }
}

/// Mixes `parts` into one seed (splitmix64 finaliser per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Loss inputs of one scene for one M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTargets {
    /// Subset indices that enter the forward pass.
    pub rows: Vec<usize>,
    /// Hard targets, indexed into `rows`.
    pub hard: Vec<Target>,
    pub negative: Vec<NegativeTarget>,
    /// Sparse points matched to superpixels, indexed into `rows`, with their
    /// class and the `(camera, superpixel)` pairs they fall into.
    pub assoc_points: Vec<(usize, usize, Vec<(usize, usize)>)>,
    /// Rows kept by every subsample (the sparse labels).
    pub pinned: Vec<bool>,
}

impl SceneTargets {
    pub fn build(scene: &SceneData, labels: &LabelSet, sup: &Supervision) -> Result<Self> {
        if labels.num_points != scene.len() {
            return Err(input_err(format!("label set covers {} points, scene has {}", labels.num_points, scene.len())));
        }
        let mut hard: BTreeMap<usize, (usize, f64)> = labels.sparse.iter().map(|(&i, &c)| (i, (c, 1.0))).collect();
        if sup.propagated {
            hard.extend(labels.propagated.iter().map(|(&i, &c)| (i, (c, 1.0))));
        }
        if sup.pseudo {
            for (&i, p) in &labels.pseudo {
                hard.entry(i).or_insert((p.class, if sup.hard_pseudo { 1.0 } else { p.confidence }));
            }
        }
        let mut negative: BTreeMap<usize, &Vec<usize>> = BTreeMap::new();
        if sup.negative {
            negative.extend(labels.negative.iter().filter(|(i, _)| !hard.contains_key(i)).map(|(&i, s)| (i, s)));
        }
        let mut rows: Vec<usize> = hard.keys().chain(negative.keys()).copied().collect();
        rows.sort_unstable();
        let pos: BTreeMap<usize, usize> = rows.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        let hard_t = hard.iter().map(|(i, &(class, weight))| Target { row: pos[i], class, weight }).collect();
        let neg_t = negative.iter().map(|(i, s)| NegativeTarget { row: pos[i], allowed: s.to_vec() }).collect();
        let mut matched: BTreeMap<usize, (usize, Vec<(usize, usize)>)> = BTreeMap::new();
        for (cam, c) in scene.cameras.iter().enumerate() {
            for m in match_superpixels(&c.map, &c.hits, &labels.sparse) {
                for p in m.points {
                    matched.entry(p).or_insert((m.class, Vec::new())).1.push((cam, m.superpixel));
                }
            }
        }
        let assoc_points = matched.into_iter().map(|(p, (class, sp))| (pos[&p], class, sp)).collect();
        let pinned = rows.iter().map(|i| labels.sparse.contains_key(i)).collect();
        Ok(Self { rows, hard: hard_t, negative: neg_t, assoc_points, pinned })
    }

    /// Keeps all pinned rows and a random sample of the others, `max` in total
    /// (or all pinned rows if there are more).
    pub fn subsample(&self, max: usize, rng: &mut ChaCha8Rng) -> SceneTargets {
        if self.rows.len() <= max {
            return self.clone();
        }
        let mut free: Vec<usize> = (0..self.rows.len()).filter(|&r| !self.pinned[r]).collect();
        let room = max.saturating_sub(self.rows.len() - free.len());
        free.shuffle(rng);
        free.truncate(room);
        let mut keep: Vec<usize> = (0..self.rows.len()).filter(|&r| self.pinned[r]).chain(free).collect();
        keep.sort_unstable();
        let mut map = vec![usize::MAX; self.rows.len()];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        SceneTargets {
            rows: keep.iter().map(|&r| self.rows[r]).collect(),
            hard: self
                .hard
                .iter()
                .filter(|t| map[t.row] != usize::MAX)
                .map(|t| Target { row: map[t.row], ..*t })
                .collect(),
            negative: self
                .negative
                .iter()
                .filter(|t| map[t.row] != usize::MAX)
                .map(|t| NegativeTarget { row: map[t.row], allowed: t.allowed.clone() })
                .collect(),
            assoc_points: self
                .assoc_points
                .iter()
                .filter(|a| map[a.0] != usize::MAX)
                .map(|a| (map[a.0], a.1, a.2.clone()))
                .collect(),
            pinned: keep.iter().map(|&r| self.pinned[r]).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Per-step loss values of one scene.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub lovasz: f64,
    pub negative: f64,
    pub assoc: f64,
    /// Whether the association batch was non-empty.
    pub assoc_used: bool,
}

impl LossParts {
    pub fn seg(&self) -> f64 {
        self.ce + self.lovasz + self.negative
    }
}

/// Loss and gradient (already weighted) of one scene.
pub fn scene_loss_grad(
    state: &ClassifierState,
    scene: &SceneData,
    targets: &SceneTargets,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut [f64],
) -> Result<LossParts> {
    let mut parts = LossParts::default();
    if targets.is_empty() {
        return Ok(parts);
    }
    let sampled;
    let targets = if targets.rows.len() > cfg.max_rows {
        sampled = targets.subsample(cfg.max_rows, rng);
        &sampled
    } else {
        targets
    };
    let x3 = if cfg.augment {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let scale = rng.random_range(0.95..1.05);
        point_features_rows(&augment(&scene.points, angle, scale), &scene.intensity, &scene.neighbors, &targets.rows)
    } else {
        gather_rows(scene.point_features.view(), &targets.rows)
    };
    let x2 = gather_rows(scene.pixel_features.view(), &targets.rows);
    let fwd = state.forward(x3.view(), x2.view())?;
    let probs = softmax(&fwd.logits);
    let (ce, mut dlogits) = cross_entropy(&fwd.logits, &targets.hard);
    parts.ce = ce;
    if cfg.lovasz && !targets.hard.is_empty() {
        let rows: Vec<usize> = targets.hard.iter().map(|t| t.row).collect();
        let classes: Vec<usize> = targets.hard.iter().map(|t| t.class).collect();
        let (v, dp) = lovasz_softmax(&probs, &rows, &classes);
        parts.lovasz = v;
        dlogits += &softmax_backward(&probs, &dp);
    }
    let neg = negative_loss_logits(&fwd.logits, &targets.negative);
    parts.negative = neg.value;
    dlogits += &neg.grad;
    dlogits *= cfg.seg_weight;

    let mut extra = None;
    if cfg.assoc_weight > 0.0 && !targets.assoc_points.is_empty() {
        let mut chosen: Vec<usize> = (0..targets.assoc_points.len()).collect();
        if chosen.len() > cfg.max_assoc_points {
            chosen.shuffle(rng);
            chosen.truncate(cfg.max_assoc_points);
            chosen.sort_unstable();
        }
        let mut spx: Vec<(usize, usize)> =
            chosen.iter().flat_map(|&k| targets.assoc_points[k].2.iter().copied()).collect();
        spx.sort_unstable();
        spx.dedup();
        let rows: Vec<usize> = chosen.iter().map(|&k| targets.assoc_points[k].0).collect();
        let labels: Vec<usize> = chosen.iter().map(|&k| targets.assoc_points[k].1).collect();
        let pooled = Array2::from_shape_fn((spx.len(), scene.pixel_features.ncols()), |(r, c)| {
            let (cam, s) = spx[r];
            scene.cameras[cam].pooled[[s, c]]
        });
        let image = state.image_branch(pooled.view())?;
        let f3 = gather_rows(fwd.point.out.view(), &rows);
        let net = &state.network;
        let (z3, z2) = (
            net.proj3d.forward(&net.layout, &state.params, f3.view()),
            net.proj2d.forward(&net.layout, &state.params, image.out.view()),
        );
        let (y3, n3) = l2_normalize_rows(&z3);
        let (y2, n2) = l2_normalize_rows(&z2);
        let lg = assoc_loss(y3.view(), y2.view(), &labels, &cfg.assoc)?;
        parts.assoc = lg.value;
        parts.assoc_used = true;
        let w = cfg.assoc_weight;
        let dz3 = l2_normalize_backward(&y3, &n3, &lg.d_f3d) * w;
        let dz2 = l2_normalize_backward(&y2, &n2, &lg.d_f2d) * w;
        let df3 = net.proj3d.backward(&net.layout, &state.params, grads, f3.view(), &dz3);
        let df2 = net.proj2d.backward(&net.layout, &state.params, grads, image.out.view(), &dz2);
        state.image_backward(&image, &df2, grads);
        let mut dpoint = Array2::zeros(fwd.point.out.raw_dim());
        for (k, &r) in rows.iter().enumerate() {
            let mut row = dpoint.row_mut(r);
            row += &df3.row(k);
        }
        extra = Some(dpoint);
    }
    state.backward(&fwd, &dlogits, extra.as_ref(), grads);
    let total = cfg.seg_weight * parts.seg() + cfg.assoc_weight * parts.assoc;
    if !total.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss on scene {}", scene.seed)));
    }
    Ok(parts)
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seg: f64,
    pub assoc: f64,
}

/// Sets the input standardisation from the cached features of `scenes`.
pub fn fit_standardization(state: &mut ClassifierState, scenes: &[SceneData]) -> Result<()> {
    let n: usize = scenes.iter().map(SceneData::len).sum();
    if n == 0 {
        return Err(input_err("no points to standardise on"));
    }
    let views3: Vec<_> = scenes.iter().map(|s| s.point_features.view()).collect();
    let views2: Vec<_> = scenes.iter().map(|s| s.pixel_features.view()).collect();
    let all3 = ndarray::concatenate(Axis(0), &views3).map_err(|e| input_err(e.to_string()))?;
    let all2 = ndarray::concatenate(Axis(0), &views2).map_err(|e| input_err(e.to_string()))?;
    (state.point_mean, state.point_std) = standardizer(all3.view());
    (state.pixel_mean, state.pixel_std) = standardizer(all2.view());
    Ok(())
}

/// One M-step over `scenes` with `labels` (one set per scene). `round` separates
/// the random streams of successive M-steps. On divergence `state` is left as it
/// was before the failing update.
pub fn m_step(
    state: &mut ClassifierState,
    scenes: &[SceneData],
    labels: &[LabelSet],
    cfg: &TrainConfig,
    round: u64,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if scenes.len() != labels.len() {
        return Err(input_err("one label set per scene is required"));
    }
    let targets: Vec<SceneTargets> = scenes
        .par_iter()
        .zip(labels.par_iter())
        .map(|(s, l)| SceneTargets::build(s, l, &cfg.supervision))
        .collect::<Result<_>>()?;
    let active: Vec<usize> = (0..scenes.len()).filter(|&i| !targets[i].is_empty()).collect();
    let per_epoch = active.len().div_ceil(cfg.batch_scenes);
    let total = per_epoch * cfg.epochs;
    let sgd = SgdConfig { momentum: cfg.momentum, weight_decay: cfg.weight_decay };
    state.velocity.iter_mut().for_each(|v| *v = 0.0);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, round]));
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = active.clone();
        order.shuffle(&mut order_rng);
        let (mut seg_sum, mut assoc_sum, mut lr) = (0.0, 0.0, cfg.lr);
        for batch in order.chunks(cfg.batch_scenes) {
            lr = cosine_lr(cfg.lr, step, total);
            let snapshot: &ClassifierState = state;
            let results: Vec<Result<(LossParts, Vec<f64>)>> = batch
                .par_iter()
                .map(|&si| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, round, step as u64, si as u64]));
                    let mut g = vec![0.0; snapshot.params.len()];
                    let parts = scene_loss_grad(snapshot, &scenes[si], &targets[si], cfg, &mut rng, &mut g)?;
                    Ok((parts, g))
                })
                .collect();
            let mut grads = vec![0.0; state.params.len()];
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (parts, g) = r?;
                seg_sum += parts.seg() * scale;
                assoc_sum += parts.assoc * scale;
                for (a, b) in grads.iter_mut().zip(&g) {
                    *a += b * scale;
                }
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient at step {step}")));
            }
            nesterov_step(&mut state.params, &mut state.velocity, &grads, lr, &sgd);
            state.step += 1;
            step += 1;
        }
        records.push(EpochRecord {
            epoch,
            steps: per_epoch,
            lr,
            seg: seg_sum / per_epoch.max(1) as f64,
            assoc: assoc_sum / per_epoch.max(1) as f64,
        });
    }
    if !state.is_finite() {
        return Err(Error::Divergence("non-finite parameters after the M-step".into()));
    }
    Ok(records)
}

/// Class probabilities and fused features for every point of `scene`.
pub fn predict(state: &ClassifierState, scene: &SceneData) -> Result<(Array2<f64>, Array2<f64>)> {
    let fwd = state.forward(scene.point_features.view(), scene.pixel_features.view())?;
    Ok((softmax(&fwd.logits), fwd.fused))
}

/// Arg-max class per point.
pub fn predict_classes(state: &ClassifierState, scene: &SceneData) -> Result<Vec<usize>> {
    let (p, _) = predict(state, scene)?;
    Ok(p.rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b }).0)
        .collect())
}
