//! The subcommands as library functions. Each writes its artifacts and a
//! manifest into `out` and returns the manifest plus a short report.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;
use weaklab_core::activelabel::{active_label, label_statistics, LabelSet, LabelStatistics};
use weaklab_core::container::Container;
use weaklab_core::geometry::camera_subset;
use weaklab_core::metrics::ConfusionMatrix;
use weaklab_core::superpixel::seeds_segment;
use weaklab_core::synth::generate_scene;
use weaklab_core::trainer::em::EStepReport;
use weaklab_core::trainer::mstep::EpochRecord;
use weaklab_core::trainer::{
    e_step, evaluate, fit_standardization, m_step, train_em, ClassifierState, PseudoMethod, SceneData,
};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::store::*;

/// Output of a command.
pub struct Outcome {
    pub manifest: RunManifest,
    pub report: String,
}

fn finish(out: &Path, manifest: RunManifest, report: String) -> Result<Outcome> {
    manifest.write(out)?;
    Ok(Outcome { manifest, report })
}

pub fn synth(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Outcome> {
    let scene_cfg = cfg.scene()?;
    create_dir(out)?;
    let frames: Vec<_> =
        seeds.par_iter().map(|&s| generate_scene(&scene_cfg, s)).collect::<std::result::Result<_, _>>()?;
    let mut m = RunManifest::new("synth", &cfg.hash(), seeds);
    m.param("classes", scene_cfg.class_names().join(","));
    let mut points = 0;
    for f in &frames {
        m.write_artifact(out, &scene_file(f.seed), &f.to_container()?.to_bytes())?;
        points += f.len();
    }
    let report = format!("synth: {} scenes, {points} points", frames.len());
    finish(out, m, report)
}

fn statistics_record(name: &str, s: &LabelStatistics) -> serde_json::Value {
    json!({
        "split": name,
        "total_points": s.total_points,
        "training_points": s.training_points,
        "sparse": s.sparse,
        "propagated": s.propagated,
        "negative": s.negative,
        "sparse_rate": s.sparse_rate,
        "propagated_rate": s.propagated_rate,
        "negative_rate": s.negative_rate,
    })
}

pub fn label(cfg: &RunConfig, scenes: &Path, out: &Path) -> Result<Outcome> {
    let seeds = seeds_of(scenes)?;
    let al_cfg = cfg.active_label();
    let class_names = cfg.scene()?.class_names();
    create_dir(out)?;
    let arts: Vec<LabelArtifact> = seeds
        .par_iter()
        .map(|&seed| {
            let frame = load_frame(scenes, seed)?;
            let subset = camera_subset(&frame);
            let sub = frame.restrict(&subset);
            let al = active_label(&sub.points, &sub.gt_class, &al_cfg)?;
            Ok(LabelArtifact {
                seed,
                full_size: frame.len(),
                subset,
                ground: al.ground,
                units: al.units,
                labels: al.labels,
                class_names: class_names.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut m = RunManifest::new("label", &cfg.hash(), &seeds);
    m.input("scenes", scenes)?;
    for a in &arts {
        a.save(out, &mut m)?;
    }
    let stats = |pick: &dyn Fn(u64) -> bool| -> Result<LabelStatistics> {
        let chosen: Vec<&LabelArtifact> = arts.iter().filter(|a| pick(a.seed)).collect();
        let sets: Vec<LabelSet> = chosen.iter().map(|a| a.labels.clone()).collect();
        let sizes: Vec<usize> = chosen.iter().map(|a| a.full_size).collect();
        Ok(label_statistics(&sets, &sizes)?)
    };
    let train = stats(&|s| !cfg.is_validation(s))?;
    let all = stats(&|_| true)?;
    let text = format!("{}\n{}\n", statistics_record("train", &train), statistics_record("all", &all));
    m.write_artifact(out, "statistics.jsonl", text.as_bytes())?;
    let report = format!(
        "label: {} scenes, sparse {:.3}%, propagated {:.1}%, negative {:.1}% (training split)",
        arts.len(),
        100.0 * train.sparse_rate,
        100.0 * train.propagated_rate,
        100.0 * train.negative_rate
    );
    finish(out, m, report)
}

pub fn superpixel(cfg: &RunConfig, scenes: &Path, out: &Path) -> Result<Outcome> {
    let seeds = seeds_of(scenes)?;
    let scfg = cfg.seeds_config();
    create_dir(out)?;
    let containers: Vec<(u64, Container)> = seeds
        .par_iter()
        .map(|&seed| {
            let frame = load_frame(scenes, seed)?;
            let mut c = Container::new();
            c.push_text("kind", "superpixels")?;
            for (k, im) in frame.images.iter().enumerate() {
                let r = seeds_segment(im, &scfg)?;
                r.map.write_sections(&mut c, &format!("camera{k}."))?;
                c.push_f64(&format!("camera{k}.energy"), &[r.energy_trace.len()], r.energy_trace.clone())?;
            }
            Ok((seed, c))
        })
        .collect::<Result<_>>()?;
    let mut m = RunManifest::new("superpixel", &cfg.hash(), &seeds);
    m.input("scenes", scenes)?.param("n", scfg.num_superpixels);
    for (seed, c) in &containers {
        m.write_artifact(out, &superpixel_file(*seed), &c.to_bytes())?;
    }
    let report = format!("superpixel: {} scenes, {} superpixels per image", seeds.len(), scfg.num_superpixels);
    finish(out, m, report)
}

/// Inputs shared by the training commands.
pub struct TrainInputs<'a> {
    pub scenes: &'a Path,
    pub labels: &'a Path,
    /// Without superpixels the association loss has nothing to pair with.
    pub superpixels: Option<&'a Path>,
}

struct Split {
    train: Vec<SceneData>,
    train_labels: Vec<LabelArtifact>,
    val: Vec<SceneData>,
    val_labels: Vec<LabelArtifact>,
}

fn load_split(cfg: &RunConfig, inputs: &TrainInputs) -> Result<(Vec<u64>, Split)> {
    let seeds = seeds_of(inputs.labels)?;
    let loaded = load_scenes(inputs.scenes, Some(inputs.labels), inputs.superpixels, &seeds)?;
    let mut split = Split { train: vec![], train_labels: vec![], val: vec![], val_labels: vec![] };
    for s in loaded {
        let l = s.labels.expect("labels requested");
        if cfg.is_validation(s.data.seed) {
            split.val.push(s.data);
            split.val_labels.push(l);
        } else {
            split.train.push(s.data);
            split.train_labels.push(l);
        }
    }
    if split.train.is_empty() {
        return Err(CliError::Config("no training scenes (every seed falls in the validation split)".into()));
    }
    Ok((seeds, split))
}

fn record_inputs(m: &mut RunManifest, inputs: &TrainInputs) -> Result<()> {
    m.input("scenes", inputs.scenes)?.input("labels", inputs.labels)?;
    if let Some(sp) = inputs.superpixels {
        m.input("superpixels", sp)?;
    }
    Ok(())
}

fn initial_state(cfg: &RunConfig, train: &[SceneData]) -> Result<ClassifierState> {
    let mut state = ClassifierState::init(cfg.model(cfg.scene()?.num_classes()), cfg.train_seed)?;
    fit_standardization(&mut state, train)?;
    Ok(state)
}

fn epoch_line(phase: &str, round: usize, e: &EpochRecord) -> String {
    json!({"phase": phase, "iteration": round, "epoch": e.epoch, "step": e.steps, "lr": e.lr, "seg_loss": e.seg, "assoc_loss": e.assoc})
        .to_string()
}

fn estep_json(r: &EStepReport) -> serde_json::Value {
    json!({
        "iteration": r.iteration,
        "candidates": r.candidates,
        "accepted": r.accepted,
        "added": r.added,
        "below_threshold": r.below_threshold,
        "prototype_conflict": r.prototype_conflict,
        "negative_violation": r.negative_violation,
        "error_rate": r.error_rate,
    })
}

fn miou_points(cm: &ConfusionMatrix) -> f64 {
    100.0 * cm.miou().1
}

pub fn train(cfg: &RunConfig, inputs: &TrainInputs, out: &Path) -> Result<Outcome> {
    let tcfg = cfg.train()?;
    let (seeds, split) = load_split(cfg, inputs)?;
    create_dir(out)?;
    let mut state = initial_state(cfg, &split.train)?;
    let labels: Vec<LabelSet> = split.train_labels.iter().map(|a| a.labels.clone()).collect();
    let epochs = m_step(&mut state, &split.train, &labels, &tcfg, 0)?;
    let mut metrics: Vec<String> = epochs.iter().map(|e| epoch_line("train", 0, e)).collect();
    let miou = if split.val.is_empty() { None } else { Some(miou_points(&evaluate(&state, &split.val)?)) };
    metrics.push(json!({"phase": "validation", "iteration": 0, "miou": miou}).to_string());
    let mut m = RunManifest::new("train", &cfg.hash(), &seeds);
    record_inputs(&mut m, inputs)?;
    m.write_artifact(out, MODEL_FILE, &save_model(&state)?)?;
    m.write_artifact(out, "metrics.jsonl", (metrics.join("\n") + "\n").as_bytes())?;
    let report = match miou {
        Some(v) => format!("train: {} epochs on {} scenes, validation mIoU {v:.2}", tcfg.epochs, split.train.len()),
        None => format!("train: {} epochs on {} scenes", tcfg.epochs, split.train.len()),
    };
    finish(out, m, report)
}

pub fn em(cfg: &RunConfig, inputs: &TrainInputs, out: &Path) -> Result<Outcome> {
    let tcfg = cfg.train()?;
    let method = cfg.method()?;
    let (seeds, mut split) = load_split(cfg, inputs)?;
    if split.val.is_empty() {
        return Err(CliError::Config("EM model selection needs a validation split (val_modulus > 0)".into()));
    }
    create_dir(out)?;
    let state = initial_state(cfg, &split.train)?;
    let labels: Vec<LabelSet> = split.train_labels.iter().map(|a| a.labels.clone()).collect();
    let (best, em, warm) = train_em(state, &split.train, &split.val, labels, &tcfg, &cfg.rectify(), method)?;
    let mut metrics: Vec<String> = warm.iter().map(|e| epoch_line("warmup", 0, e)).collect();
    metrics.push(json!({"phase": "validation", "iteration": 0, "miou": em.history[0]}).to_string());
    for (k, it) in em.iterations.iter().enumerate() {
        metrics.push(json!({"phase": "estep", "report": estep_json(&it.estep)}).to_string());
        metrics.extend(it.epochs.iter().map(|e| epoch_line("mstep", k + 1, e)));
        metrics.push(json!({"phase": "validation", "iteration": k + 1, "miou": it.miou}).to_string());
    }
    let mut m = RunManifest::new("em", &cfg.hash(), &seeds);
    record_inputs(&mut m, inputs)?;
    m.param("method", method);
    m.write_artifact(out, MODEL_FILE, &save_model(&best)?)?;
    m.write_artifact(out, "metrics.jsonl", (metrics.join("\n") + "\n").as_bytes())?;
    for (a, l) in split.train_labels.iter_mut().zip(em.labels) {
        a.labels = l;
    }
    for a in split.train_labels.iter().chain(&split.val_labels) {
        a.save(out, &mut m)?;
    }
    let history: Vec<String> = em.history.iter().map(|v| format!("{v:.2}")).collect();
    let report = format!(
        "em: {} iterations, validation mIoU history [{}], best iteration {}",
        em.iteration,
        history.join(", "),
        em.best
    );
    finish(out, m, report)
}

pub fn rectify(
    cfg: &RunConfig,
    inputs: &TrainInputs,
    model: &Path,
    method: PseudoMethod,
    iteration: usize,
    out: &Path,
) -> Result<Outcome> {
    let (seeds, mut split) = load_split(cfg, inputs)?;
    let state = load_model(model)?;
    create_dir(out)?;
    let mut labels: Vec<LabelSet> = split.train_labels.iter().map(|a| a.labels.clone()).collect();
    let (_, report) = e_step(&state, &split.train, &mut labels, &cfg.rectify(), method, iteration)?;
    let mut m = RunManifest::new("rectify", &cfg.hash(), &seeds);
    record_inputs(&mut m, inputs)?;
    m.param("method", method).param("iteration", iteration);
    let model_bytes = std::fs::read(if model.is_dir() { model.join(MODEL_FILE) } else { model.to_path_buf() })
        .map_err(crate::error::io_err(model))?;
    m.inputs.push(("model".into(), crate::manifest::sha256_hex(&model_bytes)));
    for (a, l) in split.train_labels.iter_mut().zip(labels) {
        a.labels = l;
    }
    for a in split.train_labels.iter().chain(&split.val_labels) {
        a.save(out, &mut m)?;
    }
    m.write_artifact(out, "estep.json", (estep_json(&report).to_string() + "\n").as_bytes())?;
    let text = format!(
        "rectify ({method}): {} candidates, {} accepted, {} added, error rate {}",
        report.candidates,
        report.accepted,
        report.added,
        report.error_rate.map_or("n/a".into(), |e| format!("{:.4}", e))
    );
    finish(out, m, text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    Training,
    All,
}

impl std::str::FromStr for EvalSplit {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(EvalSplit::Validation),
            "train" => Ok(EvalSplit::Training),
            "all" => Ok(EvalSplit::All),
            _ => Err(CliError::Config(format!("unknown split `{s}` (val, train, all)"))),
        }
    }
}

/// Text report plus one JSON record per class and a summary record.
pub fn eval_report(cm: &ConfusionMatrix, class_names: &[String]) -> (String, String) {
    let (iou, miou) = cm.miou();
    let mut text = String::new();
    let mut records = String::new();
    let _ = writeln!(text, "{:<12} {:>8} {:>10}", "class", "IoU", "points");
    for (k, v) in iou.iter().enumerate() {
        let name = class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
        let points: u64 = (0..cm.num_classes).map(|p| cm.get(k, p)).sum();
        let shown = v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let _ = writeln!(text, "{name:<12} {shown:>8} {points:>10}");
        let _ = writeln!(
            records,
            "{}",
            json!({"record": "class", "class": name, "index": k, "iou": v.map(|x| 100.0 * x), "points": points})
        );
    }
    let _ = writeln!(text, "mIoU {:.2}  accuracy {:.2}", 100.0 * miou, 100.0 * cm.accuracy());
    let _ = writeln!(
        records,
        "{}",
        json!({"record": "summary", "miou": 100.0 * miou, "accuracy": 100.0 * cm.accuracy(), "points": cm.total()})
    );
    (text, records)
}

pub fn eval(cfg: &RunConfig, scenes: &Path, model: &Path, split: EvalSplit, out: &Path) -> Result<Outcome> {
    let all = seeds_of(scenes)?;
    let seeds: Vec<u64> = all
        .into_iter()
        .filter(|&s| match split {
            EvalSplit::Validation => cfg.is_validation(s),
            EvalSplit::Training => !cfg.is_validation(s),
            EvalSplit::All => true,
        })
        .collect();
    if seeds.is_empty() {
        return Err(CliError::Config("the selected split has no scenes".into()));
    }
    let state = load_model(model)?;
    let data: Vec<SceneData> = load_scenes(scenes, None, None, &seeds)?.into_iter().map(|s| s.data).collect();
    let cm = evaluate(&state, &data)?;
    create_dir(out)?;
    let (text, records) = eval_report(&cm, &cfg.scene()?.class_names());
    let mut m = RunManifest::new("eval", &cfg.hash(), &seeds);
    m.input("scenes", scenes)?;
    let model_bytes = std::fs::read(if model.is_dir() { model.join(MODEL_FILE) } else { model.to_path_buf() })
        .map_err(crate::error::io_err(model))?;
    m.inputs.push(("model".into(), crate::manifest::sha256_hex(&model_bytes)));
    m.write_artifact(out, "report.txt", text.as_bytes())?;
    m.write_artifact(out, "eval.jsonl", records.as_bytes())?;
    finish(out, m, text.trim_end().to_string())
}
