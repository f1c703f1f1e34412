//! Artifact files inside output directories and the loaders that turn them back
//! into training data.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use weaklab_core::activelabel::{Clustering, LabelSet};
use weaklab_core::container::Container;
use weaklab_core::superpixel::SuperpixelMap;
use weaklab_core::synth::SceneFrame;
use weaklab_core::trainer::{ClassifierState, SceneData};

use crate::error::{io_err, CliError, Result};
use crate::manifest::RunManifest;

pub const MODEL_FILE: &str = "model.wlb";

pub fn scene_file(seed: u64) -> String {
    format!("scene_{seed:04}.wlb")
}

pub fn labels_file(seed: u64) -> String {
    format!("labels_{seed:04}.wlb")
}

pub fn labels_text_file(seed: u64) -> String {
    format!("labels_{seed:04}.txt")
}

pub fn superpixel_file(seed: u64) -> String {
    format!("superpixels_{seed:04}.wlb")
}

fn read_container(path: &Path) -> Result<Container> {
    if !path.exists() {
        return Err(CliError::Artifact(format!("missing artifact {}", path.display())));
    }
    Ok(Container::read(path)?)
}

/// Seeds of a directory, taken from its manifest.
pub fn seeds_of(dir: &Path) -> Result<Vec<u64>> {
    Ok(RunManifest::read(dir)?.seeds)
}

pub fn load_frame(dir: &Path, seed: u64) -> Result<SceneFrame> {
    let frame = SceneFrame::from_container(&read_container(&dir.join(scene_file(seed)))?)?;
    if frame.seed != seed {
        return Err(CliError::Artifact(format!("{} holds seed {}", scene_file(seed), frame.seed)));
    }
    Ok(frame)
}

/// Labels of one scene plus the annotation units they were derived from.
/// Indices refer to the camera-subset points (`subset[i]` is the frame index).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelArtifact {
    pub seed: u64,
    pub full_size: usize,
    pub subset: Vec<usize>,
    pub ground: Vec<bool>,
    pub units: Clustering,
    pub labels: LabelSet,
    pub class_names: Vec<String>,
}

impl LabelArtifact {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push_text("kind", "labels")?;
        c.push_i64("seed", &[1], vec![self.seed as i64])?;
        c.push_i64("full_size", &[1], vec![self.full_size as i64])?;
        c.push_i64("subset", &[self.subset.len()], self.subset.iter().map(|&i| i as i64).collect())?;
        c.push_u8("ground", &[self.ground.len()], self.ground.iter().map(|&g| g as u8).collect())?;
        c.push_i64("units.cluster_id", &[self.units.cluster_id.len()], self.units.cluster_id.clone())?;
        c.push_i64("units.num_clusters", &[1], vec![self.units.num_clusters as i64])?;
        c.push_text("class_names", &self.class_names.join("\n"))?;
        self.labels.write_sections(&mut c, "labels.")?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: &str| CliError::Artifact(format!("label artifact: {m}"));
        if c.text("kind")? != "labels" {
            return Err(bad("wrong kind"));
        }
        let scalar = |name: &str| -> Result<i64> { c.i64(name)?.1.first().copied().ok_or_else(|| bad(name)) };
        let units = Clustering {
            cluster_id: c.i64("units.cluster_id")?.1.to_vec(),
            num_clusters: scalar("units.num_clusters")? as usize,
        };
        units.validate()?;
        let a = Self {
            seed: scalar("seed")? as u64,
            full_size: scalar("full_size")? as usize,
            subset: c.i64("subset")?.1.iter().map(|&i| i as usize).collect(),
            ground: c.u8("ground")?.1.iter().map(|&g| g != 0).collect(),
            units,
            labels: LabelSet::read_sections(c, "labels.")?,
            class_names: c.text("class_names")?.lines().map(String::from).collect(),
        };
        let n = a.subset.len();
        if a.ground.len() != n || a.units.cluster_id.len() != n || a.labels.num_points != n {
            return Err(bad("section lengths disagree"));
        }
        Ok(a)
    }

    pub fn load(dir: &Path, seed: u64) -> Result<Self> {
        let a = Self::from_container(&read_container(&dir.join(labels_file(seed)))?)?;
        if a.seed != seed {
            return Err(CliError::Artifact(format!("{} holds seed {}", labels_file(seed), a.seed)));
        }
        Ok(a)
    }

    /// Writes the binary artifact and its line-oriented text export.
    pub fn save(&self, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
        manifest.write_artifact(dir, &labels_file(self.seed), &self.to_container()?.to_bytes())?;
        manifest.write_artifact(dir, &labels_text_file(self.seed), self.labels.to_text().as_bytes())
    }
}

pub fn load_superpixels(dir: &Path, frame: &SceneFrame) -> Result<Vec<SuperpixelMap>> {
    let c = read_container(&dir.join(superpixel_file(frame.seed)))?;
    frame
        .images
        .iter()
        .enumerate()
        .map(|(k, im)| Ok(SuperpixelMap::read_sections(&c, &format!("camera{k}."), im)?))
        .collect()
}

pub fn save_model(state: &ClassifierState) -> Result<Vec<u8>> {
    let mut c = Container::new();
    c.push_text("kind", "model")?;
    state.write_sections(&mut c)?;
    Ok(c.to_bytes())
}

pub fn load_model(path: &Path) -> Result<ClassifierState> {
    let path: PathBuf = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    let c = read_container(&path)?;
    if c.text("kind")? != "model" {
        return Err(CliError::Artifact(format!("{} is not a model checkpoint", path.display())));
    }
    Ok(ClassifierState::read_sections(&c)?)
}

/// One scene ready for training or evaluation.
pub struct LoadedScene {
    pub data: SceneData,
    pub labels: Option<LabelArtifact>,
}

/// Loads `seeds` from the scene directory, with labels and superpixels when the
/// directories are given. Label subsets must match the camera subset.
pub fn load_scenes(
    scenes: &Path,
    labels: Option<&Path>,
    superpixels: Option<&Path>,
    seeds: &[u64],
) -> Result<Vec<LoadedScene>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let frame = load_frame(scenes, seed)?;
            let maps = superpixels.map(|d| load_superpixels(d, &frame)).transpose()?;
            let data = SceneData::build(&frame, maps.as_deref())?;
            let labels = labels.map(|d| LabelArtifact::load(d, seed)).transpose()?;
            if let Some(l) = &labels {
                if l.subset != data.subset {
                    return Err(CliError::Artifact(format!("labels of seed {seed} do not match its scene")));
                }
            }
            Ok(LoadedScene { data, labels })
        })
        .collect()
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}
