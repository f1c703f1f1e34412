//! Run configuration: a flat `key = value` file (TOML syntax). Every key is
//! optional; omitted keys take the library defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use weaklab_core::activelabel::{ActiveLabelConfig, HdbscanConfig, PillarConfig, RansacConfig};
use weaklab_core::assoc::AssocConfig;
use weaklab_core::rectify::RectifyConfig;
use weaklab_core::superpixel::SeedsConfig;
use weaklab_core::synth::SceneConfig;
use weaklab_core::trainer::{ModelConfig, PseudoMethod, Supervision, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Default seed range for `synth` and `bench`, e.g. `"1..62"` (inclusive).
    pub seeds: Option<String>,
    /// Scenes whose seed is a multiple of this form the validation split; 0 disables it.
    pub val_modulus: u64,

    // scene generation
    pub noise_sigma: f64,
    pub max_tilt_deg: f64,
    pub num_cameras: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub texture_noise: f64,
    pub color_jitter: f64,
    pub intensity_noise: f64,
    pub min_gap: f64,
    pub ground_points: usize,
    /// Per-class object counts by class name.
    pub counts: BTreeMap<String, usize>,

    // active labeling
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub ransac_iterations: usize,
    pub ransac_threshold: f64,
    pub ransac_seed: u64,

    // superpixels
    pub superpixels: usize,
    pub seeds_levels: usize,
    pub seeds_iterations: usize,

    // model and training
    pub hidden: usize,
    pub dim: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_scenes: usize,
    pub epochs: usize,
    pub seg_weight: f64,
    pub assoc_weight: f64,
    pub beta_walker: f64,
    pub beta_visit: f64,
    pub projection_dim: usize,
    pub lovasz: bool,
    pub augment: bool,
    pub max_assoc_points: usize,
    pub max_rows: usize,
    pub use_propagated: bool,
    pub use_negative: bool,
    pub use_pseudo: bool,
    pub em_max_iterations: usize,
    pub em_min_iterations: usize,
    pub em_tolerance: f64,
    pub train_seed: u64,

    // E-step
    pub delta: f64,
    pub alpha: f64,
    pub pseudo_method: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SceneConfig::default();
        let a = ActiveLabelConfig::default();
        let sp = SeedsConfig::default();
        let t = TrainConfig::default();
        let m = ModelConfig::new(s.num_classes());
        let r = RectifyConfig::default();
        Self {
            seeds: None,
            val_modulus: 5,
            noise_sigma: s.noise_sigma,
            max_tilt_deg: s.max_tilt_deg,
            num_cameras: s.num_cameras,
            image_width: s.image_width,
            image_height: s.image_height,
            texture_noise: s.texture_noise,
            color_jitter: s.color_jitter,
            intensity_noise: s.intensity_noise,
            min_gap: s.min_gap,
            ground_points: s.ground_points,
            counts: BTreeMap::new(),
            min_cluster_size: a.hdbscan.min_cluster_size,
            min_samples: a.hdbscan.min_samples,
            ransac_iterations: a.ransac.iterations,
            ransac_threshold: a.ransac.inlier_threshold,
            ransac_seed: a.ransac.seed,
            superpixels: sp.num_superpixels,
            seeds_levels: sp.num_levels,
            seeds_iterations: sp.iterations,
            hidden: m.hidden,
            dim: m.dim,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_scenes: t.batch_scenes,
            epochs: t.epochs,
            seg_weight: t.seg_weight,
            assoc_weight: t.assoc_weight,
            beta_walker: t.assoc.beta_w,
            beta_visit: t.assoc.beta_v,
            projection_dim: m.projection_dim,
            lovasz: t.lovasz,
            augment: t.augment,
            max_assoc_points: t.max_assoc_points,
            max_rows: t.max_rows,
            use_propagated: t.supervision.propagated,
            use_negative: t.supervision.negative,
            use_pseudo: t.supervision.pseudo,
            em_max_iterations: t.em_max_iterations,
            em_min_iterations: t.em_min_iterations,
            em_tolerance: t.tolerance,
            train_seed: t.seed,
            delta: r.delta,
            alpha: r.alpha,
            pseudo_method: "act-fsf".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks every derived library config; any failure is a config error.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            CliError::Core(inner) => CliError::Config(inner.to_string()),
            other => other,
        })
    }

    fn check(&self) -> Result<()> {
        let scene = self.scene()?;
        scene.validate()?;
        let al = self.active_label();
        al.pillars.validate()?;
        al.ransac.validate()?;
        al.hdbscan.validate()?;
        self.train()?.validate()?;
        self.model(scene.num_classes()).validate()?;
        self.rectify().validate()?;
        self.method()?;
        if self.superpixels == 0 {
            return Err(CliError::Config("superpixels must be positive".into()));
        }
        if let Some(s) = &self.seeds {
            parse_seeds(s)?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical (JSON) form of the parsed configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn scene(&self) -> Result<SceneConfig> {
        let mut s = SceneConfig {
            noise_sigma: self.noise_sigma,
            max_tilt_deg: self.max_tilt_deg,
            num_cameras: self.num_cameras,
            image_width: self.image_width,
            image_height: self.image_height,
            texture_noise: self.texture_noise,
            color_jitter: self.color_jitter,
            intensity_noise: self.intensity_noise,
            min_gap: self.min_gap,
            ground_points: self.ground_points,
            ..SceneConfig::default()
        };
        for (name, &count) in &self.counts {
            let k = s.class_index(name).ok_or_else(|| CliError::Config(format!("unknown class `{name}` in counts")))?;
            if k == 0 {
                return Err(CliError::Config("the ground has no object count".into()));
            }
            s.classes[k].count = count;
        }
        Ok(s)
    }

    pub fn active_label(&self) -> ActiveLabelConfig {
        ActiveLabelConfig {
            pillars: PillarConfig::default(),
            ransac: RansacConfig {
                iterations: self.ransac_iterations,
                inlier_threshold: self.ransac_threshold,
                seed: self.ransac_seed,
                ..RansacConfig::default()
            },
            hdbscan: HdbscanConfig { min_cluster_size: self.min_cluster_size, min_samples: self.min_samples },
        }
    }

    pub fn seeds_config(&self) -> SeedsConfig {
        SeedsConfig {
            num_superpixels: self.superpixels,
            num_levels: self.seeds_levels,
            iterations: self.seeds_iterations,
        }
    }

    pub fn model(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            dim: self.dim,
            projection_dim: self.projection_dim,
            ..ModelConfig::new(num_classes)
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_scenes: self.batch_scenes,
            epochs: self.epochs,
            seg_weight: self.seg_weight,
            assoc_weight: self.assoc_weight,
            assoc: AssocConfig {
                beta_w: self.beta_walker,
                beta_v: self.beta_visit,
                projection_dim: self.projection_dim,
            },
            lovasz: self.lovasz,
            augment: self.augment,
            max_assoc_points: self.max_assoc_points,
            max_rows: self.max_rows,
            supervision: Supervision {
                propagated: self.use_propagated,
                negative: self.use_negative,
                pseudo: self.use_pseudo,
                ..Supervision::default()
            },
            em_max_iterations: self.em_max_iterations,
            em_min_iterations: self.em_min_iterations,
            tolerance: self.em_tolerance,
            seed: self.train_seed,
        };
        Ok(t)
    }

    pub fn rectify(&self) -> RectifyConfig {
        RectifyConfig { delta: self.delta, alpha: self.alpha }
    }

    pub fn method(&self) -> Result<PseudoMethod> {
        self.pseudo_method.parse().map_err(CliError::Core)
    }

    pub fn is_validation(&self, seed: u64) -> bool {
        self.val_modulus != 0 && seed.is_multiple_of(self.val_modulus)
    }
}

/// `a..b` and `a..=b` are both inclusive ranges; a comma list is taken as is.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || CliError::Config(format!("bad seed list `{s}` (expected a..b or a,b,c)"));
    let s = s.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() || sorted.len() != seeds.len() {
        return Err(bad());
    }
    Ok(sorted)
}
