//! The toy dual-branch classifier, its losses, and the EM training loop.

pub mod dataset;
pub mod em;
pub mod features;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod mstep;
pub mod nn;
pub mod optim;

pub use dataset::SceneData;
pub use em::{e_step, em_loop, evaluate, train_em, validation_miou, EStepReport, EmIteration, EmState, PseudoMethod};
pub use model::{ClassifierState, ModelConfig};
pub use mstep::{fit_standardization, m_step, predict, predict_classes, Supervision, TrainConfig};
