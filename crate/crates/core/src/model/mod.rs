//! The few-shot localization network and its training machinery.

pub mod checkpoint;
pub mod config;
pub mod net;
pub mod optim;
pub mod params;
pub mod train;

pub use config::{Ablation, BackboneConfig, ModelConfig, ShapePlan, SqResidual, StageSpec};
pub use net::{crop_support, self_query, similarity_forward, BBox, Branches, EpisodeFeatures, Fsol, Trace};
pub use optim::{Adam, AdamConfig, StepDecay};
pub use params::{Bound, ParamId, ParamStore};
pub use train::{evaluate, fit, predict_episode, train_step, EpochLog, Prediction, TrainConfig, TrainOutcome};
