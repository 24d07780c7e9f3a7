//! Toy networks: the attacked classifier, the noise-prediction network of
//! the diffusion model, and the purifier, plus their training loops.

pub mod classifier;
pub mod params;
pub mod purifier;
pub mod score;
pub mod train;

pub use classifier::{Classifier, ClassifierArch};
pub use params::ParamSet;
pub use purifier::Purifier;
pub use score::ScoreModel;
pub use train::{fit, train_classifier, train_score_model, TrainConfig, TrainCurve};
