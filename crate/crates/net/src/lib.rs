//! Toy two-view pointmap network: autodiff tape, model, training and
//! checkpoints.

pub mod checkpoint;
pub mod eval;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;

pub use model::{Modality, NetConfig, NetInput, ToyNet, Variant};
pub use params::ParameterStore;
pub use train::{train, train_step, TrainConfig};
