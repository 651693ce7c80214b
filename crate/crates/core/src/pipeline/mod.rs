//! Model assembly, training and ablations.

pub mod ablation;
pub mod config;
pub mod model;
pub mod train;

pub use ablation::{run_ablation, AblationRow};
pub use config::{ModelConfig, OptimConfig, Variant};
pub use model::{EncoderOutput, ForwardOutput, Model, PairInput};
pub use train::{clip_global_norm, smoothed_endpoints, toy_dataset, train_toy, AdamW, TrainReport};
