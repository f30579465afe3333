//! Gated networks: layer layouts, templates, the masked forward pass, the
//! joint weight/gate training step, and the checkpoint format.

mod checkpoint;
mod layout;
mod model;
mod template;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use layout::{count_params, gate_bounds, ArchSpec, LayerSpec};
pub use model::{accuracy, predict_classes, GatedLayer, LossKind, ModelOptions, PlasticModel};
pub use template::Template;
pub use train::{l0_objective, penalty, train_step, StepConfig, StepStats};
