//! Network assembly, stage planning, cost accounting and checkpoints.

mod checkpoint;
mod config;
mod net;
mod plan;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest, TensorEntry};
pub use config::{MlppSettings, PhnetConfig};
pub use net::{DecoderStage, EncoderStage, PhNet};
pub use plan::{cumulative_strides, plan_stages, planar_stage_count, StageMode, StagePlan};
