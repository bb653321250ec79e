//! Optimization, training, sliding-window evaluation and benchmarking.

mod bench;
mod eval;
mod gradcheck;
mod infer;
mod optim;
mod train;

pub use bench::{bench, mixer_scaling, peak_resident_bytes, BenchReport, MixerScaling};
pub use eval::{evaluate_cases, evaluate_checkpoint, mean_foreground_dice, EvalSettings};
pub use gradcheck::{network_grad_check, tiny_gradcheck_config, GradCheckReport};
pub use infer::{argmax_labels, segment, sliding_window_logits, stitch, volume_tensor, window_grid, window_starts};
pub use optim::{adamw_scalar, lr_for_batch, AdamW, AdamWConfig};
pub use train::{batch_tensor, prepare_case, train, LogRecord, PreparedCase, TrainConfig, TrainOutcome, Trainer};
