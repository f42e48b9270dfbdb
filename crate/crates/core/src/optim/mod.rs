//! Inner optimizer (AdamW, clipping, cosine schedule) and outer aggregation.

mod adamw;
mod outer;
mod schedule;

pub use adamw::{adamw_step, clip_grad_norm, clip_tensors, AdamWConfig, AdamWState};
pub use outer::{compute_body_delta, compute_delta, outer_apply, DeltaSet, RowDelta, TensorDelta};
pub use schedule::CosineSchedule;
