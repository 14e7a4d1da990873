//! Dense tensors, the computation record, attention, finite differences and AdamW.

mod attention;
mod fd;
mod optim;
mod params;
mod real;
mod record;
mod tensor;

pub use attention::{attend, multi_head_attend, softmax, AttentionParams, KeySets};
pub use fd::{finite_difference_gradient, max_relative_error, DEFAULT_FD_EPS};
pub use optim::{adamw_step, AdamW, OptimizerState};
pub use params::ParamStore;
pub use real::Real;
pub use record::{AttentionTrace, ComputationRecord, RecordEntry, RowMix, Var};
pub use tensor::Tensor;
