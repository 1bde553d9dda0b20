//! Dense-tensor engine with reverse-mode autodiff, attention primitives,
//! losses, and momentum SGD. Everything the decoder needs, small enough to
//! verify against finite differences.

mod autodiff;
pub mod check;
mod layers;
mod ops;
mod optim;
mod param;
mod tensor;

pub use autodiff::{backward, Gradients};
pub use check::{central_diff, max_rel_err, rel_err};
pub use layers::{scaled_dot_attention, AttnOutput, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use ops::{concat_cols, concat_rows, cross_entropy};
pub use optim::{Sgd, SgdConfig};
pub use param::Parameter;
pub use tensor::{precision, set_precision, Precision, Tensor};
