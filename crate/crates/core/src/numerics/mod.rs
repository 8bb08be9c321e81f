//! Tensor math substrate: dense `f64` tensors, a reverse-mode tape,
//! the Adam optimizer, learning-rate schedules and gradient checking.

mod adam;
pub mod gradcheck;
mod schedule;
pub(crate) mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use schedule::LrSchedule;
pub use tape::{zscore_normalize, Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::softmax_rows;
