//! Dense tensors, a reverse-mode tape, parameters and plain SGD.

mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_report, GradCheckReport, MIN_SAMPLES_PER_PARAM};
pub use params::{sgd_step, ParamId, Parameter, Parameters};
pub use rng::{stream_rng, Rng, Stream};
pub use tape::{log_softmax, log_softmax_at, Mode, Tape, Var};
pub use tensor::Tensor;
