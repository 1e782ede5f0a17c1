//! Dense matrices with tape-based reverse-mode gradients.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{finite_difference_check, GradCheckReport, DEFAULT_EPS};
pub use matrix::Matrix;
pub use params::{ParamGrads, ParamId, ParamSet, ParamVars};
pub use tape::{sigmoid, Grads, Tape, Var, PROB_CLAMP};
