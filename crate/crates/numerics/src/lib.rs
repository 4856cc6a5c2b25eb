//! Tensor primitives with a reverse-mode gradient tape, an AdamW optimizer and
//! a finite-difference gradient checker.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{check_params, check_params_except, DEFAULT_STEP, finite_diff_check, relative_error, GradCheckReport};
pub use optim::{adamw_step, adamw_step_store, AdamWConfig, OptimizerState};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
