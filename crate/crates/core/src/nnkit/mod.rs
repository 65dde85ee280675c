//! Small reverse-mode autodiff toolkit over f64 matrices.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod store;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use store::{Init, NamedArray, ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("tape already consumed by backward")]
    TapeFinished,
    #[error("variable belongs to another tape")]
    ForeignVar,
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("non-finite values in '{0}'")]
    NonFinite(String),
    #[error("{0}")]
    Data(String),
}
