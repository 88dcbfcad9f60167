//! Minimal dense-tensor math with reverse-mode automatic differentiation,
//! stacked LSTM cells, dropout, Adam, checkpoints, and a finite-difference
//! gradient-check harness.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod lstm;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{clip_global_norm, AdamState};
pub use error::{NumError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use lstm::{lstm_forward, lstm_param_shapes, lstm_step, LstmLayer, LstmState, LstmVars};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
