//! Multi-teacher knowledge distillation into a student encoder whose
//! feed-forward layers carry routed low-rank adapters, on a small
//! tape-based autodiff engine.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod mola;
pub mod nn;
pub mod optim;
pub mod params;
pub mod selftest;
pub mod teacher;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use config::{Stage, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
pub use trainer::{StepReport, Trainer};
