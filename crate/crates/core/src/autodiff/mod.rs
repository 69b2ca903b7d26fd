//! Minimal reverse-mode automatic differentiation: a value-type [`Tensor`],
//! an eager tape ([`Graph`]), Adam, and learning-rate schedules.

pub mod gradcheck;
mod graph;
mod optim;
mod schedule;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_update, AdamConfig, AdamState};
pub use schedule::{LrSchedule, ScheduleKind};
pub use tensor::{cosine_sim, Param, ParamId, ParamStore, Tensor};

