//! Small fully connected networks with hand-written backpropagation, Adam,
//! and the actor/critic wrappers used by the continuous agent.

mod adam;
mod io;
mod mlp;
mod nets;

pub use adam::Adam;
pub use io::{load_params, save_params, PARAM_MAGIC};
pub use mlp::{polyak_update, Mlp, OutputActivation, Tape};
pub use nets::{dpg_actor_gradient, dpg_with, Actor, ActorObjective, TwinCritic, CRITIC_MEMBERS};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid layer sizes {0:?}")]
    Architecture(Vec<usize>),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("input has dimension {got}, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {loss} at sample {sample} (network output {output:?})")]
    NonFiniteLoss {
        sample: usize,
        loss: f64,
        output: Vec<f64>,
    },
    #[error("network shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("polyak rate must lie in (0, 1], got {0}")]
    Tau(f64),
    #[error("parameter file: {0}")]
    Format(String),
}
