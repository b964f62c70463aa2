//! Episodic-memory actor-critic with implicit planning over stored
//! trajectories, plus the tabular and Monte Carlo labs used to check it.

pub mod agent;
pub mod approx;
pub mod backup;
pub mod biaslab;
pub mod env;
pub mod harness;
pub mod memory;
pub mod stats;
pub mod tabular;

pub use agent::{AblationKind, GemAgent, HyperParams, Variant};
pub use backup::{backup_single, backup_twin, BackupError, Horizon, TwinEstimates};
pub use env::{ContinuousEnv, EnvId, Environment, FiniteEnv, FiniteMdp, PointMass, QTable, TerminationKind};
pub use harness::{ExperimentConfig, ExperimentKind, HarnessError};
pub use memory::EpisodicMemory;
