//! Acceleration generative model: a phase-space stochastic bridge whose
//! learned force field carries a prior sample `(x, v)` onto the data.

pub mod bridge;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernel;
pub mod model;
pub mod quadrature;
pub mod samplers;

pub use bridge::{PhaseBatch, PhaseState, TrainingBatch};
pub use datasets::{DatasetKind, ToyDataset};
pub use error::{AgmError, ErrorClass, Result};
pub use eval::{EvalReport, MomentAudit};
pub use kernel::{DiffusionSchedule, KernelPoint, KernelTable, Mode, Sigma0, TimeGrid};
pub use model::{ForceNet, TrainConfig, TrainState};
pub use samplers::{ExactForce, ForceField, MixtureForce, SampleOutput, SamplerPlan, TrajectoryRecord};
