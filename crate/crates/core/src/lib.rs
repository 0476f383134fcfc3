//! Self-learning-teacher knowledge distillation (SLKD) on small MLPs.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a define-by-run gradient tape and a
//!   central-difference gradient oracle.
//! - [`model`]: MLP teachers, students and self-learning teachers.
//! - [`losses`]: cross-entropy, temperature-softened KL, the composite
//!   distillation objectives and logit fusion.
//! - [`data`]: seeded synthetic tasks and a tabular loader.
//! - [`trajectory`]: per-epoch divergence and accuracy records.
//! - [`training`]: SGD and every training mode (scratch, KD, parallel and
//!   sequential SLKD, SL-T-only, single SL-T).
//! - [`gradcheck`]: the finite-difference verification suite.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod trajectory;

pub use data::{Batch, Dataset, Split, TaskData};
pub use error::{Error, Result};
pub use losses::{DistillConfig, Mode};
pub use model::{Model, ModelSpec};
pub use tensor::{Gradients, OpKind, Tape, Tensor, Var};
pub use training::{Schedule, SessionResult};
pub use trajectory::{TrajectoryLog, TrajectoryRecord};
