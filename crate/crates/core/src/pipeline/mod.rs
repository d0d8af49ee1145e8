//! Desk-scale latent-video diffusion trainer hosting the region attention
//! block and the identity path.

pub mod ablate;
pub mod eval;
pub mod model;
pub mod schedule;
pub mod train;

pub use ablate::{ablate, AblationReport, Variant};
pub use eval::{evaluate, EvalReport};
pub use model::ToyDenoiser;
pub use schedule::{add_noise, NoiseSchedule};
pub use train::{train, train_from, MetricsReport, TrainOutcome, TrainState, Trainer};
