//! Trainable maps and gradient machinery.

pub mod checkpoint;
pub mod ctx;
pub mod gradcheck;
pub mod models;
pub mod params;
pub mod tape;

pub use checkpoint::{Model, ModelMeta, StartMode, TrainStage};
pub use ctx::SampleCtx;
pub use gradcheck::{grad_check, GradCheckReport};
pub use models::{timestep_embedding, Networks, Topology};
pub use params::{Adam, ParamSource, ParamStore, PerturbedParams};
pub use tape::{Gradients, NodeId, Tape};
