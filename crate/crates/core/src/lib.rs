//! Discrete-event simulator for diffusion serving with ControlNet and LoRA
//! add-ons, plus the supporting cache, workload and adapter-merge models.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod engine;
pub mod error;
pub mod merge;
pub mod model;
pub mod orchestrator;
pub mod scalar;
pub mod scenario;
pub mod store;
pub mod workload;

pub use analysis::{compare, fractions_from_profile, gustafson, Report};
pub use error::{Error, ErrorCategory, Result};
pub use model::{
    ClusterSpec, ControlNetId, LatencyBreakdown, LatencyProfile, LoraId, Request, Stage,
};
pub use orchestrator::{execute, Policy, PolicyKind, Simulator};
pub use scalar::Scalar;
pub use scenario::{run_scenario, Scenario};
pub use store::{AddonCatalog, LruCache};
pub use workload::{Trace, TraceSpec};

pub type Matrix32 = merge::Matrix<f32>;
pub type Matrix64 = merge::Matrix<f64>;
pub type Layer32 = merge::Layer<f32>;
pub type Layer64 = merge::Layer<f64>;
pub type LoraAdapter32 = merge::LoraAdapter<f32>;
pub type LoraAdapter64 = merge::LoraAdapter<f64>;
