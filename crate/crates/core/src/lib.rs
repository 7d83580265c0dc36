//! Plant simulation, system identification and cascaded control for a
//! grid-tied battery microgrid.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below pin the common instantiations.

pub mod control;
pub mod error;
pub mod lti;
pub mod model_file;
pub mod plant;
pub mod scalar;
pub mod sysid;

pub use error::{CoreError, Result};
pub use scalar::Scalar;

pub type LtiModelF64 = lti::LtiModel<f64>;
pub type LtiModelF32 = lti::LtiModel<f32>;
pub type PlantF64 = plant::Plant<f64>;
pub type PlantF32 = plant::Plant<f32>;
pub type ControllerF64 = control::Controller<f64>;
pub type ControllerF32 = control::Controller<f32>;
pub type ControllerConfigF64 = control::ControllerConfig<f64>;
pub type ControllerConfigF32 = control::ControllerConfig<f32>;
pub type DemandProfileF64 = plant::DemandProfile<f64>;
