//! Cascaded power and SoC control.

pub mod controller;
pub mod decouple;
pub mod pid;
pub mod reference;
pub mod soc;

pub use controller::{
    Controller, ControllerConfig, InverterCommand, LoopTuning, Measurements, SocTuning, TickFlags, TickReport,
    TickStatus,
};
pub use reference::Mode;
