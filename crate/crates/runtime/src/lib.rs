//! Simulator and controller runtime for the microgrid testbed.
//!
//! [`node`] holds the transport-free endpoints, [`lockstep`] runs them
//! deterministically in one thread, and [`services`] puts them on TCP with
//! a realtime clock. [`bridge`] is the operator console interface.

pub mod bridge;
pub mod clock;
pub mod delay;
pub mod error;
pub mod lockstep;
pub mod node;
pub mod record;
pub mod services;

pub use error::{Result, RuntimeError};
pub use lockstep::{run_lockstep, LockstepSummary, ScheduledCommand};
pub use node::{CtlConfig, CtlNode, SimConfig, SimNode};
