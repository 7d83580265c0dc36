//! Wire formats between the plant simulator and the controller.
//!
//! * [`c37`]: a fixed-layout subset of IEEE C37.118 data frames plus a
//!   small command frame, one PMU per `idcode`.
//! * [`modbus`]: Modbus TCP (function codes 0x03 and 0x10) and the register
//!   bank holding SoC, PV and the inverter references.
//!
//! All codecs are pure functions over byte slices; none of them panic on
//! malformed input.

pub mod c37;
pub mod crc;
pub mod error;
pub mod modbus;

pub use error::{ProtoError, Result};
