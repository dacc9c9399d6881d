//! Cone-beam micro-CT toolkit: sensor-degradation simulation, adaptive frame
//! averaging, time-interpolated flat-field correction, tilt alignment and
//! FDK reconstruction.

pub mod align;
pub mod config;
pub mod error;
pub mod geometry;
pub mod imgops;
pub mod io;
pub mod pipeline;
pub mod preprocess;
pub mod recon;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
pub use imgops::Image;
