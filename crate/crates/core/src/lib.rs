//! Full-wave simulation of wireless links inside chip packages.
//!
//! A package scenario is meshed onto a graded Yee grid, solved in the time
//! domain with lumped ports at every antenna, and reduced to scattering
//! parameters, channel metrics and path-loss fits.

pub mod channel;
pub mod fdtd;
pub mod geometry;
pub mod mesh;
pub mod pipeline;
pub mod ports;
pub mod reference;
pub mod scenario_file;
pub mod sweep;
pub mod units;
