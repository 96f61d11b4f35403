//! Experiment orchestration: configs, scenario construction, sweeps and
//! reports.

mod config;
mod report;
mod sweep;
pub mod theory;
mod tta;
mod world;

pub use config::*;
pub use report::*;
pub use sweep::*;
pub use tta::*;
pub use world::*;
