//! Chance-constrained MPPI for skid-steer robots with GP residual dynamics.

pub mod costs;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod harness;
pub mod mppi;
pub mod terrain;
pub mod types;
pub mod uncertainty;

pub use error::{Error, Result};
