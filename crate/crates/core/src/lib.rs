//! Zonal electricity market clearing, bidding equilibria and multi-agent
//! learning of bid ladders.

pub mod clearing;
pub mod equilibrium;
pub mod error;
pub mod market;
pub mod marl;
pub mod metrics;
pub mod scenario;
pub mod simplex;

pub use error::{Error, Result};
