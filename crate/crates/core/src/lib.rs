//! Joint beamforming and discrete movable-antenna positioning for multiuser
//! MISO downlink power minimization.
//!
//! The crate is organised bottom-up: [`channel`] draws grids and field-response
//! channels, [`model`] turns them into solvable instances and independent
//! oracles, [`conic`] is the convex engine, [`perfect`] and [`robust`] build the
//! relaxations and subproblems, [`bnb`] is the global search, [`baselines`]
//! holds the reference schemes and [`harness`] the Monte Carlo driver.

pub mod baselines;
pub mod bnb;
pub mod channel;
pub mod conic;
pub mod error;
pub mod harness;
pub mod model;
pub mod perfect;
pub mod robust;

pub use error::{Error, Result};
