//! Dual-domain low-dose CT metal artifact reduction.

pub mod dualdomain;
pub mod error;
pub mod frames;
pub mod io;
pub mod msfum;
pub mod physics;
pub mod pmsrnet;
pub mod psatg;
pub mod training;

pub use error::{CoreError, Result};
