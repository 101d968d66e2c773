//! A small purely functional package manager.
//!
//! Packages are built by derivations into an immutable store whose paths
//! are named after the hash of everything that went into them. Users see
//! packages through profiles, symlink trees that are switched atomically
//! from one generation to the next, and unreachable store paths are
//! reclaimed by a garbage collector.

pub use fpm_core as core;

pub mod build_systems;
pub mod buildlang;
pub mod cli;
mod drv;
pub mod engine;
pub mod error;
pub mod fsutil;
pub mod gc;
pub mod packages;
pub mod profiles;
pub mod store;

pub use error::{Error, Result};
