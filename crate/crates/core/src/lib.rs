//! Core data model of `fpm`, a small purely functional package manager.
//!
//! Everything in this crate is pure computation over in-memory values and
//! only needs an allocator: store path naming, the base32 digest encoding,
//! the s-expression reader and printer shared by derivation files and the
//! build language, the canonical derivation format, dependency-graph
//! algorithms, reference scanning and the profile manifest format.
//!
//! File-system access, process execution and the command line live in the
//! `fpm` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod base32;
pub mod derivation;
pub mod graph;
pub mod manifest;
pub mod scan;
pub mod sexpr;
pub mod store_path;
pub mod version;

pub use derivation::{Builder, BuiltinTag, Derivation, DerivationError, DerivationInput};
pub use sexpr::{Node, NodeKind, ParseError, Pos, SExpr};
pub use store_path::{PathTag, StorePath, StorePathError};
