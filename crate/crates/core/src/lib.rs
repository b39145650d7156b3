//! Analytical mapping cost model, inverted-bottleneck fusion planner and a
//! cycle-approximate, bit-exact simulator for a 16x16 reconfigurable PE array
//! accelerator targeting hybrid vision transformers.
//!
//! The crate is `no_std` (with `alloc`); file formats, reports and the CLI
//! live in the `hyvit` companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod arch;
pub mod cost;
pub mod error;
pub mod fusion;
pub mod golden;
pub mod mapping;
pub mod math;
pub mod sim;
pub mod workload;

pub use arch::{ArchConfig, EnergyTable, Level};

pub use cost::{CostBreakdown, Objective};
pub use error::{Error, Result};
pub use mapping::{Dataflow, LayerMapping, SpatialMapping, TemporalMapping};

pub use workload::{Dim, Dims, LayerKind, LayerSpec, NetworkGraph, PostOp};
