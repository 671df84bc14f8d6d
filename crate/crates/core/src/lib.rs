//! Two-tier workflow middleware for urgent HPC workloads.
//!
//! The marshalling tier ([`engine`], [`simulation`], [`data`]) drives
//! incident lifecycles as message-triggered workflow stages and submits jobs
//! to machines in two phases (create, then submit). The machine tier
//! ([`runner`]) concretises a generic workflow skeleton with scenario and
//! machine parameter files and packs scattered ensemble members onto nodes.
//! [`testbed`] is a discrete-event batch system standing in for a real HPC
//! machine, and [`bench`] reproduces the ensemble scheduling experiments on
//! top of it.

pub mod bench;
pub mod data;
pub mod engine;
pub mod ids;
pub mod machine;
pub mod platform;
pub mod runner;
pub mod simulation;
pub mod syntax;
pub mod testbed;
pub mod walltime;

pub use ids::{DataId, IncidentId, JobId, MessageId, SimId};
