//! Parameter-server testbed for studying straggler mitigation.
//!
//! Workers run iterative ML workloads against a sharded parameter table
//! under BSP or SSP consistency. Stragglers are injected on purpose and
//! mitigated by peer work shedding or speculative cloning; per-iteration
//! compute, communicate and wait times are recorded for comparison.

pub mod bench;
pub mod consistency;
pub mod error;
pub mod injector;
pub mod mitigation;
pub mod paramserver;
pub mod runner;
pub mod workloads;

pub use error::{Error, Result};
