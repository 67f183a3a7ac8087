//! File formats, thread pool, end-to-end pipeline and command line around
//! [`fmuda_core`].

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod export;
pub mod manifest;
pub mod ndr;
pub mod pipeline;
pub mod report;
pub mod sched;

pub use error::{Error, Result};
pub use fmuda_core as core;
