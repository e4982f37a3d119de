//! Pipeline orchestration with a data-driven debugger.
pub mod debugger;
pub mod discovery;
pub mod engine;
pub mod filter;
pub mod host;
pub mod lineage;
pub mod metrics;
pub mod prep;
pub mod table;
pub mod util;
