//! Whittle-index downlink scheduling: a tabular oracle for the single-queue
//! relaxed problem, a TTI-level simulator, a small index network trained by
//! REINFORCE, and index-based and classical schedulers.

pub mod oracle;
pub mod env;
pub mod net;
pub mod metrics;
pub mod trainer;
pub mod scheduler;
pub mod config;
