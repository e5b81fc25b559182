//! Perceptual-error feedback for radiology reading.
//!
//! A teacher's and a student's gaze sessions are aligned with their dictated
//! reports into thought graphs ([`graph`]). Findings the student missed drive
//! an error-complexity score that decides how many analysis agents to recruit
//! ([`complexity`]); the agents compare gaze evidence and their verdicts are
//! consolidated into a feedback report ([`agents`]). Model calls go through
//! [`gateway`]. [`synth`] builds simulated student cases from expert readings,
//! [`dataset`] reads and writes them, [`pipeline`] analyzes them in batches, and
//! [`eval`] scores predictions.

pub mod agents;
pub mod complexity;
pub mod dataset;
pub mod eval;
pub mod gateway;
pub mod gaze;
pub mod graph;
pub mod pipeline;
pub mod synth;
