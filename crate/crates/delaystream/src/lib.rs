//! Deterministic simulator and library for online continual learning under
//! label delay.
//!
//! A stream reveals one unlabeled batch per time step; the matching labels
//! arrive `d` steps later. Update policies — budgeted experience replay with
//! N/R/W batch composition, importance-weighted memory sampling,
//! pseudo-labeling with a momentum surrogate, and a test-time-adaptation
//! step on a throwaway clone — train under a fixed per-step backward-pass
//! budget, and the metrics quantify how much accuracy the delay costs and
//! how much of it each policy recovers.

pub mod buffer;
pub mod methods;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;
pub mod stream;
