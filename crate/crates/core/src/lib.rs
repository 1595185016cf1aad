//! Simulation and real-time characterization of gated-mode single-photon
//! detectors from the statistics of gate counts between consecutive
//! detections.
//!
//! The pipeline is `simulate` (or a recorded event file) → `intervals` →
//! `fit`, with `model` providing the analytic interval distribution and
//! `cli` the command-line surface, file formats and monitoring loop.

pub mod cli;
pub mod fit;
pub mod intervals;
pub mod model;
pub mod simulate;
