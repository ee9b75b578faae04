//! Filtering and calibration of a hidden Markov factor driving credit rating
//! migrations.
//!
//! The hidden factor is a finite-state Markov chain; conditional on its state,
//! rating migrations follow a per-state transition matrix (discrete time) or
//! intensity matrix (continuous time). Only aggregated migration counts are
//! observed. The crate provides simulation, causal filters in both time
//! settings, Baum-Welch calibration, and the ingestion/evaluation plumbing
//! used by the `migfilter` command-line tool.

pub mod backtest;
pub mod calibrate;
pub mod continuous;
pub mod discrete;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod model;
pub mod panel;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{
    evolve_prior, predict_transition_probs, validate_model, Conversion, FilterState,
    HiddenFactorSpec, Matrix, MigrationLaw, Mode, Model, ModelDocument, Violation,
};
pub use panel::{Event, EventStream, ExposureReset, MigrationPanel};
