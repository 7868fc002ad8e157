//! Wind power forecasting toolkit.
//!
//! End-to-end pipeline for turbine SCADA data:
//!
//! - [`dataio`]: CSV ingestion onto a dense (day, slot) grid with presence
//!   and validity masks
//! - [`preprocess`]: previous-value gap filling, min-max feature scaling,
//!   sliding-window sample cutting and temporal splits
//! - [`autodiff`]: a minimal dense-tensor library with tape-based
//!   reverse-mode differentiation and a finite-difference gradient checker
//! - [`model`]: the forecaster: token embedding without positional
//!   encoding, one transformer encoder block, three dense head layers
//! - [`train`]: Adam optimization, checkpointing
//! - [`postprocess`]: intraday fluctuation profile fitted from history and
//!   added to raw forecasts, with start-time alignment, boost and clamping
//! - [`evaluate`]: masked MAE/RMSE, farm scores, backtest sampling and a
//!   persistence baseline
//! - [`synthdata`]: deterministic synthetic dataset generator for tests

pub mod autodiff;
pub mod dataio;
pub mod evaluate;
pub mod model;
pub mod postprocess;
pub mod preprocess;
pub mod synthdata;
pub mod train;
