//! Coverage-bias auditing for aggregated mobile phone population counts.
//!
//! The crate measures how far a digital source's per-area counts depart from
//! a census, checks whether that bias clusters in space, and attributes it to
//! area covariates with boosted trees and exact SHAP values.
//!
//! Modules follow the pipeline: [`ingest`] and [`homeloc`] produce count
//! tables, [`bias`] turns them into coverage and bias, [`spatial`] tests for
//! clustering, [`boost`] and [`explain`] model and attribute the bias.
//! [`synth`] builds planted-truth worlds and holds reference oracles.

pub mod bias;
pub mod boost;
pub mod error;
pub mod explain;
pub mod geometry;
pub mod homeloc;
pub mod ingest;
pub mod loess;
pub mod seed;
pub mod spatial;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
