//! Optical mark recognition for multiple-choice answer sheets.
//!
//! Pipeline: [`registration`] aligns a scanned sheet to the exam's reference
//! image, [`grading`] crops each answer box named in the [`dataset`]
//! metadata and classifies it through a [`strategy`] built from
//! [`classifiers`], and [`eval`] measures classifiers and grades against
//! ground truth.

pub mod classifiers;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod grading;
pub mod raster;
pub mod registration;
pub mod strategy;

pub use error::{OmrError, Result};
