//! Few-shot surface defect detection: a small conv backbone with pyramid
//! fusion, support-conditioned feature reweighting, prototype-based distance
//! classification and two-phase episodic training, on a synthetic
//! imbalanced defect corpus.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod episodic;
pub mod error;
pub mod eval;
pub mod metric;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod proposals;
pub mod reweight;
pub mod synth;

pub use error::{Error, Result};
