//! Post-hoc out-of-distribution detection from penultimate-layer features and
//! the weights of a linear classification head.
//!
//! The scoring core works on plain feature files ([`tensor_store`]) so no deep
//! learning runtime is needed. [`nc_scores`] holds the weight-proximity score
//! family, [`baselines`] the standard post-hoc detectors, and [`metrics`] the
//! AUROC / FPR95 evaluation. [`synth`] and [`collapse`] build desk-scale worlds
//! where the collapsed feature geometry can be checked directly.

pub mod baselines;
pub mod cli;
pub mod collapse;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod nc_scores;
pub mod synth;
pub mod tensor_store;

pub use dataset::{ClassifierHead, FeatureSet, TrainStats};
pub use error::{Error, Result};
