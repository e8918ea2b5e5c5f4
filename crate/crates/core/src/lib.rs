//! Drug–target interaction regression.
//!
//! Compounds are parsed from SMILES and featurized either as circular
//! fingerprints or as atom feature matrices for graph convolution; proteins
//! are featurized by sequence composition. The two vectors are concatenated
//! and fed to a feedforward regression network trained with Adam and early
//! stopping, evaluated under warm and cold-start cross-validation.

pub mod ad;
pub mod checkpoint;
pub mod compound;
pub mod config;
pub mod dataset;
pub mod graphconv;
pub mod hyperopt;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod protein;
pub mod smiles;
pub mod splits;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
