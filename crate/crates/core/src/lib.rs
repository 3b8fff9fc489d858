//! Attribution-similarity weighted product-of-experts debiasing, end to end:
//! a small reverse-mode autodiff engine, a bag-of-embeddings classifier,
//! gradient×input saliencies, the loss family, synthetic biased datasets,
//! frozen biased-model artifacts, and the training/evaluation harness.

pub mod attribution;
pub mod autodiff;
pub mod biaspipe;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
