//! Multimodal sentiment regression with angular contrastive and modality
//! triplet objectives, built on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod training;

pub use error::{Error, Result};
