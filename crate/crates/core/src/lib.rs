//! Trident segmentation CNN and self-balancing focal loss for punctate lesion
//! segmentation, built on a small reverse-mode autodiff core.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
mod io_util;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod tensor;

pub use error::{Error, Result};
