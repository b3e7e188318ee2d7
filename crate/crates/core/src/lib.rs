//! Desk-scale in-context edit-transfer laboratory: a micro diffusion
//! transformer trained with rectified flow on a synthetic edit benchmark,
//! with condition compression, condition caching and contrastive
//! refinement.

pub mod autodiff;
pub mod cache;
pub mod conditioning;
pub mod config;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod image;
pub mod metrics;
pub mod model;
pub mod par;
pub mod rng;
pub mod synthbench;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
