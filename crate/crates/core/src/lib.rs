//! In-context learning lab: synthetic task families, small sequence models
//! trained from scratch, closed-form baseline estimators and evaluation
//! reports of MSE against context length.

pub mod attention;
pub mod autodiff;
pub mod baselines;
pub mod dump;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod models;
pub mod ood;
pub mod optim;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
