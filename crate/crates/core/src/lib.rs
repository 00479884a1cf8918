//! I-prior regression.
//!
//! Fits regression models in which the regression function carries a
//! Gaussian prior whose covariance is the squared RKHS Gram matrix scaled by
//! the error precision. The crate covers kernel construction over continuous,
//! categorical and functional covariates, maximum-likelihood estimation of
//! the hyperparameters (direct L-BFGS, EM, mixed, or fixed), a Nystrom
//! low-rank path for larger samples, and posterior prediction with credible
//! intervals.
//!
//! Typical flow: build a [`model::ModelSpec`], load it against a
//! [`data::DataTable`] with [`model::load_model`], fit with one of the
//! `estimation::fit_*` functions, then query the fit through the
//! [`posterior`] module.

pub mod cli;
pub mod data;
pub mod error;
pub mod estimation;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod posterior;
pub mod simulate;
pub mod stats;

mod optimize;

pub use error::{Error, Result};
