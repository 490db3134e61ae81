//! Shift-response function estimation with targeted regularization.
//!
//! The crate is layered bottom-up:
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation over 2-D tensors.
//! * [`family`]: exponential-family cumulants and links.
//! * [`shifts`]: exposure shifts and their grammar.
//! * [`model`]: the varying-coefficient network with outcome and ratio heads.
//! * [`training`]: risks, the joint objective, Adam, and the fluctuation refit.
//! * [`estimators`]: plugin, AIPW and targeted estimates, influence functions,
//!   and bootstrap ensembles.
//! * [`data`]: synthetic generators with oracles, CSV I/O, splits, MISE.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod estimators;
pub mod family;
pub mod model;
pub mod shifts;
pub mod training;

pub use error::{Error, Result};
