//! Weight-curvature diagnostics for adversarial training at desk scale.
//!
//! The crate runs the full pipeline on small feed-forward networks: a
//! second-order reverse-mode tape ([`autodiff`]), model construction and
//! rescaling ([`models`]), ℓ∞ attacks and robust risk ([`adversarial`]),
//! per-layer Hessian traces ([`curvature`]), the PAC-Bayes bound terms and
//! the weight-curvature index built from them ([`pacbayes`]), adversarial
//! training with a WCI-driven learning-rate scheduler ([`training`]), and
//! the experiment harness with CSV/SVG artifacts ([`harness`]).

pub mod adversarial;
pub mod autodiff;
pub mod curvature;
pub mod error;
pub mod harness;
pub mod models;
pub mod pacbayes;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
