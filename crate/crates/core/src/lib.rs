//! Segmentation loss laboratory.
//!
//! Cross-entropy and Dice losses, label-marginal regularizers, exact
//! decompositions of those losses into ground-truth matching and
//! label-marginal bias terms, numerical certificates for the resulting
//! bounds and minimizers, analytic gradients checked against finite
//! differences, and a deterministic toy trainer.

pub mod decomp;
pub mod error;
pub mod field;
pub mod grad;
pub mod losses;
pub mod pgm;
pub mod rng;
pub mod sampling;
pub mod synthlab;
pub mod theory;

pub use error::{Error, Result};
pub use field::{
    gt_marginal, predicted_marginal, temperature_softmax, LabelField, LogitField, Marginal, ProbField, Shape,
    DEFAULT_TAU,
};
pub use losses::{composite_loss, LossReport, LossSpec, Smoothing};
