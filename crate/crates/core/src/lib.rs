//! Contrastive representation learning for time series with a meta-learned
//! augmentation policy.
//!
//! The pipeline: candidate transforms ([`augment`]) are mixed into one view
//! per instance by relaxed Bernoulli gates ([`policy`]); a dilated CNN
//! ([`encoder`]) is trained on global and local contrastive losses
//! ([`objectives`]) while the gate logits are trained on a
//! fidelity-plus-variety criterion ([`train`]). Frozen representations are
//! scored with ridge forecasting and RBF-SVM classification ([`eval`]).

pub mod augment;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod oracles;
pub mod plot;
pub mod policy;
pub mod runner;
pub mod rng;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
