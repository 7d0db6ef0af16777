//! Masked jigsaw puzzle position embeddings: a small transformer laboratory.
//!
//! The crate contains a reverse-mode autodiff engine ([`autodiff`]), a compact
//! encoder-only transformer for image patches or token ids ([`model`]), the
//! token shuffling and unknown-position masking ([`mjp`]), localization
//! auxiliary losses ([`aux_loss`]), gradient-inversion attacks ([`attack`]) and
//! reconstruction / embedding-geometry metrics ([`metrics`]).

pub mod attack;
pub mod autodiff;
pub mod aux_loss;

pub mod error;
pub mod metrics;

pub mod mjp;
pub mod model;
pub mod optim;

pub mod rng;
pub mod tensor;

pub use autodiff::{GradientMap, Tape};
pub use error::{Error, Result};
pub use rng::RngKey;
pub use tensor::Tensor;
