//! Desk-scale neural machine translation with uncertainty-based confidence
//! estimation for back-translation.
//!
//! The toolkit trains tiny transformer models on toy corpora, back-translates
//! monolingual text, scores the synthetic pairs with Monte Carlo Dropout
//! confidence measures, and feeds those scores back into training as
//! sentence-level loss weights and word-level attention modulation.
//!
//! Start with the runnable examples (`cargo run --release --example <name>`):
//! each major capability has one. The `backtrans` binary wires the same
//! functionality into batch subcommands.

pub mod autodiff;
pub mod checkpoint;
pub mod confidence;
pub mod corpus;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod hash;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
