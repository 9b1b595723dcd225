//! Questioner agent for a multi-round image guessing game.
//!
//! The questioner factors *what to ask* (a small discrete latent code) from
//! *how to say it* (a frozen recurrent speaker). It is pre-trained on
//! single-round contrast pairs with a variational objective and then adapted
//! to multi-round games using only the guessing loss.

pub mod agents;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod service;
pub mod stochastic;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
