//! Policy optimisation in the mirror-learning family.
//!
//! The crate bundles a small dense-network substrate ([`nn`]), two
//! desk-scale control environments ([`envs`]), batch collection with GAE
//! ([`rollout`]), drift functions and their analysis ([`drift`]), the
//! inner-loop trainer ([`trainer`]) and an antithetic ES meta-trainer
//! ([`es`]). The `mirrorlab` binary wraps them in a CLI ([`cli`]).

pub mod cli;
pub mod drift;
pub mod envs;
pub mod error;
pub mod es;
pub mod nn;
pub mod policy;
pub mod rollout;
pub mod trainer;

pub use error::{Error, Result};
