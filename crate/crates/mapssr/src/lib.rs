//! Sample size re-estimation for two-arm trials with a normal endpoint,
//! using an internal pilot study and meta-analytic-predictive priors on the
//! precision.
//!
//! The crate covers the full workflow: derive a Gamma-mixture prior from
//! historical variance estimates ([`mapprior`]), update it with blinded or
//! unblinded interim data ([`posterior`]), turn the posterior into a final
//! sample size ([`samplesize`], [`ssr`]), and evaluate the operating
//! characteristics by simulation ([`simengine`]).

pub mod cli;
pub mod constants;
pub mod distmath;
pub mod error;
pub mod mapprior;
pub mod posterior;
pub mod samplesize;
pub mod simengine;
pub mod ssr;

pub use error::{Error, Result};
