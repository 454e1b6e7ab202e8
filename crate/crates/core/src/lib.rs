//! Bayesian clustering of count-valued time series.
//!
//! Each series is modeled by a binomial state-space model whose latent
//! log-odds follow a Gaussian random walk ([`ssm`]). Series are grouped by a
//! Dirichlet-process mixture over the per-cluster parameters `(mu, log psi)`
//! and sampled with Metropolis-within-Gibbs ([`dpm`]), where every marginal
//! likelihood comes from controlled sequential Monte Carlo ([`smc`]). A
//! representative clustering is picked from the trace by co-occurrence
//! ([`postsel`]). [`simgen`] generates labeled synthetic spike data and
//! [`oracle`] computes reference likelihoods by grid quadrature.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dpm;
pub mod error;
pub mod io;
pub mod numeric;
pub mod oracle;
pub mod postsel;
pub mod simgen;
pub mod smc;
pub mod ssm;

pub use error::{Error, Result};
