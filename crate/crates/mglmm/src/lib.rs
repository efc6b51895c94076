//! Maximum-likelihood fitting of multivariate generalized linear mixed
//! models (MGLMM) for count responses.
//!
//! Several count outcomes per subject are modelled jointly: each response
//! follows a Poisson, negative-binomial (NB2) or mean-parametrized
//! COM-Poisson conditional with a log link, and a multivariate-normal random
//! intercept per subject induces the cross-response correlation. The
//! marginal likelihood integrates the random effects out with a per-subject
//! Laplace approximation driven by an inner Newton solve; the outer
//! maximization runs staged quasi-Newton optimizers with exact first
//! derivatives. Inference (standard errors, AIC/BIC, the natural-scale
//! covariance report) comes from the observed information and the delta
//! method.
//!
//! The crate is both a library and a batch CLI (`mglmm fit / simulate /
//! describe / compare`).

pub mod covariance;
pub mod diff;
pub mod dispersion;
pub mod error;
pub mod families;
pub mod fitting;
pub mod io;
pub mod laplace;
pub mod linalg;
pub mod model;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};
