//! Extrapolating treatment effects across sites.
//!
//! Site-level effect estimation, meta-analytic heterogeneity tests, series
//! extrapolation with LASSO/Cp selection, dyadic prediction-error analysis,
//! evidence-accumulation replays, site selection and experiment-or-extrapolate
//! decisions, plus a seeded synthetic data generator.
//!
//! Numeric kernels ([`linalg`], [`ols`], [`lasso`] and parts of [`stats`],
//! [`heterogeneity`], [`evf`], [`siteselect`]) are generic over [`Scalar`]
//! (`f32` or `f64`). Site-level pipelines work in `f64`; the aliases below
//! name the `f64` instantiations.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cumulative;
pub mod data;
pub mod decide;
pub mod error;
pub mod evf;
pub mod extrapolate;
pub mod heterogeneity;
pub mod lasso;
pub mod linalg;
pub mod ols;
pub mod rng;
pub mod scalar;
pub mod series;
pub mod site_effects;
pub mod siteselect;
pub mod stats;
pub mod synth;

pub use data::{EvidenceBase, MacroCovariates, MicroRecord, Outcome, SiteData, SiteKey};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use series::{CovariateSet, SeriesSchema};
pub use site_effects::EffectEstimate;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Matrix32 = linalg::DenseMatrix<f32>;
pub type Qr = linalg::Qr<f64>;
pub type GramCholesky = linalg::GramCholesky<f64>;
pub type OlsFit = ols::OlsFit<f64>;
pub type OlsFit32 = ols::OlsFit<f32>;
pub type LassoPath = lasso::LassoPath<f64>;
pub type LassoPath32 = lasso::LassoPath<f32>;
pub type GramProblem = lasso::GramProblem<f64>;
pub type CpSelection = lasso::CpSelection<f64>;
