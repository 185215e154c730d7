//! Distributed spectral regularization for kernel least squares on `[0, 1]`.
//!
//! The sample is split into `m` blocks, each block is fitted with the same
//! filter function `g_λ` applied to its normalized empirical kernel operator,
//! and the local estimators are averaged.

pub mod adaptivity;
pub mod distributed;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod filters;
pub mod kernels;
mod quad;
pub mod rng;
pub mod smoothness;
pub mod theory;

pub use distributed::{diagnostic_split, fit_distributed, partition, AveragedEstimator, DiagnosticSplit, Partition};
pub use error::{Error, Result};
pub use estimator::{fit, fit_iterative, fit_spectral, BlockSolver, KernelExpansion, SolverPath, SpectralModel};
pub use experiments::{ExperimentConfig, LambdaRule};
pub use filters::{FilterKind, FilterSpec, LambdaParam};
pub use kernels::Kernel;
pub use smoothness::TargetFunction;
pub use theory::{SpectrumModel, TheoryParams};
