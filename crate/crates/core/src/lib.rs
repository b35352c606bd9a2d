//! Feature learning at convergence.
//!
//! Tools for computing and comparing layer feature estimates (FACT, bFACT, AGOP,
//! bAGOP, eNFA, beNFA), recursive feature machines driven by either the AGOP or the
//! FACT matrix, an instrumented fully-connected trainer, synthetic task
//! generators and the diagnostics used to compare all of these.

pub mod datasets;
pub mod diagnostics;
pub mod error;
pub mod kernels;
pub mod nn;
pub mod rfm;
pub mod symlinalg;

pub use datasets::Dataset;
pub use error::{Divergence, Error, Result};
pub use nn::{EstimateKind, FeatureEstimate, MlpModel, TrainConfig};
pub use kernels::{FeatureMatrix, KernelSpec, ScalarFn};
pub use rfm::{DualSolution, RfmConfig, RfmFit, RfmTrace, UpdateRule};
pub use symlinalg::{EigenDecomposition, SymMatrix};
