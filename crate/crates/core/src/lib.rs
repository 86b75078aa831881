//! Face identification: weighted 2DPCA and PCA feature extraction, a kernel
//! SVM trained by sequential minimal optimization, k-NN and MLP baselines,
//! and a cross-validation harness.

pub mod baselines;
pub mod cli;
pub mod eval;
pub mod imageio;
pub mod linalg;
pub mod serial;
pub mod subspace;
pub mod svm;
