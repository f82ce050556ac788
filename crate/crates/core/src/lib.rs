//! Learning with low-rank functional tree tensor networks.
//!
//! The model is a balanced binary tree tensor network whose leaves carry
//! per-coordinate basis evaluations. Parameters live on a product of Stiefel
//! manifolds (all cores but the root) and are trained by Riemannian gradient
//! descent or by natural Riemannian gradient methods built on a matrix-free
//! Gauss-Newton operator.

pub mod data;
pub mod error;
pub mod features;
pub mod gauss_newton;
pub mod geometry;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod optimizers;
pub mod random;
pub mod topology;

pub use error::{FtnError, Result};
pub use features::{eval_features, gram_matrix, FeatureBatch, FeatureFamily, Measure};
pub use gauss_newton::{CgReport, FactorMode, GnFactorSet, OperatorKind};
pub use geometry::{horizontal_project, qr_retract, transport, HorizontalTangent};
pub use kernels::{khatri_rao, mttkrp, thin_qr, DenseTensor};
pub use losses::LossKind;
pub use model::{TangentTuple, TtnParams};
pub use optimizers::{run, Flow, Method, OptimizerConfig, StepPolicy, TraceRecord, TrainingData};
pub use topology::{BondDims, Child, TreeTopology};
