//! Clustering of structured time series with a Dirichlet-process mixture of
//! hierarchical Gaussian processes.
//!
//! Every variable except the cluster allocations is integrated out, leaving a
//! collapsed ("KL-corrected") lower bound on the marginal likelihood that is a
//! function of an `N x K` responsibility matrix only. The bound is climbed with
//! natural-gradient steps in the softmax parameterization (a unit step is one
//! round of mean-field VBEM) or with Riemannian conjugate gradients, while
//! split / prune / reorder moves adapt the truncation level and kernel
//! hyperparameters are re-estimated in between.
//!
//! Module map:
//!
//! * [`kernels`]: covariance functions, Gram matrices, log-parameter gradients.
//! * [`hgp`]: hierarchical designs, compound covariances, GP prediction.
//! * [`bound`]: the collapsed bound, its three terms and its gradients.
//! * [`optimizer`]: natural gradients, Hestenes-Stiefel directions, the
//!   optimization loop and a mean-field reference update.
//! * [`moves`]: split, prune and reorder.
//! * [`hypers`]: initialization heuristics and hyperparameter ascent.
//! * [`synth`]: synthetic benchmark data and clustering metrics.
//! * [`pipeline`]: the full fit and the steepest-vs-conjugate race.

pub mod bound;
pub mod error;
pub mod hgp;
pub mod hypers;
pub mod kernels;
pub(crate) mod linalg;
pub mod moves;
pub mod optimizer;
pub mod pipeline;
pub mod synth;

pub use bound::{BoundBreakdown, ClusterPosterior, Objective, Responsibilities, SuffStats};
pub use error::{Error, Result};
pub use hgp::{Design, GroupedDataset, Hypers, Layer, Scope, StructureSpec};
pub use kernels::{GramMatrix, KernelSpec};
pub use optimizer::{Mode, OptimizerConfig, StepKind, TraceRecord};
