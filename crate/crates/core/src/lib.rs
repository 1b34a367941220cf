//! Conditioned stochastic gradient descent for linear multiclass models, with
//! low-rank conditioners built by randomized sketching.
//!
//! The update is `W ← W − η·∇ℓ_y(W·x)·(A⁻¹x)ᵀ`. With `A = I` this is plain
//! SGD; `A = C^{1/2}` (with `C` the second moment of the inputs) is the
//! optimal choice for the convergence bound, and the sketched low-rank
//! conditioner approximates it in `O(nk)` per step.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod compare;
pub mod conditioner;
pub mod data;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod nncond;
pub mod optimizer;
pub mod rng;
pub mod sketch;

pub use conditioner::{Conditioner, EigenFloor};
pub use data::{generate_synthetic, Dataset, SyntheticSpec};
pub use error::{Error, ErrorClass, Result};
pub use linalg::DenseMatrix;
pub use losses::LossModel;
pub use optimizer::{train, StepSize, TrainConfig, TrainTrace};
pub use sketch::{sketched_preprocessing, SketchConfig};
