//! Compositional segmentation with learnable von-Mises-Fisher kernels.
//!
//! Image features are decomposed into per-position likelihoods over a bank
//! of unit-norm kernels. The likelihoods feed a segmentation head, and their
//! kernel recomposition feeds an image reconstructor, so unlabeled images
//! still train the encoder and the kernels.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod training;
pub mod ttt;
pub mod vmf;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
