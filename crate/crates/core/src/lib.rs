//! Label augmentation experiments on a small reverse-mode tensor engine:
//! target encodings, training-time operations, corruption and attack
//! evaluation, calibration metrics, and a deterministic experiment runner.
//! The guide in `book/` walks through each part.

pub mod attacks;
pub mod augment;
pub mod data;
pub mod error;
pub mod experiment;
pub mod labels;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

/// Guide chapters, compiled as doc-tests so their snippets stay current.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub struct Tensors;
    #[doc = include_str!("../../../book/src/labels.md")]
    pub struct Labels;
    #[doc = include_str!("../../../book/src/augment.md")]
    pub struct Augment;
    #[doc = include_str!("../../../book/src/attacks.md")]
    pub struct Attacks;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub struct Experiments;
}
