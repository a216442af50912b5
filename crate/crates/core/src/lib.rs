//! Semi-supervised image classification with a jigsaw-puzzle auxiliary task.
//!
//! A shared convolutional encoder feeds two heads: a supervised lesion
//! classifier and a jigsaw head that predicts which tile permutation was
//! applied to its input. Training alternates a supervised step on labeled
//! frames with a jigsaw step on every training frame. The same jigsaw head
//! doubles as an out-of-distribution signal at inference time.
//!
//! Runnable walkthroughs for each capability live in `examples/`:
//!
//! ```bash
//! cargo run --release -p jigsaw-ssl --example permutation_sets
//! cargo run --release -p jigsaw-ssl --example jigsaw_shuffler
//! cargo run --release -p jigsaw-ssl --example fraction_sweep
//! ```

pub mod dataset;
pub mod error;
pub mod experiments;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ood;
pub mod optim;
pub mod permset;
pub mod plot;
pub mod shuffler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
