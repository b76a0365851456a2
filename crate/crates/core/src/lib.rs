//! Search for the placement of downsampling (pooling) layers in a
//! fixed-depth convolutional network.
//!
//! The crate is organised around the pieces of the search:
//!
//! - [`search_space`]: the constrained space of pooling placements and its
//!   block-count encoding (`[4,3,3]` means four blocks at full resolution,
//!   then three at half, then three at quarter).
//! - [`mixture`]: the balanced mixture-of-SuperNets controller. It keeps an
//!   accuracy estimate per (configuration, weight set) pair, turns it into a
//!   joint distribution with a temperature softmax and rebalances that
//!   distribution to uniform marginals with iterative proportional fitting.
//! - [`baselines`]: uniform single-path sampling, Boltzmann exploration and
//!   Monte-Carlo tree search over the resolution tree.
//! - [`surrogate`]: a desk-scale evaluation backend built on the exhaustive
//!   36-configuration CIFAR-10/ResNet20 accuracy table, with a weight-sharing
//!   interference model, plus Kendall rank correlation.
//! - [`backend`]: the training/evaluation interface every searcher drives.
//! - [`rng`]: the seeded, portable random streams used everywhere.

pub mod backend;
pub mod baselines;
pub mod error;
pub mod mixture;
pub mod rng;
pub mod search_space;
pub mod surrogate;

pub use backend::Backend;
pub use error::{Error, Result};
pub use search_space::{PoolingConfig, SearchSpace};
