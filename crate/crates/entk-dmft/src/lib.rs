//! Training dynamics and effective neural tangent kernels of wide networks
//! under gradient descent and several biologically motivated learning rules.
//!
//! The crate covers four levels of description that are meant to agree with
//! each other:
//!
//! * [`finite_width`]: explicit Euler training of an actual width-N MLP.
//! * [`lazy`]: closed-form static kernels of the small-richness limit.
//! * [`dmft`]: the Monte Carlo self-consistent mean-field solver.
//! * [`linear`] and [`exact`]: sampling-free closures for linear networks.
//!
//! [`finite_size`] estimates and predicts O(1/N) kernel fluctuations, and
//! [`harness`] wires everything to JSON configs and CSV/JSON outputs.

pub mod activation;
pub mod dmft;
pub mod error;
pub mod exact;
pub mod finite_size;
pub mod finite_width;
pub mod harness;
pub mod lazy;
pub mod linalg;
pub mod linear;
pub mod model;
pub mod rng;
pub mod tensor;

pub use activation::Activation;
pub use error::{Error, Result};
pub use model::{Dataset, DmftState, KernelSet, NetworkConfig, ResponseSet, Rule, TimeGrid};
pub use tensor::TwoTime;
