//! Lattice fusion networks: convolutional denoisers whose layers sit on the
//! nodes of a serpentine directed lattice, trained by residual learning.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod evaluation;
pub mod lattice;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use lattice::{ArchSpec, Fusion, LatticeSpec, PlainSpec};
pub use model::{initialize_model, NetworkModel};
pub use tensor::{Mode, Scalar, Shape, Tensor};
