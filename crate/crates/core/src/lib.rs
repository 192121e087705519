//! Multi-task convolutional networks with reparameterized convolutions.
//!
//! Every convolution of a backbone can be factored into a frozen shared filter
//! bank followed by a task-specific 1×1 modulator. Tasks are added one at a
//! time and train only their own parameters, so existing tasks are never
//! disturbed. The crate also carries the baselines (frozen encoder,
//! task-specific batch norms or convolutions, residual adapters), response
//! initialization of the filter bank from a pretrained plain network,
//! gradient-interference analysis, a synthetic multi-task benchmark and a
//! checkpoint format.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root name the two concrete widths.

pub mod analysis;
pub mod data;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod reparam;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::{BackboneSpec, ConvSpec, Network};
pub use tensor::{Graph, Mode, ParamStore, Scalar, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
