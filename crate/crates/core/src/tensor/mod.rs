//! Dense tensors, the reverse-mode operator graph, batch norm and SGD.

mod array;
pub mod conv;
mod graph;
mod norm;
mod optim;
mod param;
mod scalar;

pub use array::Tensor;
pub use graph::{BatchStats, Graph, Var};
pub use norm::{batch_norm, BatchNorm, Mode, BN_EPS, BN_MOMENTUM};
pub use optim::{poly_lr, Sgd};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{gemm, DType, Scalar};
